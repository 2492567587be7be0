use super::{BandRef, BinOp, Expr, ExprError, ExprProgram, Func};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    Eof,
}

struct Token {
    tok: Tok,
    offset: usize,
}

fn syntax(offset: usize, message: impl Into<String>) -> ExprError {
    ExprError::Syntax { offset, message: message.into() }
}

const OPS: [&str; 15] = ["<=", ">=", "==", "!=", "<", ">", "+", "-", "*", "/", "(", ")", ",", ".", "!"];

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let v: f64 = text[start..i].parse().map_err(|_| syntax(start, "bad number"))?;
            if !v.is_finite() {
                return Err(syntax(start, "number literal out of range"));
            }
            out.push(Token { tok: Tok::Num(v), offset: start });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(text[start..i].to_string()), offset: start });
        } else if let Some(op) = OPS.iter().find(|op| text[i..].starts_with(**op)) {
            if *op == "!" {
                return Err(syntax(start, "unexpected '!'"));
            }
            i += op.len();
            out.push(Token { tok: Tok::Op(op), offset: start });
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(syntax(start, format!("unexpected character {ch:?}")));
        }
    }
    out.push(Token { tok: Tok::Eof, offset: text.len() });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    declared: &'a dyn Fn(&str) -> bool,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].offset
    }

    fn next(&mut self) -> &Token {
        let t = &self.toks[self.pos];
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Tok::Op(o) if *o == op) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: &str) -> Result<(), ExprError> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(syntax(self.offset(), format!("expected '{op}'")))
        }
    }

    fn peek_op(&self, table: &[(&str, BinOp)]) -> Option<BinOp> {
        match self.peek() {
            Tok::Op(o) => table.iter().find(|(s, _)| s == o).map(|(_, op)| *op),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        const CMP: [(&str, BinOp); 6] = [
            ("<", BinOp::Lt),
            ("<=", BinOp::Le),
            (">", BinOp::Gt),
            (">=", BinOp::Ge),
            ("==", BinOp::Eq),
            ("!=", BinOp::Ne),
        ];
        let lhs = self.add()?;
        match self.peek_op(&CMP) {
            Some(op) => {
                self.next();
                let rhs = self.add()?;
                if self.peek_op(&CMP).is_some() {
                    return Err(syntax(self.offset(), "comparisons do not chain"));
                }
                Ok(Expr::bin(op, lhs, rhs))
            }
            None => Ok(lhs),
        }
    }

    fn add(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.mul()?;
        while let Some(op) = self.peek_op(&[("+", BinOp::Add), ("-", BinOp::Sub)]) {
            self.next();
            lhs = Expr::bin(op, lhs, self.mul()?);
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_op(&[("*", BinOp::Mul), ("/", BinOp::Div)]) {
            self.next();
            lhs = Expr::bin(op, lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.next().tok.clone() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Op("(") => {
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            Tok::Ident(name) if name == "NODATA" => Ok(Expr::Nodata),
            Tok::Ident(name) => {
                if self.eat(".") {
                    self.band(name, offset)
                } else if self.eat("(") {
                    self.call(name, offset)
                } else {
                    Err(syntax(self.offset(), format!("expected '.' or '(' after {name:?}")))
                }
            }
            Tok::Eof => Err(syntax(offset, "unexpected end of input")),
            Tok::Op(o) => Err(syntax(offset, format!("unexpected '{o}'"))),
        }
    }

    fn band(&mut self, alias: String, alias_offset: usize) -> Result<Expr, ExprError> {
        let offset = self.offset();
        let band = match self.next().tok.clone() {
            Tok::Ident(b) if b.len() > 1 && b.starts_with('b') && b[1..].bytes().all(|c| c.is_ascii_digit()) => b[1..]
                .parse::<u32>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| syntax(offset + 1, "band index must be a positive integer"))?,
            _ => return Err(syntax(offset, "expected band reference b<k>")),
        };
        if !(self.declared)(&alias) {
            return Err(ExprError::UnknownIdentifier { name: alias, offset: alias_offset });
        }
        Ok(Expr::Band(BandRef { alias, band }))
    }

    fn call(&mut self, name: String, name_offset: usize) -> Result<Expr, ExprError> {
        let func = Func::from_name(&name)
            .ok_or_else(|| ExprError::UnknownIdentifier { name: name.clone(), offset: name_offset })?;
        let mut args = Vec::new();
        if !self.eat(")") {
            loop {
                args.push(self.expr()?);
                if self.eat(")") {
                    break;
                }
                self.expect(",")?;
            }
        }
        let (lo, hi) = func.arity();
        if args.len() < lo || args.len() > hi {
            return Err(syntax(name_offset, format!("{name} takes {} arguments, got {}", arity_text(lo, hi), args.len())));
        }
        Ok(Expr::Call { func, args })
    }
}

fn arity_text(lo: usize, hi: usize) -> String {
    if lo == hi {
        lo.to_string()
    } else {
        format!("at least {lo}")
    }
}

/// Parses `text`; band references must name one of `aliases`.
pub fn parse<S: AsRef<str>>(text: &str, aliases: &[S]) -> Result<ExprProgram, ExprError> {
    let declared = |a: &str| aliases.iter().any(|d| d.as_ref() == a);
    let mut p = Parser { toks: lex(text)?, pos: 0, declared: &declared };
    let expr = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(syntax(p.offset(), "unexpected trailing input"));
    }
    Ok(ExprProgram::from_expr(text, expr))
}
