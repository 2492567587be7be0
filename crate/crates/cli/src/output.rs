use ark_core::catalog::Dataset;
use ark_core::Digest;
use serde_json::{json, Map, Value};

/// Writes either one JSON object per line or human-readable text.
pub struct Out {
    pub json: bool,
}

impl Out {
    pub fn new(json: bool) -> Self {
        Out { json }
    }

    pub fn record(&self, value: Value, human: String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{human}");
        }
    }

    /// Rows keyed by lower-cased column names.
    pub fn table(&self, columns: &[&str], rows: Vec<Map<String, Value>>) {
        if self.json {
            for r in rows {
                println!("{}", Value::Object(r));
            }
            return;
        }
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| columns.iter().map(|c| cell(r.get(&c.to_lowercase()))).collect())
            .collect();
        let widths: Vec<usize> = columns
            .iter()
            .enumerate()
            .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
            .collect();
        let line = |vals: Vec<&str>| {
            let padded: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            println!("{}", padded.join("  ").trim_end());
        };
        line(columns.to_vec());
        for r in &cells {
            line(r.iter().map(String::as_str).collect());
        }
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => "-".into(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(a)) => a.iter().map(|x| cell(Some(x))).collect::<Vec<_>>().join(","),
        Some(other) => other.to_string(),
    }
}

pub fn dataset_row(name: &str, manifest: Digest, ds: &Dataset) -> Map<String, Value> {
    let label: Vec<&str> = ds.label().iter().collect();
    let v = json!({
        "name": name,
        "kind": ds.kind(),
        "manifest": manifest,
        "time": ds.time_stamp(),
        "label": label,
    });
    v.as_object().unwrap().clone()
}
