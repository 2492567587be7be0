//! Reader and writer for a small, auditable GeoTIFF subset.
//!
//! Supported: little-endian classic TIFF, first IFD only, u8/i16/i32/f32
//! samples, no compression (1) or Deflate (8, 32946), strip or tile layout,
//! chunky or planar samples, no predictor. Georeferencing comes from
//! ModelPixelScaleTag, ModelTiepointTag and GeoKeyDirectoryTag; the GDAL
//! NODATA ASCII tag is honoured when present.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;

use crate::geo::{Affine, Crs};
use crate::store::DType;

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_PREDICTOR: u16 = 317;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_TILE_OFFSETS: u16 = 324;
const TAG_TILE_BYTE_COUNTS: u16 = 325;
const TAG_SAMPLE_FORMAT: u16 = 339;
const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_GEO_KEY_DIRECTORY: u16 = 34735;
const TAG_GDAL_NODATA: u16 = 42113;

const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_CS_TYPE: u16 = 3072;

#[derive(Debug, thiserror::Error)]
pub enum TiffError {
    #[error("unsupported GeoTIFF: {0}")]
    Unsupported(String),
    #[error("missing georeferencing: {0}")]
    Metadata(String),
    #[error("malformed TIFF: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> TiffError {
    TiffError::Malformed(msg.into())
}

fn unsupported(msg: impl Into<String>) -> TiffError {
    TiffError::Unsupported(msg.into())
}

/// Decoded raster with its georeferencing. Bands are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub dtype: DType,
    pub nodata: Option<f64>,
    pub crs: Crs,
    pub affine: Affine,
    pub bands: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Value {
    Ints(Vec<u64>),
    Floats(Vec<f64>),
    Ascii(String),
}

impl Value {
    fn ints(&self) -> Option<&[u64]> {
        match self {
            Value::Ints(v) => Some(v),
            _ => None,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn bytes(&self, off: usize, len: usize) -> Result<&'a [u8], TiffError> {
        off.checked_add(len)
            .and_then(|end| self.buf.get(off..end))
            .ok_or_else(|| malformed(format!("read of {len} bytes at {off} past end of file")))
    }

    fn u16(&self, off: usize) -> Result<u16, TiffError> {
        Ok(u16::from_le_bytes(self.bytes(off, 2)?.try_into().unwrap()))
    }

    fn u32(&self, off: usize) -> Result<u32, TiffError> {
        Ok(u32::from_le_bytes(self.bytes(off, 4)?.try_into().unwrap()))
    }
}

fn type_size(ty: u16) -> Option<usize> {
    Some(match ty {
        1 | 2 | 6 | 7 => 1,
        3 | 8 => 2,
        4 | 9 | 11 => 4,
        5 | 10 | 12 => 8,
        _ => return None,
    })
}

fn read_ifd(r: &Reader<'_>, ifd: usize) -> Result<BTreeMap<u16, Value>, TiffError> {
    let count = r.u16(ifd)? as usize;
    let mut tags = BTreeMap::new();
    for i in 0..count {
        let e = ifd + 2 + i * 12;
        let tag = r.u16(e)?;
        let ty = r.u16(e + 2)?;
        let n = r.u32(e + 4)? as usize;
        let Some(size) = type_size(ty) else {
            continue;
        };
        let total = size
            .checked_mul(n)
            .ok_or_else(|| malformed("tag value size overflows"))?;
        let data = if total <= 4 {
            r.bytes(e + 8, total)?
        } else {
            r.bytes(r.u32(e + 8)? as usize, total)?
        };
        let value = match ty {
            2 => Value::Ascii(
                String::from_utf8_lossy(data).trim_end_matches('\0').to_string(),
            ),
            1 | 7 => Value::Ints(data.iter().map(|&b| b as u64).collect()),
            3 => Value::Ints(
                data.chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]) as u64)
                    .collect(),
            ),
            4 => Value::Ints(
                data.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as u64)
                    .collect(),
            ),
            11 => Value::Floats(
                data.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            ),
            12 => Value::Floats(
                data.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            5 => Value::Floats(
                data.chunks_exact(8)
                    .map(|c| {
                        let num = u32::from_le_bytes(c[..4].try_into().unwrap()) as f64;
                        let den = u32::from_le_bytes(c[4..].try_into().unwrap()) as f64;
                        num / den
                    })
                    .collect(),
            ),
            // Signed types are never needed by the subset.
            _ => continue,
        };
        tags.insert(tag, value);
    }
    Ok(tags)
}

fn single(tags: &BTreeMap<u16, Value>, tag: u16, name: &str) -> Result<u64, TiffError> {
    tags.get(&tag)
        .and_then(Value::ints)
        .and_then(|v| v.first().copied())
        .ok_or_else(|| malformed(format!("missing {name}")))
}

fn optional(tags: &BTreeMap<u16, Value>, tag: u16, default: u64) -> Result<u64, TiffError> {
    match tags.get(&tag) {
        None => Ok(default),
        Some(v) => v
            .ints()
            .and_then(|v| v.first().copied())
            .ok_or_else(|| malformed(format!("tag {tag} has the wrong type"))),
    }
}

fn int_list<'t>(tags: &'t BTreeMap<u16, Value>, tag: u16, name: &str) -> Result<&'t [u64], TiffError> {
    tags.get(&tag)
        .and_then(Value::ints)
        .ok_or_else(|| malformed(format!("missing {name}")))
}

fn inflate(data: &[u8], compression: u64, expected: usize) -> Result<Vec<u8>, TiffError> {
    match compression {
        1 => Ok(data.to_vec()),
        8 | 32946 => {
            let mut out = Vec::with_capacity(expected);
            ZlibDecoder::new(data)
                .read_to_end(&mut out)
                .map_err(|e| malformed(format!("deflate stream: {e}")))?;
            Ok(out)
        }
        other => Err(unsupported(format!("compression {other}"))),
    }
}

fn sample_dtype(bits: u64, format: u64) -> Result<DType, TiffError> {
    match (bits, format) {
        (8, 1) => Ok(DType::U8),
        (16, 2) => Ok(DType::I16),
        (32, 2) => Ok(DType::I32),
        (32, 3) => Ok(DType::F32),
        (b, f) => Err(unsupported(format!("{b}-bit samples with SampleFormat {f}"))),
    }
}

fn read_sample(dtype: DType, b: &[u8]) -> f64 {
    match dtype {
        DType::U8 => b[0] as f64,
        DType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
        DType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        DType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        DType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
    }
}

fn georeference(tags: &BTreeMap<u16, Value>) -> Result<(Crs, Affine), TiffError> {
    let scale = match tags.get(&TAG_MODEL_PIXEL_SCALE) {
        Some(Value::Floats(v)) if v.len() >= 2 => v.clone(),
        _ => return Err(TiffError::Metadata("ModelPixelScaleTag".into())),
    };
    let tie = match tags.get(&TAG_MODEL_TIEPOINT) {
        Some(Value::Floats(v)) if v.len() >= 6 => v.clone(),
        _ => return Err(TiffError::Metadata("ModelTiepointTag".into())),
    };
    let keys = tags
        .get(&TAG_GEO_KEY_DIRECTORY)
        .and_then(Value::ints)
        .ok_or_else(|| TiffError::Metadata("GeoKeyDirectoryTag".into()))?;
    if keys.len() < 4 {
        return Err(malformed("short GeoKeyDirectory"));
    }
    let n = keys[3] as usize;
    if keys.len() < 4 + 4 * n {
        return Err(malformed("GeoKeyDirectory shorter than its key count"));
    }
    let mut geographic = None;
    let mut projected = None;
    for k in keys[4..4 + 4 * n].chunks_exact(4) {
        // Only inline SHORT values (location 0) carry EPSG codes.
        if k[1] != 0 {
            continue;
        }
        match k[0] as u16 {
            KEY_GEOGRAPHIC_TYPE => geographic = Some(k[3]),
            KEY_PROJECTED_CS_TYPE => projected = Some(k[3]),
            _ => {}
        }
    }
    let epsg = projected
        .or(geographic)
        .ok_or_else(|| TiffError::Metadata("no EPSG code in GeoKeyDirectory".into()))?;
    let crs = Crs::from_epsg(epsg as u32).map_err(|e| unsupported(e.to_string()))?;
    let (sx, sy) = (scale[0], scale[1]);
    let (i, j, x, y) = (tie[0], tie[1], tie[3], tie[4]);
    let affine = Affine::new(x - i * sx, y + j * sy, sx, -sy)
        .map_err(|_| TiffError::Metadata("degenerate pixel scale".into()))?;
    Ok((crs, affine))
}

/// Decodes a GeoTIFF held in memory.
pub fn decode(buf: &[u8]) -> Result<Raster, TiffError> {
    if buf.len() < 8 {
        return Err(malformed("file shorter than a TIFF header"));
    }
    match &buf[..4] {
        b"II*\0" => {}
        b"II+\0" => return Err(unsupported("BigTIFF")),
        b"MM\0*" => return Err(unsupported("big-endian TIFF")),
        _ => return Err(malformed("not a TIFF file")),
    }
    let r = Reader { buf };
    let tags = read_ifd(&r, r.u32(4)? as usize)?;

    let width = single(&tags, TAG_IMAGE_WIDTH, "ImageWidth")?;
    let height = single(&tags, TAG_IMAGE_LENGTH, "ImageLength")?;
    if width == 0 || height == 0 || width > u32::MAX as u64 || height > u32::MAX as u64 {
        return Err(malformed("bad image dimensions"));
    }
    let (width, height) = (width as usize, height as usize);
    let spp = optional(&tags, TAG_SAMPLES_PER_PIXEL, 1)? as usize;
    if spp == 0 {
        return Err(malformed("zero samples per pixel"));
    }
    let bits = int_list(&tags, TAG_BITS_PER_SAMPLE, "BitsPerSample")?;
    if bits.iter().any(|&b| b != bits[0]) {
        return Err(unsupported("mixed BitsPerSample"));
    }
    let format = match tags.get(&TAG_SAMPLE_FORMAT).and_then(Value::ints) {
        Some(f) if f.iter().any(|&x| x != f[0]) => return Err(unsupported("mixed SampleFormat")),
        Some(f) => f[0],
        None => 1,
    };
    let dtype = sample_dtype(bits[0], format)?;
    let compression = optional(&tags, TAG_COMPRESSION, 1)?;
    if !matches!(compression, 1 | 8 | 32946) {
        return Err(unsupported(format!("compression {compression}")));
    }
    if optional(&tags, TAG_PREDICTOR, 1)? != 1 {
        return Err(unsupported("predictor"));
    }
    let planar = optional(&tags, TAG_PLANAR_CONFIG, 1)?;
    if !matches!(planar, 1 | 2) {
        return Err(malformed(format!("PlanarConfiguration {planar}")));
    }
    let (crs, affine) = georeference(&tags)?;
    let nodata = match tags.get(&TAG_GDAL_NODATA) {
        Some(Value::Ascii(s)) => {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| malformed(format!("GDAL_NODATA {s:?}")))?;
            if v.is_nan() {
                None
            } else if dtype.represents(v) {
                Some(v)
            } else {
                return Err(unsupported(format!("NODATA {v} not representable as {dtype:?}")));
            }
        }
        _ => None,
    };

    let ssize = dtype.size();
    let mut bands = vec![vec![0.0f64; width * height]; spp];
    // Per segment: pixel window, then a sample-plane selector for planar data.
    let segments: Vec<(usize, usize, usize, usize, Option<usize>)>;
    let offsets;
    let counts;
    let tiled = tags.contains_key(&TAG_TILE_WIDTH);
    if tiled {
        let tw = single(&tags, TAG_TILE_WIDTH, "TileWidth")? as usize;
        let th = single(&tags, TAG_TILE_LENGTH, "TileLength")? as usize;
        if tw == 0 || th == 0 {
            return Err(malformed("zero tile size"));
        }
        offsets = int_list(&tags, TAG_TILE_OFFSETS, "TileOffsets")?;
        counts = int_list(&tags, TAG_TILE_BYTE_COUNTS, "TileByteCounts")?;
        let across = width.div_ceil(tw);
        let down = height.div_ceil(th);
        let planes = if planar == 2 { spp } else { 1 };
        let mut segs = Vec::new();
        for p in 0..planes {
            for ty in 0..down {
                for tx in 0..across {
                    segs.push((tx * tw, ty * th, tw, th, (planar == 2).then_some(p)));
                }
            }
        }
        segments = segs;
    } else {
        let rps = (optional(&tags, TAG_ROWS_PER_STRIP, height as u64)? as usize).min(height);
        if rps == 0 {
            return Err(malformed("zero RowsPerStrip"));
        }
        offsets = int_list(&tags, TAG_STRIP_OFFSETS, "StripOffsets")?;
        counts = int_list(&tags, TAG_STRIP_BYTE_COUNTS, "StripByteCounts")?;
        let strips = height.div_ceil(rps);
        let planes = if planar == 2 { spp } else { 1 };
        let mut segs = Vec::new();
        for p in 0..planes {
            for s in 0..strips {
                let rows = rps.min(height - s * rps);
                segs.push((0, s * rps, width, rows, (planar == 2).then_some(p)));
            }
        }
        segments = segs;
    }
    if offsets.len() < segments.len() || counts.len() < segments.len() {
        return Err(malformed("fewer segment offsets than the layout requires"));
    }

    for (i, &(x0, y0, sw, sh, plane)) in segments.iter().enumerate() {
        let per_pixel = if plane.is_some() { 1 } else { spp };
        let expected = sw * sh * per_pixel * ssize;
        let raw = r.bytes(offsets[i] as usize, counts[i] as usize)?;
        let data = inflate(raw, compression, expected)?;
        if data.len() < expected {
            return Err(malformed(format!(
                "segment {i} holds {} bytes, expected {expected}",
                data.len()
            )));
        }
        for row in 0..sh {
            let y = y0 + row;
            if y >= height {
                break;
            }
            for col in 0..sw {
                let x = x0 + col;
                if x >= width {
                    break;
                }
                let base = (row * sw + col) * per_pixel * ssize;
                match plane {
                    Some(p) => bands[p][y * width + x] = read_sample(dtype, &data[base..]),
                    None => {
                        for (s, band) in bands.iter_mut().enumerate() {
                            band[y * width + x] = read_sample(dtype, &data[base + s * ssize..]);
                        }
                    }
                }
            }
        }
    }

    Ok(Raster {
        width: width as u32,
        height: height as u32,
        dtype,
        nodata,
        crs,
        affine,
        bands,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Strips { rows_per_strip: u32 },
    /// Tile edge in pixels; must be a multiple of 16.
    Tiles { size: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub layout: Layout,
    pub deflate: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions { layout: Layout::Strips { rows_per_strip: 16 }, deflate: false }
    }
}

fn push_sample(out: &mut Vec<u8>, dtype: DType, v: f64) {
    match dtype {
        DType::U8 => out.push(v as u8),
        DType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
        DType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
        DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

enum Field {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Double(Vec<f64>),
    Ascii(String),
}

/// Encodes a raster as a chunky (interleaved) little-endian GeoTIFF.
pub fn encode(raster: &Raster, opts: WriteOptions) -> Result<Vec<u8>, TiffError> {
    let (w, h) = (raster.width as usize, raster.height as usize);
    let spp = raster.bands.len();
    if spp == 0 || raster.bands.iter().any(|b| b.len() != w * h) {
        return Err(malformed("band sizes do not match dimensions"));
    }
    let (bits, format) = match raster.dtype {
        DType::U8 => (8u16, 1u16),
        DType::I16 => (16, 2),
        DType::I32 => (32, 2),
        DType::F32 => (32, 3),
        DType::F64 => return Err(unsupported("f64 output")),
    };
    let windows: Vec<(usize, usize, usize, usize)> = match opts.layout {
        Layout::Strips { rows_per_strip } => {
            let rps = (rows_per_strip.max(1) as usize).min(h);
            (0..h.div_ceil(rps))
                .map(|s| (0, s * rps, w, rps.min(h - s * rps)))
                .collect()
        }
        Layout::Tiles { size } => {
            if size == 0 || size % 16 != 0 {
                return Err(unsupported("tile size must be a positive multiple of 16"));
            }
            let t = size as usize;
            let mut v = Vec::new();
            for ty in 0..h.div_ceil(t) {
                for tx in 0..w.div_ceil(t) {
                    v.push((tx * t, ty * t, t, t));
                }
            }
            v
        }
    };

    let mut out = b"II*\0\0\0\0\0".to_vec();
    let mut offsets = Vec::new();
    let mut counts = Vec::new();
    for &(x0, y0, sw, sh) in &windows {
        let mut seg = Vec::with_capacity(sw * sh * spp * raster.dtype.size());
        for row in 0..sh {
            for col in 0..sw {
                let (x, y) = (x0 + col, y0 + row);
                for band in &raster.bands {
                    let v = if x < w && y < h { band[y * w + x] } else { 0.0 };
                    push_sample(&mut seg, raster.dtype, v);
                }
            }
        }
        if opts.deflate {
            let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(&seg).map_err(|e| malformed(e.to_string()))?;
            seg = enc.finish().map_err(|e| malformed(e.to_string()))?;
        }
        offsets.push(out.len() as u32);
        counts.push(seg.len() as u32);
        out.extend_from_slice(&seg);
        if out.len() % 2 == 1 {
            out.push(0);
        }
    }

    let a = raster.affine;
    let (model_type, key, code) = match raster.crs {
        Crs::Wgs84 => (2u16, KEY_GEOGRAPHIC_TYPE, 4326u16),
        Crs::WebMercator => (1u16, KEY_PROJECTED_CS_TYPE, 3857u16),
    };
    let geokeys = vec![1, 1, 0, 3, 1024, 0, 1, model_type, 1025, 0, 1, 1, key, 0, 1, code];
    let mut fields: Vec<(u16, Field)> = vec![
        (TAG_IMAGE_WIDTH, Field::Long(vec![w as u32])),
        (TAG_IMAGE_LENGTH, Field::Long(vec![h as u32])),
        (TAG_BITS_PER_SAMPLE, Field::Short(vec![bits; spp])),
        (TAG_COMPRESSION, Field::Short(vec![if opts.deflate { 8 } else { 1 }])),
        (TAG_PHOTOMETRIC, Field::Short(vec![1])),
        (TAG_SAMPLES_PER_PIXEL, Field::Short(vec![spp as u16])),
        (TAG_PLANAR_CONFIG, Field::Short(vec![1])),
        (TAG_SAMPLE_FORMAT, Field::Short(vec![format; spp])),
        (TAG_MODEL_PIXEL_SCALE, Field::Double(vec![a.pixel_w, -a.pixel_h, 0.0])),
        (TAG_MODEL_TIEPOINT, Field::Double(vec![0.0, 0.0, 0.0, a.origin_x, a.origin_y, 0.0])),
        (TAG_GEO_KEY_DIRECTORY, Field::Short(geokeys)),
    ];
    match opts.layout {
        Layout::Strips { rows_per_strip } => {
            fields.push((TAG_STRIP_OFFSETS, Field::Long(offsets)));
            fields.push((TAG_ROWS_PER_STRIP, Field::Long(vec![rows_per_strip.max(1).min(h as u32)])));
            fields.push((TAG_STRIP_BYTE_COUNTS, Field::Long(counts)));
        }
        Layout::Tiles { size } => {
            fields.push((TAG_TILE_WIDTH, Field::Long(vec![size])));
            fields.push((TAG_TILE_LENGTH, Field::Long(vec![size])));
            fields.push((TAG_TILE_OFFSETS, Field::Long(offsets)));
            fields.push((TAG_TILE_BYTE_COUNTS, Field::Long(counts)));
        }
    }
    if let Some(nd) = raster.nodata {
        fields.push((TAG_GDAL_NODATA, Field::Ascii(format!("{nd}\0"))));
    }
    fields.sort_by_key(|(t, _)| *t);

    let ifd_offset = out.len();
    out[4..8].copy_from_slice(&(ifd_offset as u32).to_le_bytes());
    let ifd_len = 2 + fields.len() * 12 + 4;
    let mut extra = Vec::new();
    let mut ifd = Vec::with_capacity(ifd_len);
    ifd.extend_from_slice(&(fields.len() as u16).to_le_bytes());
    for (tag, field) in &fields {
        let (ty, n, bytes): (u16, usize, Vec<u8>) = match field {
            Field::Short(v) => (3, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Field::Long(v) => (4, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Field::Double(v) => (12, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Field::Ascii(s) => (2, s.len(), s.as_bytes().to_vec()),
        };
        ifd.extend_from_slice(&tag.to_le_bytes());
        ifd.extend_from_slice(&ty.to_le_bytes());
        ifd.extend_from_slice(&(n as u32).to_le_bytes());
        if bytes.len() <= 4 {
            let mut inline = [0u8; 4];
            inline[..bytes.len()].copy_from_slice(&bytes);
            ifd.extend_from_slice(&inline);
        } else {
            let off = ifd_offset + ifd_len + extra.len();
            ifd.extend_from_slice(&(off as u32).to_le_bytes());
            extra.extend_from_slice(&bytes);
            if extra.len() % 2 == 1 {
                extra.push(0);
            }
        }
    }
    ifd.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&ifd);
    out.extend_from_slice(&extra);
    Ok(out)
}
