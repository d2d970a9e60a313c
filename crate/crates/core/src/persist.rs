//! Checkpoints, run metadata, and sample artifacts.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "VNMC" | version u32 = 1 | entry count u32
//! per entry: name_len u32 | name (utf-8) | dtype u8 (0 = f64)
//!            | ndim u32 | dims u32 × ndim | payload f64 × ∏dims
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VNMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                self.pos as u64,
                format!("truncated while reading {field}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", 0, "bad magic (expected \"VNMC\")"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", 4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let entry_at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", entry_at + 4, "name is not utf-8"))?
            .to_string();
        let dtype_at = r.pos as u64;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::format("checkpoint", dtype_at, format!("unknown dtype {dtype}")));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.contains(&name) {
            return Err(Error::format(
                "checkpoint",
                entry_at,
                format!("duplicate entry name `{name}`"),
            ));
        }
        store.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(store)
}

/// Run metadata: `key=value` lines sorted by key.
pub type Metadata = BTreeMap<String, String>;

pub const CONFIG_FILE: &str = "config.txt";

pub fn encode_metadata(meta: &Metadata) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        writeln!(s, "{k}={v}").unwrap();
    }
    s
}

pub fn decode_metadata(text: &str) -> Result<Metadata> {
    let mut meta = Metadata::new();
    let mut offset = 0u64;
    for line in text.lines() {
        if !line.is_empty() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config.txt", offset, format!("line `{line}` has no `=`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        offset += line.len() as u64 + 1;
    }
    Ok(meta)
}

/// Writes the checkpoint at `path` and `config.txt` beside it.
pub fn save_checkpoint(store: &ParamStore, meta: &Metadata, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(store))?;
    let cfg = path.with_file_name(CONFIG_FILE);
    write_file(&cfg, encode_metadata(meta).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    let store = decode_checkpoint(&bytes)?;
    let cfg = path.with_file_name(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg).map_err(|e| Error::at_path(&cfg, e))?;
    Ok((store, decode_metadata(&text)?))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::at_path(path, e))
}

/// Images tiled row-major into a `rows × cols` mosaic of `h × w` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    /// Row-major mosaic of `(rows·cell_h) × (cols·cell_w)` values.
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    /// Tiles the rows of `images` (each `h·w` values); unfilled cells stay 0.
    pub fn tile(images: &Tensor, h: usize, w: usize, rows: usize, cols: usize) -> Result<Self> {
        let n = images.rows();
        if n > rows * cols {
            return Err(Error::contract(format!("{n} images do not fit a {rows}x{cols} grid")));
        }
        if n > 0 && images.cols() != h * w {
            return Err(Error::shape("grid", format!("rows of {} values for {h}x{w} cells", images.cols())));
        }
        let width = cols * w;
        let mut pixels = vec![0.0; rows * h * width];
        for i in 0..n {
            let (gr, gc) = (i / cols, i % cols);
            let img = images.row(i);
            for y in 0..h {
                let dst = (gr * h + y) * width + gc * w;
                pixels[dst..dst + w].copy_from_slice(&img[y * w..(y + 1) * w]);
            }
        }
        Ok(ImageGrid {
            rows,
            cols,
            cell_h: h,
            cell_w: w,
            pixels,
        })
    }

    /// Square-ish grid with clamped pixel values, for model outputs.
    pub fn for_samples(images: &Tensor, h: usize, w: usize) -> Result<Self> {
        let n = images.rows().max(1);
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let clamped = images.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::tile(&clamped, h, w, rows, cols)
    }

    pub fn width(&self) -> usize {
        self.cols * self.cell_w
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell_h
    }
}

/// Pixel byte with half-up rounding: `floor(v·255 + 0.5)`.
pub fn pixel_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(grid: &ImageGrid) -> Result<Vec<u8>> {
    if let Some(bad) = grid.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("write_pgm", format!("pixel value {bad} outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.pixels.iter().map(|&v| pixel_byte(v)));
    Ok(out)
}

pub fn write_pgm(grid: &ImageGrid, path: &Path) -> Result<()> {
    write_file(path, &encode_pgm(grid)?)
}

/// Parses a binary `P5` file with maxval 255 into `(width, height, bytes)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", pos as u64, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::format("pgm", 0, "expected P5 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("pgm", 0, format!("bad extent `{s}`")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != w * h {
        return Err(Error::format("pgm", pos as u64, format!("payload of {} bytes for {w}x{h}", payload.len())));
    }
    Ok((w, h, payload.to_vec()))
}

/// CSV of n×2 points, header `x,y` or `x,y,label`. Floats use the shortest
/// representation that round-trips exactly.
pub fn encode_csv_points(points: &Tensor, labels: Option<&[usize]>) -> Result<String> {
    let n = points.rows();
    if !points.is_empty() && points.cols() != 2 {
        return Err(Error::shape("write_csv_points", format!("points of shape {:?}", points.shape())));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::shape("write_csv_points", format!("{} labels for {n} points", l.len())));
        }
    }
    let mut s = String::from(if labels.is_some() { "x,y,label\n" } else { "x,y\n" });
    for i in 0..n {
        let p = points.row(i);
        match labels {
            Some(l) => writeln!(s, "{},{},{}", p[0], p[1], l[i]).unwrap(),
            None => writeln!(s, "{},{}", p[0], p[1]).unwrap(),
        }
    }
    Ok(s)
}

pub fn write_csv_points(points: &Tensor, labels: Option<&[usize]>, path: &Path) -> Result<()> {
    write_file(path, encode_csv_points(points, labels)?.as_bytes())
}

/// Reads back [`encode_csv_points`] output.
pub fn parse_csv_points(text: &str) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let labelled = match header {
        "x,y" => false,
        "x,y,label" => true,
        h => return Err(Error::format("csv", 0, format!("unexpected header `{h}`"))),
    };
    let mut xs = Vec::new();
    let mut ls = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::format("csv", (i + 1) as u64, format!("bad row `{line}`"));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 + labelled as usize {
            return Err(bad());
        }
        xs.push(parts[0].parse::<f64>().map_err(|_| bad())?);
        xs.push(parts[1].parse::<f64>().map_err(|_| bad())?);
        if labelled {
            ls.push(parts[2].parse::<usize>().map_err(|_| bad())?);
        }
    }
    let n = xs.len() / 2;
    Ok((Tensor::matrix(n, 2, xs)?, labelled.then_some(ls)))
}
