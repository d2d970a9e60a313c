//! Shared datasets: three 2-D toy distributions with pinned parametric forms
//! and an IDX image loader with mean-pool downsampling and binarization.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Points (n×d) or flattened images (n×H·W), optionally labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toy {
    Moons,
    EightGaussians,
    Checkerboard,
}

impl Toy {
    pub fn name(self) -> &'static str {
        match self {
            Toy::Moons => "moons",
            Toy::EightGaussians => "eight-gaussians",
            Toy::Checkerboard => "checkerboard",
        }
    }

    pub fn default_sigma(self) -> f64 {
        match self {
            Toy::Moons => 0.05,
            Toy::EightGaussians => 0.1,
            Toy::Checkerboard => 0.0,
        }
    }

    /// Number of label classes the generator emits, if any.
    pub fn classes(self) -> Option<usize> {
        match self {
            Toy::Moons => Some(2),
            Toy::EightGaussians => Some(8),
            Toy::Checkerboard => None,
        }
    }
}

impl fmt::Display for Toy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(Toy::Moons),
            "eight-gaussians" => Ok(Toy::EightGaussians),
            "checkerboard" => Ok(Toy::Checkerboard),
            other => Err(Error::Usage(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub toy: Toy,
    pub sigma: f64,
}

impl ToySpec {
    pub fn new(toy: Toy) -> Self {
        ToySpec {
            toy,
            sigma: toy.default_sigma(),
        }
    }

    pub fn noiseless(toy: Toy) -> Self {
        ToySpec { toy, sigma: 0.0 }
    }
}

/// Upper arc `(cos θ, sin θ)` or lower arc `(1 − cos θ, 0.5 − sin θ)`.
pub fn moon_point(theta: f64, upper: bool) -> [f64; 2] {
    if upper {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 0.5 - theta.sin()]
    }
}

/// Distance from `p` to the nearer of the two noiseless moon arcs.
pub fn distance_to_moons(p: [f64; 2]) -> f64 {
    let arc = |cx: f64, cy: f64, upper: bool| {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        let r = (dx * dx + dy * dy).sqrt();
        // Angle of p around the arc's centre, restricted to the arc's half-plane.
        let on_half = if upper { dy >= 0.0 } else { dy <= 0.0 };
        if on_half {
            (r - 1.0).abs()
        } else {
            let ends = [(cx + 1.0, cy), (cx - 1.0, cy)];
            ends.iter()
                .map(|(ex, ey)| ((p[0] - ex).powi(2) + (p[1] - ey).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        }
    };
    arc(0.0, 0.0, true).min(arc(1.0, 0.5, false))
}

/// Mode `k` of eight-gaussians: `2·(cos kπ/4, sin kπ/4)`.
pub fn eight_center(k: usize) -> [f64; 2] {
    let a = k as f64 * PI / 4.0;
    [2.0 * a.cos(), 2.0 * a.sin()]
}

pub fn eight_centers() -> [[f64; 2]; 8] {
    std::array::from_fn(eight_center)
}

/// Index and distance of the eight-gaussians centre closest to `p`.
pub fn nearest_center(p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in eight_centers().iter().enumerate() {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn checkerboard_accepts(x1: f64, x2: f64) -> bool {
    (x1.floor() as i64 + x2.floor() as i64).rem_euclid(2) == 0
}

pub fn make_toy_batch(spec: &ToySpec, n: usize, rng: &mut Rng) -> Result<Batch> {
    if n == 0 {
        return Err(Error::contract("toy batch size must be >= 1"));
    }
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (p, label) = match spec.toy {
            Toy::Moons => {
                let theta = PI * rng.uniform();
                let upper = i % 2 == 0;
                (moon_point(theta, upper), (!upper) as usize)
            }
            Toy::EightGaussians => {
                let k = rng.below(8);
                (eight_center(k), k)
            }
            Toy::Checkerboard => loop {
                let a = 4.0 * rng.uniform() - 2.0;
                let b = 4.0 * rng.uniform() - 2.0;
                if checkerboard_accepts(a, b) {
                    break ([a, b], 0);
                }
            },
        };
        let (mut px, mut py) = (p[0], p[1]);
        if spec.sigma > 0.0 {
            px += spec.sigma * rng.gaussian();
            py += spec.sigma * rng.gaussian();
        }
        x.push(px);
        x.push(py);
        labels.push(label);
    }
    Ok(Batch {
        x: Tensor::matrix(n, 2, x)?,
        labels: spec.toy.classes().map(|_| labels),
    })
}

/// The four 6-bit patterns `111000, 000111, 101010, 010101`, labelled 0..4.
pub fn bit_patterns() -> Batch {
    let rows = [
        [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        [1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
    ];
    Batch {
        x: Tensor::matrix(4, 6, rows.concat()).expect("4x6"),
        labels: Some(vec![0, 1, 2, 3]),
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

/// Parsed IDX container: big-endian magic and extents, unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxFile {
    pub fn parse(bytes: &[u8]) -> Result<IdxFile> {
        let read_u32 = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::format("idx", off as u64, "truncated header"))
        };
        let magic = read_u32(0)?;
        let (kind, ndim) = match magic {
            IDX_IMAGES_MAGIC => (IdxKind::Images, 3),
            IDX_LABELS_MAGIC => (IdxKind::Labels, 1),
            m => return Err(Error::format("idx", 0, format!("bad magic 0x{m:08x}"))),
        };
        let dims = (0..ndim)
            .map(|i| read_u32(4 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let start = 4 + 4 * ndim;
        let need: usize = dims.iter().product();
        let have = bytes.len() - start;
        if have < need {
            return Err(Error::format(
                "idx",
                bytes.len() as u64,
                format!("truncated payload: header declares {need} bytes, file has {have}"),
            ));
        }
        if have > need {
            return Err(Error::format(
                "idx",
                (start + need) as u64,
                format!("{} trailing bytes after payload", have - need),
            ));
        }
        Ok(IdxFile {
            kind,
            dims,
            payload: bytes[start..].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = match self.kind {
            IdxKind::Images => IDX_IMAGES_MAGIC,
            IdxKind::Labels => IDX_LABELS_MAGIC,
        };
        let mut out = magic.to_be_bytes().to_vec();
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// n×(H·W) pixel intensities scaled to `[0, 1]`.
    pub fn images(&self) -> Result<Tensor> {
        if self.kind != IdxKind::Images {
            return Err(Error::contract("idx file holds labels, not images"));
        }
        let n = self.dims[0];
        let per = self.dims[1] * self.dims[2];
        Tensor::matrix(n, per, self.payload.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        if self.kind != IdxKind::Labels {
            return Err(Error::contract("idx file holds images, not labels"));
        }
        Ok(self.payload.iter().map(|&b| b as usize).collect())
    }
}

pub fn load_idx(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    IdxFile::parse(&bytes)
}

/// Non-overlapping `factor×factor` mean pooling of n×(h·w) images.
pub fn downsample(images: &Tensor, h: usize, w: usize, factor: usize) -> Result<Tensor> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "{h}x{w} images are not divisible by factor {factor}"
        )));
    }
    if images.cols() != h * w {
        return Err(Error::shape("downsample", format!("rows of {} pixels for {h}x{w}", images.cols())));
    }
    let (oh, ow) = (h / factor, w / factor);
    let n = images.rows();
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(n * oh * ow);
    for i in 0..n {
        let img = images.row(i);
        for r in 0..oh {
            for c in 0..ow {
                let mut s = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        s += img[(r * factor + dr) * w + c * factor + dc];
                    }
                }
                out.push(s / area);
            }
        }
    }
    Tensor::matrix(n, oh * ow, out)
}

/// `v > threshold ↦ 1`, else 0.
pub fn binarize(images: &Tensor, threshold: f64) -> Tensor {
    images.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

/// A loaded image dataset with its (post-downsampling) image size.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub batch: Batch,
    pub height: usize,
    pub width: usize,
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSpec {
    pub images: std::path::PathBuf,
    pub labels: Option<std::path::PathBuf>,
    pub downsample: usize,
    pub binarize: bool,
    pub limit: Option<usize>,
}

pub fn load_image_set(spec: &ImageSpec) -> Result<ImageSet> {
    let file = load_idx(&spec.images)?;
    if file.kind != IdxKind::Images {
        return Err(Error::format("idx", 0, "expected an image file (magic 0x00000803)"));
    }
    let (h, w) = (file.dims[1], file.dims[2]);
    let mut x = file.images()?;
    let mut labels = match &spec.labels {
        Some(p) => {
            let l = load_idx(p)?.labels()?;
            if l.len() != x.rows() {
                return Err(Error::contract(format!(
                    "{} labels for {} images",
                    l.len(),
                    x.rows()
                )));
            }
            Some(l)
        }
        None => None,
    };
    if let Some(limit) = spec.limit {
        let keep: Vec<usize> = (0..limit.min(x.rows())).collect();
        x = x.select_rows(&keep);
        labels = labels.map(|l| l[..keep.len()].to_vec());
    }
    let factor = spec.downsample.max(1);
    if factor > 1 {
        x = downsample(&x, h, w, factor)?;
    }
    if spec.binarize {
        x = binarize(&x, 0.5);
    }
    let classes = labels.as_ref().map(|l| l.iter().copied().max().map_or(1, |m| m + 1));
    Ok(ImageSet {
        batch: Batch { x, labels },
        height: h / factor,
        width: w / factor,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_toy_points() {
        assert_eq!(moon_point(0.0, true), [1.0, 0.0]);
        let c = eight_center(2);
        assert!(c[0].abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
        assert_eq!(nearest_center(&c).0, 2);
    }

    #[test]
    fn noiseless_moons_on_arcs() {
        let b = make_toy_batch(&ToySpec::noiseless(Toy::Moons), 500, &mut Rng::seed_from(1)).unwrap();
        for i in 0..500 {
            let p = b.x.row(i);
            assert!(distance_to_moons([p[0], p[1]]) < 1e-12);
        }
    }

    #[test]
    fn noiseless_eight_labels_match_nearest() {
        let b = make_toy_batch(&ToySpec::noiseless(Toy::EightGaussians), 400, &mut Rng::seed_from(2)).unwrap();
        let labels = b.labels.unwrap();
        for i in 0..400 {
            assert_eq!(nearest_center(b.x.row(i)).0, labels[i]);
        }
    }

    #[test]
    fn checkerboard_parity() {
        let b = make_toy_batch(&ToySpec::new(Toy::Checkerboard), 10_000, &mut Rng::seed_from(3)).unwrap();
        assert!(b.labels.is_none());
        for i in 0..b.len() {
            let p = b.x.row(i);
            assert!(checkerboard_accepts(p[0], p[1]));
            assert!(p[0] >= -2.0 && p[0] < 2.0 && p[1] >= -2.0 && p[1] < 2.0);
        }
    }

    #[test]
    fn toy_batches_deterministic() {
        for toy in [Toy::Moons, Toy::EightGaussians, Toy::Checkerboard] {
            let a = make_toy_batch(&ToySpec::new(toy), 64, &mut Rng::seed_from(4)).unwrap();
            let b = make_toy_batch(&ToySpec::new(toy), 64, &mut Rng::seed_from(4)).unwrap();
            assert_eq!(a, b);
        }
        assert!("spirals".parse::<Toy>().is_err());
    }

    fn fixture(n: usize, h: usize, w: usize) -> IdxFile {
        IdxFile {
            kind: IdxKind::Images,
            dims: vec![n, h, w],
            payload: (0..n * h * w).map(|i| (i * 37 % 256) as u8).collect(),
        }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let f = fixture(3, 4, 4);
        let bytes = f.encode();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = IdxFile::parse(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.encode(), bytes);

        let labels = IdxFile { kind: IdxKind::Labels, dims: vec![2], payload: vec![5, 0] };
        let lb = labels.encode();
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        assert_eq!(IdxFile::parse(&lb).unwrap().labels().unwrap(), vec![5, 0]);

        let mut bad = bytes.clone();
        bad[3] = 9;
        assert!(matches!(IdxFile::parse(&bad), Err(Error::Format { offset: 0, .. })));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(IdxFile::parse(short), Err(Error::Format { .. })));
        assert!(matches!(IdxFile::parse(&bytes[..6]), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn idx_large_header_size() {
        // 60000×28×28 header with a matching payload.
        let f = IdxFile { kind: IdxKind::Images, dims: vec![60000, 28, 28], payload: vec![0; 47_040_000] };
        let t = IdxFile::parse(&f.encode()).unwrap().images().unwrap();
        assert_eq!(t.len(), 47_040_000);
    }

    #[test]
    fn downsample_means() {
        let c = Tensor::full(&[2, 16], 0.3);
        let d = downsample(&c, 4, 4, 2).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let block = Tensor::matrix(1, 4, vec![0., 0., 1., 1.]).unwrap();
        assert_eq!(downsample(&block, 2, 2, 2).unwrap().item(), 0.5);
        let x = fixture(2, 4, 6).images().unwrap();
        let d = downsample(&x, 4, 6, 2).unwrap();
        assert!((d.sum_all() / d.len() as f64 - x.sum_all() / x.len() as f64).abs() < 1e-12);
        assert!(downsample(&x, 4, 6, 4).is_err());
    }

    #[test]
    fn binarize_strict() {
        let t = Tensor::from_vec(vec![0.5, 0.500001, 0.0, 1.0]);
        let b = binarize(&t, 0.5);
        assert_eq!(b.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(binarize(&b, 0.5), b);
    }

    #[test]
    fn image_set_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, fixture(5, 4, 4).encode()).unwrap();
        let labels = IdxFile { kind: IdxKind::Labels, dims: vec![5], payload: vec![0, 1, 2, 1, 0] };
        std::fs::write(&lab, labels.encode()).unwrap();
        let set = load_image_set(&ImageSpec {
            images: img,
            labels: Some(lab),
            downsample: 2,
            binarize: true,
            limit: Some(3),
        })
        .unwrap();
        assert_eq!((set.height, set.width, set.classes), (2, 2, Some(3)));
        assert_eq!(set.batch.x.shape(), &[3, 4]);
        assert!(set.batch.x.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
