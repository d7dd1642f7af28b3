//! Preprocessing, the synthetic two-domain dataset and the intensity/contrast
//! shift modulator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codespace::Domain;
use crate::error::{Error, Result};
use crate::pipeline::BinaryMask;
use crate::tensor::{Real, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// A raw single-channel raster of a declared bit depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub depth: u32,
    pub pixels: Vec<u16>,
}

pub const SUPPORTED_DEPTHS: [u32; 4] = [8, 10, 12, 16];

/// Maps `[0, 2^depth − 1]` linearly onto `[-1, 1]` and resizes bilinearly to
/// `size × size`.
pub fn preprocess<T: Real>(raw: &RawImage, size: usize) -> Result<Tensor<T>> {
    if !SUPPORTED_DEPTHS.contains(&raw.depth) {
        return Err(Error::Config(alloc::format!(
            "unsupported bit depth {}",
            raw.depth
        )));
    }
    if raw.height == 0 || raw.width == 0 || raw.pixels.len() != raw.height * raw.width {
        return Err(Error::Data(alloc::format!(
            "raster {}×{} with {} pixels",
            raw.height,
            raw.width,
            raw.pixels.len()
        )));
    }
    let max = ((1u64 << raw.depth) - 1) as f64;
    let mapped: Vec<f64> = raw
        .pixels
        .iter()
        .map(|&p| 2.0 * p as f64 / max - 1.0)
        .collect();
    let resized = resize_bilinear(&mapped, raw.height, raw.width, size, size);
    Tensor::new(
        &[1, size, size],
        resized.into_iter().map(T::of_f64).collect(),
    )
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Nearest-neighbour resampling for binary masks.
pub fn resize_nearest(mask: &BinaryMask, oh: usize, ow: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::empty(oh, ow);
    for i in 0..oh {
        let si = (((i as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for j in 0..ow {
            let sj = (((j as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.set(i, j, mask.get(si, sj));
        }
    }
    out
}

/// Binary mask as the 2-channel one-hot target `[background, foreground]`.
pub fn one_hot<T: Real>(mask: &BinaryMask) -> Tensor<T> {
    let n = mask.len();
    let mut d = vec![T::zero(); 2 * n];
    for (p, &fg) in mask.data().iter().enumerate() {
        d[if fg { n + p } else { p }] = T::one();
    }
    Tensor::new(&[2, mask.height(), mask.width()], d).expect("2×H×W")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShiftLevel {
    None,
    Weak,
    Harsh,
}

impl ShiftLevel {
    pub const ALL: [ShiftLevel; 3] = [ShiftLevel::None, ShiftLevel::Weak, ShiftLevel::Harsh];

    /// Half-width of the uniform range of both scaling factors.
    pub fn scale_range(self) -> f64 {
        match self {
            ShiftLevel::None => 0.0,
            ShiftLevel::Weak => 0.30,
            ShiftLevel::Harsh => 0.60,
        }
    }

    /// Standard deviation of the additive noise, in normalised units.
    pub fn noise_std(self) -> f64 {
        match self {
            ShiftLevel::None => 0.0,
            ShiftLevel::Weak => 0.5,
            ShiftLevel::Harsh => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftLevel::None => "none",
            ShiftLevel::Weak => "weak",
            ShiftLevel::Harsh => "harsh",
        }
    }
}

impl fmt::Display for ShiftLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ShiftLevel::None),
            "weak" => Ok(ShiftLevel::Weak),
            "harsh" => Ok(ShiftLevel::Harsh),
            other => Err(Error::Config(alloc::format!(
                "unknown shift level {other:?}"
            ))),
        }
    }
}

/// Everything drawn by one modulation, for inspection.
#[derive(Clone, Debug)]
pub struct ShiftOutcome<T> {
    pub output: Tensor<T>,
    /// `β(x − x̄) + αx̄ + n` before clamping.
    pub unclamped: Vec<f64>,
    /// Intensity factor.
    pub alpha: f64,
    /// Contrast factor.
    pub beta: f64,
    pub mean: f64,
}

/// `clamp(β(x − x̄) + αx̄ + n, −1, 1)` with `α, β ~ U[1−r, 1+r]` and
/// `n ~ N(0, s²)`. `r = s = 0` is the identity.
pub fn apply_shift_with<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    r: f64,
    s: f64,
    rng: &mut R,
) -> ShiftOutcome<T> {
    let n = image.len();
    let mean = image.data().iter().map(|v| v.as_f64()).sum::<f64>() / n.max(1) as f64;
    if r == 0.0 && s == 0.0 {
        let unclamped = image.data().iter().map(|v| v.as_f64()).collect();
        return ShiftOutcome {
            output: image.clone(),
            unclamped,
            alpha: 1.0,
            beta: 1.0,
            mean,
        };
    }
    let alpha = rng.random_range(1.0 - r..=1.0 + r);
    let beta = rng.random_range(1.0 - r..=1.0 + r);
    let mut unclamped = Vec::with_capacity(n);
    for v in image.data() {
        let noise: f64 = if s > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        } else {
            0.0
        };
        unclamped.push(beta * (v.as_f64() - mean) + alpha * mean + noise);
    }
    let data = unclamped
        .iter()
        .map(|&u| T::of_f64(u.clamp(-1.0, 1.0)))
        .collect();
    let output = Tensor::new(image.shape(), data).expect("same shape");
    ShiftOutcome {
        output,
        unclamped,
        alpha,
        beta,
        mean,
    }
}

pub fn apply_shift<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    level: ShiftLevel,
    rng: &mut R,
) -> Tensor<T> {
    apply_shift_with(image, level.scale_range(), level.noise_std(), rng).output
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(alloc::format!("unknown split {s:?}")))
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: Option<String>,
    pub domain: Domain,
    pub split: Split,
    /// Optional annotation of the abnormal region, for TPR.
    pub abnormal: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Declared bit depth of the image rasters; `None` means "as stored".
    pub depth: Option<u32>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.domain == Domain::Mask {
                return Err(Error::InvalidDomain(alloc::format!(
                    "record {} is tagged MASK",
                    r.image
                )));
            }
        }
        if let Some(d) = self.depth {
            if !SUPPORTED_DEPTHS.contains(&d) {
                return Err(Error::Config(alloc::format!("unsupported bit depth {d}")));
            }
        }
        Ok(())
    }
}

/// Visiting order for an epoch: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Parameters of the synthetic two-domain dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Horizontal semi-axis range, as a fraction of the canvas width.
    pub semi_x: (f64, f64),
    /// Vertical semi-axis range, as a fraction of the canvas height.
    pub semi_y: (f64, f64),
    /// Range of horizontal distance of each ellipse centre from the midline.
    pub center_dx: (f64, f64),
    /// Range of vertical centre position.
    pub center_y: (f64, f64),
    pub background: f64,
    pub interior: f64,
    pub texture_intra: f64,
    pub texture_inter: f64,
    pub inter_offset: f64,
    /// Number of occlusion blobs per ellipse.
    pub blobs: (usize, usize),
    pub blob_intensity: f64,
    /// Fraction of each ellipse an occlusion must cover.
    pub blob_coverage: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            n_train: 40,
            n_val: 10,
            n_test: 20,
            semi_x: (0.11, 0.16),
            semi_y: (0.24, 0.32),
            center_dx: (0.19, 0.23),
            center_y: (0.46, 0.54),
            background: 0.35,
            interior: -0.55,
            texture_intra: 0.05,
            texture_inter: 0.10,
            inter_offset: 0.10,
            blobs: (1, 2),
            blob_intensity: 0.85,
            blob_coverage: (0.10, 0.50),
            seed: 0,
        }
    }
}

const RETRY_CAP: usize = 200;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(a, b): (f64, f64)| a > 0.0 && a <= b && b.is_finite();
        if self.size < 8 {
            return Err(Error::Config(
                "synthetic canvas must be at least 8 pixels".into(),
            ));
        }
        for (name, r) in [
            ("semi_x", self.semi_x),
            ("semi_y", self.semi_y),
            ("center_dx", self.center_dx),
            ("center_y", self.center_y),
            ("blob_coverage", self.blob_coverage),
        ] {
            if !ok_range(r) {
                return Err(Error::Config(alloc::format!(
                    "invalid range {name} = {r:?}"
                )));
            }
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 || self.blob_coverage.1 > 1.0 {
            return Err(Error::Config("invalid blob settings".into()));
        }
        Ok(())
    }

    /// Bounds on the mask foreground fraction implied by the semi-axis ranges,
    /// widened by one pixel of rasterisation slack along each axis.
    pub fn foreground_bounds(&self) -> (f64, f64) {
        let s = self.size as f64;
        let area = |ax: f64, ay: f64| 2.0 * core::f64::consts::PI * ax * ay;
        let lo = area(
            (self.semi_x.0 * s - 1.0).max(0.0) / s,
            (self.semi_y.0 * s - 1.0).max(0.0) / s,
        );
        let hi = area((self.semi_x.1 * s + 1.0) / s, (self.semi_y.1 * s + 1.0) / s);
        (lo, hi)
    }
}

/// One synthetic image with all of its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub id: String,
    pub domain: Domain,
    pub split: Split,
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    /// Occluded part of the mask (INTER only).
    pub abnormal: Option<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub records: Vec<SynthRecord>,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn radius(&self, x: f64, y: f64) -> f64 {
        (((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
}

fn smoothstep_inside(r: f64, softness: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / softness).exp())
}

fn draw_geometry(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<[Ellipse; 2]> {
    let s = spec.size as f64;
    let uni =
        |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..=b) };
    for _ in 0..RETRY_CAP {
        let cy = uni(rng, spec.center_y) * s;
        let mut es = [Ellipse {
            cx: 0.0,
            cy: 0.0,
            ax: 0.0,
            ay: 0.0,
        }; 2];
        for (k, e) in es.iter_mut().enumerate() {
            let side = if k == 0 { -1.0 } else { 1.0 };
            e.cx = s / 2.0 + side * uni(rng, spec.center_dx) * s;
            e.cy = cy + rng.random_range(-0.02..=0.02) * s;
            e.ax = uni(rng, spec.semi_x) * s;
            e.ay = uni(rng, spec.semi_y) * s;
        }
        let inside = es.iter().all(|e| {
            e.cx - e.ax >= 1.0
                && e.cx + e.ax <= s - 1.0
                && e.cy - e.ay >= 1.0
                && e.cy + e.ay <= s - 1.0
        });
        let apart = es[0].cx + es[0].ax + 1.0 < es[1].cx - es[1].ax;
        if inside && apart {
            return Ok(es);
        }
    }
    Err(Error::Data(alloc::format!(
        "no valid ellipse geometry after {RETRY_CAP} attempts"
    )))
}

/// Blobs hugging the outer rim of `e`, covering a fraction of it within range.
fn draw_blobs(
    spec: &SynthSpec,
    e: &Ellipse,
    outer_side: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Blob>> {
    let size = spec.size;
    let n_inside = (0..size * size)
        .filter(|p| e.radius((p % size) as f64 + 0.5, (p / size) as f64 + 0.5) < 1.0)
        .count();
    for _ in 0..RETRY_CAP {
        let count = rng.random_range(spec.blobs.0..=spec.blobs.1);
        let blobs: Vec<Blob> = (0..count)
            .map(|_| {
                // Angle measured from the outward horizontal, kept on the lateral half.
                let t: f64 = rng.random_range(-1.2..1.2);
                let rr: f64 = rng.random_range(0.75..1.0);
                let cx = e.cx + outer_side * rr * e.ax * t.cos();
                let cy = e.cy + rr * e.ay * t.sin();
                let r = rng.random_range(0.45..0.95) * e.ax;
                Blob { cx, cy, r }
            })
            .collect();
        let covered = (0..size * size)
            .filter(|p| {
                let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
                e.radius(x, y) < 1.0 && blobs.iter().any(|b| (x - b.cx).hypot(y - b.cy) < b.r)
            })
            .count();
        let frac = covered as f64 / n_inside.max(1) as f64;
        if frac >= spec.blob_coverage.0 && frac <= spec.blob_coverage.1 {
            return Ok(blobs);
        }
    }
    Err(Error::Data(alloc::format!(
        "no occlusion within coverage {:?} after {RETRY_CAP} attempts",
        spec.blob_coverage
    )))
}

fn render(
    spec: &SynthSpec,
    domain: Domain,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, BinaryMask, Option<BinaryMask>)> {
    let size = spec.size;
    let s = size as f64;
    let es = draw_geometry(spec, rng)?;
    let blobs = if domain == Domain::Inter {
        let left = draw_blobs(spec, &es[0], -1.0, rng)?;
        let right = draw_blobs(spec, &es[1], 1.0, rng)?;
        Some([left, right])
    } else {
        None
    };
    let (texture, offset) = match domain {
        Domain::Inter => (spec.texture_inter, spec.inter_offset),
        _ => (spec.texture_intra, 0.0),
    };
    // Mild vertical shading of the field.
    let shade: f64 = rng.random_range(-0.1..0.1);
    let mut img = Vec::with_capacity(size * size);
    let mut mask = BinaryMask::empty(size, size);
    let mut abnormal = BinaryMask::empty(size, size);
    let softness = 1.5 / (spec.semi_x.0 * s);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut v = spec.background + shade * (y / s - 0.5);
            for (k, e) in es.iter().enumerate() {
                let r = e.radius(x, y);
                let w = smoothstep_inside(r, softness);
                let mut inner = spec.interior;
                if let Some(bs) = &blobs {
                    let cover = bs[k]
                        .iter()
                        .map(|b| smoothstep_inside((x - b.cx).hypot(y - b.cy) / b.r, 0.15))
                        .fold(0.0f64, f64::max);
                    inner += (spec.blob_intensity - inner) * cover;
                    if r < 1.0 && bs[k].iter().any(|b| (x - b.cx).hypot(y - b.cy) < b.r) {
                        abnormal.set(i, j, true);
                    }
                }
                v += (inner - v) * w;
                if r < 1.0 {
                    mask.set(i, j, true);
                }
            }
            let noise: f64 = StandardNormal.sample(rng);
            img.push(((v + offset + texture * noise).clamp(-1.0, 1.0)) as f32);
        }
    }
    let image = Tensor::new(&[1, size, size], img)?;
    Ok((image, mask, blobs.map(|_| abnormal)))
}

/// Generates the dataset; every record draws from its own seeded stream.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut records = Vec::new();
    for (di, domain) in [Domain::Intra, Domain::Inter].into_iter().enumerate() {
        for (si, split) in Split::ALL.into_iter().enumerate() {
            let n = match split {
                Split::Train => spec.n_train,
                Split::Val => spec.n_val,
                Split::Test => spec.n_test,
            };
            for k in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(((di as u64) << 40) | ((si as u64) << 32) | k as u64);
                let (image, mask, abnormal) = render(spec, domain, &mut rng)?;
                let id =
                    alloc::format!("{}_{}_{:04}", domain.name().to_ascii_lowercase(), split, k);
                records.push(SynthRecord {
                    id,
                    domain,
                    split,
                    image,
                    mask,
                    abnormal,
                });
            }
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        records,
    })
}

/// Labelled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    pub image: Tensor<T>,
    /// 2-channel one-hot mask.
    pub target: Tensor<T>,
}

/// Unlabelled training example; carries no mask by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImage<T> {
    pub image: Tensor<T>,
}

/// Held-out example with full ground truth for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage<T> {
    pub id: String,
    pub domain: Domain,
    pub image: Tensor<T>,
    pub mask: BinaryMask,
    pub abnormal: Option<BinaryMask>,
}

/// What the training loop may see.
#[derive(Clone, Debug, Default)]
pub struct TrainingData<T> {
    pub intra: Vec<LabeledImage<T>>,
    pub inter: Vec<UnlabeledImage<T>>,
    /// Validation images used for early stopping.
    pub val: Vec<EvalImage<T>>,
}

impl<T: Real> TrainingData<T> {
    pub fn validate(&self) -> Result<()> {
        if self.intra.is_empty() {
            return Err(Error::Config("no labelled INTRA training images".into()));
        }
        if self.inter.is_empty() {
            return Err(Error::Config("no INTER training images".into()));
        }
        Ok(())
    }
}

impl SynthDataset {
    fn eval_view<T: Real>(r: &SynthRecord) -> EvalImage<T> {
        EvalImage {
            id: r.id.clone(),
            domain: r.domain,
            image: r.image.cast(),
            mask: r.mask.clone(),
            abnormal: r.abnormal.clone(),
        }
    }

    /// Training-facing view: INTRA with masks, INTER without, plus the INTER
    /// validation split for model selection.
    pub fn training_data<T: Real>(&self) -> TrainingData<T> {
        let mut data = TrainingData {
            intra: Vec::new(),
            inter: Vec::new(),
            val: Vec::new(),
        };
        for r in &self.records {
            match (r.domain, r.split) {
                (Domain::Intra, Split::Train) => data.intra.push(LabeledImage {
                    image: r.image.cast(),
                    target: one_hot(&r.mask),
                }),
                (Domain::Inter, Split::Train) => data.inter.push(UnlabeledImage {
                    image: r.image.cast(),
                }),
                (Domain::Inter, Split::Val) => data.val.push(Self::eval_view(r)),
                _ => {}
            }
        }
        data
    }

    pub fn eval_set<T: Real>(&self, domain: Domain, split: Split) -> Vec<EvalImage<T>> {
        self.records
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
            .map(Self::eval_view)
            .collect()
    }
}

/// Mean of `image` over the pixels of `mask`.
pub fn masked_mean<T: Real>(image: &Tensor<T>, mask: &BinaryMask) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (v, &m) in image.data().iter().zip(mask.data()) {
        if m {
            s += v.as_f64();
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}
