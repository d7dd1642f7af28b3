//! Inference paths, mask post-processing and segmentation metrics.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codespace::{Domain, PrebuiltCodes, TaskName};
use crate::data::{apply_shift, EvalImage, ShiftLevel};
use crate::error::{Error, Result};
use crate::networks::{generate, Model};
use crate::tensor::{Real, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Provenance {
    Direct,
    ViaAdaptation,
    #[default]
    External,
}

/// An `H×W` boolean mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
    pub provenance: Provenance,
    pub postprocessed: bool,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width]).expect("sized")
    }

    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(alloc::format!(
                "{} values for a {height}×{width} mask",
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
            provenance: Provenance::External,
            postprocessed: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn check_same_size(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(alloc::format!(
                "mask sizes {}×{} and {}×{} differ",
                self.height,
                self.width,
                other.height,
                other.width
            )));
        }
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }
}

/// 4-connected labelling of the pixels where `data[p] == value`.
/// Returns the label of each pixel (`usize::MAX` elsewhere) and component sizes.
fn label_components(data: &[bool], h: usize, w: usize, value: bool) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if data[start] != value || labels[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if data[q] == value && labels[q] == usize::MAX {
                    labels[q] = id;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps the two largest 4-connected foreground components and fills every
/// background region that does not reach the image border.
///
/// Components of equal area are ranked by their first pixel in raster order.
pub fn postprocess(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let (labels, sizes) = label_components(&mask.data, h, w, true);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Labels are assigned in raster order, so a stable sort breaks ties by first pixel.
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let keep: Vec<usize> = order.into_iter().take(2).collect();
    let mut data: Vec<bool> = labels.iter().map(|l| keep.contains(l)).collect();

    let (bg_labels, bg_sizes) = label_components(&data, h, w, false);
    let mut touches_border = vec![false; bg_sizes.len()];
    for i in 0..h {
        for j in 0..w {
            if i == 0 || j == 0 || i + 1 == h || j + 1 == w {
                let l = bg_labels[i * w + j];
                if l != usize::MAX {
                    touches_border[l] = true;
                }
            }
        }
    }
    for (d, &l) in data.iter_mut().zip(&bg_labels) {
        if l != usize::MAX && !touches_border[l] {
            *d = true;
        }
    }
    BinaryMask {
        height: h,
        width: w,
        data,
        provenance: mask.provenance,
        postprocessed: true,
    }
}

/// `2|P∩G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_size(gt)?;
    let denom = pred.count() + gt.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.overlap(gt) as f64 / denom as f64)
}

/// Fraction of the abnormality region covered by the prediction.
pub fn tpr(pred: &BinaryMask, abnormal: &BinaryMask) -> Result<f64> {
    pred.check_same_size(abnormal)?;
    let a = abnormal.count();
    if a == 0 {
        return Err(Error::UndefinedMetric(
            "true positive ratio of an empty abnormality label".into(),
        ));
    }
    Ok(pred.overlap(abnormal) as f64 / a as f64)
}

/// Mean and quartiles of image values inside a mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quantile by linear interpolation between closest ranks of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn lung_intensity_stats<T: Real>(
    image: &Tensor<T>,
    mask: &BinaryMask,
) -> Result<IntensityStats> {
    let (_, h, w) = image.chw()?;
    if (h, w) != (mask.height, mask.width) || image.len() != h * w {
        return Err(Error::Shape(alloc::format!(
            "image {:?} and mask {}×{}",
            image.shape(),
            mask.height,
            mask.width
        )));
    }
    let mut vals: Vec<f64> = image
        .data()
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.as_f64())
        .collect();
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(
            "intensity statistics over an empty mask".into(),
        ));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.sort_by(f64::total_cmp);
    Ok(IntensityStats {
        mean,
        q1: quantile(&vals, 0.25),
        median: quantile(&vals, 0.5),
        q3: quantile(&vals, 0.75),
    })
}

/// Code used by the single-pass path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CodeChoice {
    #[default]
    SelfCode,
    Seg,
}

impl CodeChoice {
    pub fn task(self) -> TaskName {
        match self {
            CodeChoice::SelfCode => TaskName::SelfSup,
            CodeChoice::Seg => TaskName::Seg,
        }
    }
}

impl FromStr for CodeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(CodeChoice::SelfCode),
            "seg" => Ok(CodeChoice::Seg),
            _ => Err(Error::Config(alloc::format!("unknown code choice {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferencePath {
    Direct(CodeChoice),
    ViaAdaptation,
}

impl Default for InferencePath {
    fn default() -> Self {
        InferencePath::Direct(CodeChoice::SelfCode)
    }
}

/// Foreground where the second logit strictly exceeds the first.
pub fn argmax_mask<T: Real>(logits: &Tensor<T>) -> Result<BinaryMask> {
    let (c, h, w) = logits.chw()?;
    if c != 2 {
        return Err(Error::Shape(alloc::format!(
            "expected 2 logit channels, got {c}"
        )));
    }
    let n = h * w;
    let d = logits.data();
    BinaryMask::new(h, w, (0..n).map(|p| d[n + p] > d[p]).collect())
}

/// Single forward pass with the chosen code; not post-processed.
pub fn segment_direct<T: Real>(
    model: &Model<T>,
    codes: &PrebuiltCodes<T>,
    image: &Tensor<T>,
    choice: CodeChoice,
    eps: f64,
) -> Result<BinaryMask> {
    let logits = generate(model, image, codes.get(choice.task())?, Domain::Mask, eps)?;
    let mut m = argmax_mask(&logits)?;
    m.provenance = Provenance::Direct;
    Ok(m)
}

/// Adaptation to INTRA followed by supervised-code segmentation. Also returns
/// the adapted image.
pub fn segment_via_adaptation<T: Real>(
    model: &Model<T>,
    codes: &PrebuiltCodes<T>,
    image: &Tensor<T>,
    eps: f64,
) -> Result<(BinaryMask, Tensor<T>)> {
    let adapted = generate(model, image, codes.get(TaskName::DaX)?, Domain::Intra, eps)?;
    let logits = generate(
        model,
        &adapted,
        codes.get(TaskName::Seg)?,
        Domain::Mask,
        eps,
    )?;
    let mut m = argmax_mask(&logits)?;
    m.provenance = Provenance::ViaAdaptation;
    Ok((m, adapted))
}

pub fn segment<T: Real>(
    model: &Model<T>,
    codes: &PrebuiltCodes<T>,
    image: &Tensor<T>,
    path: InferencePath,
    eps: f64,
) -> Result<BinaryMask> {
    match path {
        InferencePath::Direct(c) => segment_direct(model, codes, image, c, eps),
        InferencePath::ViaAdaptation => {
            segment_via_adaptation(model, codes, image, eps).map(|r| r.0)
        }
    }
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub domain: Domain,
    pub shift: ShiftLevel,
    pub dice: Option<f64>,
    pub tpr: Option<f64>,
    pub intensity: Option<IntensityStats>,
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Aggregates of one (domain, shift level) group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub domain: Domain,
    pub shift: ShiftLevel,
    pub n: usize,
    pub dice: Option<MeanStd>,
    pub tpr: Option<MeanStd>,
    pub intensity_mean: Option<MeanStd>,
}

/// Mean ± std per (domain, shift) group, in a stable order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(Domain, ShiftLevel), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.domain, r.shift)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((domain, shift), rs)| {
            let pick = |f: &dyn Fn(&MetricsRow) -> Option<f64>| {
                MeanStd::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            GroupSummary {
                domain,
                shift,
                n: rs.len(),
                dice: pick(&|r| r.dice),
                tpr: pick(&|r| r.tpr),
                intensity_mean: pick(&|r| r.intensity.map(|s| s.mean)),
            }
        })
        .collect()
}

/// Options for [`evaluate`].
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub path: InferencePath,
    pub shift: ShiftLevel,
    pub postprocess: bool,
    /// Seed of the shift modulator.
    pub seed: u64,
    pub eps: f64,
}

/// Segments every image (after the requested shift) and scores it.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    codes: &PrebuiltCodes<T>,
    set: &[EvalImage<T>],
    opts: &EvalOptions,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(set.len());
    for (k, item) in set.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64);
        let input = apply_shift(&item.image, opts.shift, &mut rng);
        let mut pred = segment(model, codes, &input, opts.path, opts.eps)?;
        if opts.postprocess {
            pred = postprocess(&pred);
        }
        let tpr_v = match &item.abnormal {
            Some(a) if a.count() > 0 => Some(tpr(&pred, a)?),
            _ => None,
        };
        rows.push(MetricsRow {
            id: item.id.clone(),
            domain: item.domain,
            shift: opts.shift,
            dice: Some(dice(&pred, &item.mask)?),
            tpr: tpr_v,
            intensity: lung_intensity_stats(&item.image, &item.mask).ok(),
        });
    }
    Ok(rows)
}

/// Mean Dice of a set of rows.
pub fn mean_dice(rows: &[MetricsRow]) -> f64 {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
    MeanStd::of(&v).map_or(0.0, |m| m.mean)
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Direct => "direct",
            Provenance::ViaAdaptation => "via_adaptation",
            Provenance::External => "external",
        })
    }
}
