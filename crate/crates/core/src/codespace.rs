//! Domains, the task-code table and resolution of task codes into concrete
//! per-layer AdaIN scale/shift vectors.
//!
//! Every task the generator performs is selected purely by the pair of codes
//! fed to its encoder and decoder AdaIN layers:
//!
//! | task        | source | target | encoder   | decoder   |
//! |-------------|--------|--------|-----------|-----------|
//! | `seg`       | INTRA  | MASK   | fixed01   | fixed01   |
//! | `seg_dummy` | INTRA  | MASK   | fixed01   | learnable |
//! | `da_x`      | INTER  | INTRA  | fixed01   | learnable |
//! | `da_y`      | INTRA  | INTER  | fixed01   | learnable |
//! | `self`      | INTER  | MASK   | learnable | fixed01   |
//!
//! A fixed01 side feeds `f = 1, g = 0` to every layer, which reduces AdaIN to
//! plain instance normalisation. A learnable side is produced by the head of
//! the task's target domain of the matching code generator (or by the style
//! encoder from a reference), then expanded per layer by that code
//! generator's affine projections.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::{CodeVars, Model, ModelBinding};
use crate::tensor::{Real, Tensor};

/// Number of domains, and therefore of heads in every multi-head module.
pub const NUM_DOMAINS: usize = 3;
/// Width of a style code per domain head.
pub const STYLE_DIM: usize = 16;
/// Width of the latent fed to the code generators.
pub const LATENT_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    /// Labelled images.
    Intra,
    /// Unlabelled, domain-shifted images.
    Inter,
    /// Segmentation masks.
    Mask,
}

impl Domain {
    pub const ALL: [Domain; NUM_DOMAINS] = [Domain::Intra, Domain::Inter, Domain::Mask];

    pub fn index(self) -> usize {
        match self {
            Domain::Intra => 0,
            Domain::Inter => 1,
            Domain::Mask => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Intra => "INTRA",
            Domain::Inter => "INTER",
            Domain::Mask => "MASK",
        }
    }

    pub fn is_image(self) -> bool {
        self != Domain::Mask
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "INTRA" => Ok(Domain::Intra),
            "INTER" => Ok(Domain::Inter),
            "MASK" => Ok(Domain::Mask),
            other => Err(Error::InvalidDomain(other.into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskName {
    Seg,
    SegDummy,
    DaX,
    DaY,
    SelfSup,
}

impl TaskName {
    pub const ALL: [TaskName; 5] = [
        TaskName::Seg,
        TaskName::SegDummy,
        TaskName::DaX,
        TaskName::DaY,
        TaskName::SelfSup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Seg => "seg",
            TaskName::SegDummy => "seg_dummy",
            TaskName::DaX => "da_x",
            TaskName::DaY => "da_y",
            TaskName::SelfSup => "self",
        }
    }

    pub fn code(self) -> TaskCode {
        build_code_table()[self as usize]
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::Config(alloc::format!("unknown task code {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodeMode {
    Fixed01,
    Learnable,
}

/// One row of the task-code table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaskCode {
    pub name: TaskName,
    pub source: Domain,
    pub target: Domain,
    pub encoder_mode: CodeMode,
    pub decoder_mode: CodeMode,
}

/// The five task codes, in a stable order.
pub const fn build_code_table() -> [TaskCode; 5] {
    use CodeMode::*;
    use Domain::*;
    [
        TaskCode {
            name: TaskName::Seg,
            source: Intra,
            target: Mask,
            encoder_mode: Fixed01,
            decoder_mode: Fixed01,
        },
        TaskCode {
            name: TaskName::SegDummy,
            source: Intra,
            target: Mask,
            encoder_mode: Fixed01,
            decoder_mode: Learnable,
        },
        TaskCode {
            name: TaskName::DaX,
            source: Inter,
            target: Intra,
            encoder_mode: Fixed01,
            decoder_mode: Learnable,
        },
        TaskCode {
            name: TaskName::DaY,
            source: Intra,
            target: Inter,
            encoder_mode: Fixed01,
            decoder_mode: Learnable,
        },
        TaskCode {
            name: TaskName::SelfSup,
            source: Inter,
            target: Mask,
            encoder_mode: Learnable,
            decoder_mode: Fixed01,
        },
    ]
}

/// Image-to-image adaptation code for a target image domain.
pub fn da_task(target: Domain) -> Result<TaskName> {
    match target {
        Domain::Intra => Ok(TaskName::DaX),
        Domain::Inter => Ok(TaskName::DaY),
        Domain::Mask => Err(Error::InvalidDomain(
            "MASK is not an adaptation target".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode<T> {
    pub values: Tensor<T>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T> {
    pub values: Tensor<T>,
}

impl<T: Real> Latent<T> {
    pub fn new(values: [f64; LATENT_DIM]) -> Self {
        Latent {
            values: Tensor::new(
                &[LATENT_DIM],
                values.iter().map(|&v| T::of_f64(v)).collect(),
            )
            .expect("4 values"),
        }
    }

    pub fn zeros() -> Self {
        Latent {
            values: Tensor::zeros(&[LATENT_DIM]),
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut v = [0.0; LATENT_DIM];
        for x in &mut v {
            *x = StandardNormal.sample(rng);
        }
        Self::new(v)
    }
}

/// Concrete `(scale, shift)` vectors for every AdaIN layer of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaINCodePair<T> {
    pub encoder_layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub decoder_layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdaINCodePair<T> {
    pub fn fixed01(encoder_widths: &[usize], decoder_widths: &[usize]) -> Self {
        AdaINCodePair {
            encoder_layers: fixed_side(encoder_widths),
            decoder_layers: fixed_side(decoder_widths),
        }
    }

    /// Inserts the vectors as constants.
    pub fn to_vars(&self, g: &mut Graph<T>) -> CodeVars {
        let side = |g: &mut Graph<T>, layers: &[(Tensor<T>, Tensor<T>)]| {
            layers
                .iter()
                .map(|(f, s)| (g.input(f.clone()), g.input(s.clone())))
                .collect()
        };
        CodeVars {
            encoder: side(g, &self.encoder_layers),
            decoder: side(g, &self.decoder_layers),
        }
    }

    pub fn cast<U: Real>(&self) -> AdaINCodePair<U> {
        let side =
            |l: &[(Tensor<T>, Tensor<T>)]| l.iter().map(|(f, g)| (f.cast(), g.cast())).collect();
        AdaINCodePair {
            encoder_layers: side(&self.encoder_layers),
            decoder_layers: side(&self.decoder_layers),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.encoder_layers
            .iter()
            .chain(&self.decoder_layers)
            .all(|(f, g)| f.all_finite() && g.all_finite())
    }
}

fn fixed_side<T: Real>(widths: &[usize]) -> Vec<(Tensor<T>, Tensor<T>)> {
    widths
        .iter()
        .map(|&c| (Tensor::ones(&[c]), Tensor::zeros(&[c])))
        .collect()
}

/// Per-loss-term switches; a disabled term contributes neither value nor gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ablation {
    pub seg: bool,
    pub style_seg: bool,
    pub adv: bool,
    pub cycle: bool,
    pub style_da: bool,
    pub div: bool,
    pub self_inter: bool,
    pub self_intra: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            seg: true,
            style_seg: true,
            adv: true,
            cycle: true,
            style_da: true,
            div: true,
            self_inter: true,
            self_intra: true,
        }
    }
}

/// Loss weights, optimiser settings and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub lambda_cycle: f64,
    pub lambda_style: f64,
    pub lambda_div: f64,
    pub lambda_seg: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iters_joint: usize,
    pub iters_self: usize,
    pub eps_adain: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Use the literal minimax adversarial objective instead of the
    /// non-saturating generator loss.
    pub paper_literal_adv: bool,
    /// Linearly decay `lambda_div` to zero over the joint phase.
    pub div_decay: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fractions of each phase at which the learning rate drops tenfold.
    pub lr_milestones: [f64; 2],
    /// Re-snapshot the teacher every this many self-phase steps (0 = never).
    pub teacher_refresh: usize,
    /// Global-norm gradient clip (0 = off).
    pub grad_clip: f64,
    /// Keep sampling seg/da tasks during the self phase.
    pub mix_supervised: bool,
    /// Sample only the seg task; gives the supervised-only reference model.
    pub supervised_only: bool,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub prebuild_samples: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda_cycle: 2.0,
            lambda_style: 1.0,
            lambda_div: 1.0,
            lambda_seg: 5.0,
            lambda_inter: 10.0,
            lambda_intra: 1.0,
            learning_rate: 1e-4,
            batch_size: 1,
            iters_joint: 20_000,
            iters_self: 5_000,
            eps_adain: 1e-5,
            seed: 0,
            ablation: Ablation::default(),
            paper_literal_adv: false,
            div_decay: true,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            lr_milestones: [0.6, 0.9],
            teacher_refresh: 0,
            grad_clip: 0.0,
            mix_supervised: false,
            supervised_only: false,
            eval_interval: 500,
            checkpoint_interval: 1000,
            prebuild_samples: 1000,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_style", self.lambda_style),
            ("lambda_div", self.lambda_div),
            ("lambda_seg", self.lambda_seg),
            ("lambda_inter", self.lambda_inter),
            ("lambda_intra", self.lambda_intra),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(alloc::format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.eps_adain > 0.0) {
            return Err(Error::Config("eps_adain must be > 0".into()));
        }
        let [a, b] = self.lr_milestones;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
            return Err(Error::Config(
                "lr_milestones must satisfy 0 <= a <= b <= 1".into(),
            ));
        }
        if self.supervised_only && self.iters_self > 0 {
            return Err(Error::Config(
                "supervised_only runs have no self phase; set iters_self = 0".into(),
            ));
        }
        if self.prebuild_samples == 0 {
            return Err(Error::Config("prebuild_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where the learnable side of a task code comes from.
#[derive(Clone, Debug)]
pub enum CodeSource<T> {
    None,
    Latent(Latent<T>),
    Reference(StyleCode<T>),
}

/// Graph-level variant of [`CodeSource`]: a 16-dim code node, or a latent to map.
#[derive(Clone, Copy, Debug)]
pub enum CodeInput {
    None,
    Latent(Var),
    Style(Var),
}

/// Builds the AdaIN code for `task` inside `g`.
///
/// Learnable sides are produced by the target-domain head of the matching
/// code generator (or taken from `input` when it is already a style code) and
/// expanded by that code generator's per-layer projections. The returned style
/// code is the 16-dim vector before expansion, when a side is learnable.
pub fn resolve_code_vars<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &ModelBinding,
    task: TaskCode,
    input: CodeInput,
) -> Result<(CodeVars, Option<Var>)> {
    let enc_widths = model.generator.encoder_widths();
    let dec_widths = model.generator.decoder_widths();
    let learnable_encoder = task.encoder_mode == CodeMode::Learnable;
    let learnable_decoder = task.decoder_mode == CodeMode::Learnable;
    if learnable_encoder && learnable_decoder {
        return Err(Error::Config(alloc::format!(
            "task {} has two learnable sides",
            task.name
        )));
    }
    let fixed = |g: &mut Graph<T>, widths: &[usize]| -> Vec<(Var, Var)> {
        widths
            .iter()
            .map(|&c| (g.input(Tensor::ones(&[c])), g.input(Tensor::zeros(&[c]))))
            .collect()
    };
    if !learnable_encoder && !learnable_decoder {
        let codes = CodeVars {
            encoder: fixed(g, &enc_widths),
            decoder: fixed(g, &dec_widths),
        };
        return Ok((codes, None));
    }
    let (generator, gen_bound) = if learnable_encoder {
        (&model.f_enc, &bound.f_enc)
    } else {
        (&model.f_dec, &bound.f_dec)
    };
    let style = match input {
        CodeInput::None => {
            return Err(Error::Precondition(alloc::format!(
                "task {} has a learnable side but neither a latent nor a reference code was given",
                task.name
            )))
        }
        CodeInput::Latent(z) => generator.forward(g, gen_bound, z, task.target)?,
        CodeInput::Style(s) => s,
    };
    let expanded = generator.expand(g, gen_bound, style)?;
    let codes = if learnable_encoder {
        CodeVars {
            encoder: expanded,
            decoder: fixed(g, &dec_widths),
        }
    } else {
        CodeVars {
            encoder: fixed(g, &enc_widths),
            decoder: expanded,
        }
    };
    Ok((codes, Some(style)))
}

/// Resolves `task` into concrete per-layer vectors with frozen parameters.
pub fn resolve_code<T: Real>(
    model: &Model<T>,
    task: TaskCode,
    source: &CodeSource<T>,
) -> Result<AdaINCodePair<T>> {
    let any_learnable =
        task.encoder_mode == CodeMode::Learnable || task.decoder_mode == CodeMode::Learnable;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, crate::networks::Trainable::none());
    let input = match source {
        CodeSource::None => CodeInput::None,
        CodeSource::Latent(z) => CodeInput::Latent(g.input(z.values.clone())),
        CodeSource::Reference(code) => {
            if any_learnable && code.domain != task.target {
                return Err(Error::DomainMismatch {
                    expected: task.target.name(),
                    got: code.domain.name(),
                });
            }
            if code.values.len() != STYLE_DIM {
                return Err(Error::Shape(alloc::format!(
                    "style code has {} values",
                    code.values.len()
                )));
            }
            CodeInput::Style(g.input(code.values.clone()))
        }
    };
    let input = if any_learnable {
        input
    } else {
        CodeInput::None
    };
    let (codes, _) = resolve_code_vars(&mut g, model, &bound, task, input)?;
    Ok(codes.materialize(&g))
}

/// Frozen inference codes, one entry per task used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PrebuiltCodes<T> {
    entries: BTreeMap<TaskName, AdaINCodePair<T>>,
}

impl<T: Real> PrebuiltCodes<T> {
    pub fn get(&self, task: TaskName) -> Result<&AdaINCodePair<T>> {
        self.entries
            .get(&task)
            .ok_or_else(|| Error::Config(alloc::format!("no prebuilt code for task {task}")))
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskName> + '_ {
        self.entries.keys().copied()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (TaskName, AdaINCodePair<T>)>) -> Self {
        PrebuiltCodes {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskName, &AdaINCodePair<T>)> {
        self.entries.iter()
    }
}

/// Mean 16-dim code of `head` over `n` standard-normal latents drawn from `rng`.
pub fn mean_style_code<T: Real>(
    model: &Model<T>,
    for_encoder: bool,
    head: Domain,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let generator = if for_encoder {
        &model.f_enc
    } else {
        &model.f_dec
    };
    let mut acc = alloc::vec![0.0f64; STYLE_DIM];
    for _ in 0..n {
        let z = Latent::<T>::sample(rng);
        let mut g = Graph::new();
        let bound = generator.params.bind(&mut g, false);
        let zv = g.input(z.values);
        let s = generator.forward(&mut g, &bound, zv, head)?;
        for (a, v) in acc.iter_mut().zip(g.value(s).data()) {
            *a += v.as_f64();
        }
    }
    let mean = acc.into_iter().map(|a| T::of_f64(a / n as f64)).collect();
    Tensor::new(&[STYLE_DIM], mean)
}

/// Builds the inference codes for `seg`, `da_x`, `da_y` and `self`.
///
/// Each learnable side is the expansion of the mean code over `n_samples`
/// latents; every task draws from its own stream of the seeded generator so
/// the result does not depend on iteration order.
pub fn prebuild_inference_codes<T: Real>(
    model: &Model<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PrebuiltCodes<T>> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    if !model.all_finite() {
        return Err(Error::InvalidCheckpoint(
            "model parameters contain non-finite values".into(),
        ));
    }
    let mut entries = BTreeMap::new();
    for task in [
        TaskName::Seg,
        TaskName::DaX,
        TaskName::DaY,
        TaskName::SelfSup,
    ] {
        let code = task.code();
        let learnable_encoder = code.encoder_mode == CodeMode::Learnable;
        let source = if learnable_encoder || code.decoder_mode == CodeMode::Learnable {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(task as u64);
            let mean = mean_style_code(model, learnable_encoder, code.target, n_samples, &mut rng)?;
            CodeSource::Reference(StyleCode {
                values: mean,
                domain: code.target,
            })
        } else {
            CodeSource::None
        };
        entries.insert(task, resolve_code(model, code, &source)?);
    }
    Ok(PrebuiltCodes { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;

    #[test]
    fn table_rows_match_fixture() {
        use CodeMode::*;
        use Domain::*;
        let expected = [
            ("seg", Intra, Mask, Fixed01, Fixed01),
            ("seg_dummy", Intra, Mask, Fixed01, Learnable),
            ("da_x", Inter, Intra, Fixed01, Learnable),
            ("da_y", Intra, Inter, Fixed01, Learnable),
            ("self", Inter, Mask, Learnable, Fixed01),
        ];
        let table = build_code_table();
        assert_eq!(table.len(), expected.len());
        for (row, (name, s, t, e, d)) in table.iter().zip(expected) {
            assert_eq!(row.name.as_str(), name);
            assert_eq!(
                (row.source, row.target, row.encoder_mode, row.decoder_mode),
                (s, t, e, d)
            );
        }
    }

    #[test]
    fn names_round_trip() {
        for t in TaskName::ALL {
            assert_eq!(t.as_str().parse::<TaskName>().unwrap(), t);
            assert_eq!(t.code().name, t);
        }
        for d in Domain::ALL {
            assert_eq!(d.name().parse::<Domain>().unwrap(), d);
        }
        assert!("LUNG".parse::<Domain>().is_err());
    }

    #[test]
    fn defaults_are_the_published_values() {
        let hp = HyperParams::default();
        assert_eq!(
            (
                hp.lambda_cycle,
                hp.lambda_style,
                hp.lambda_div,
                hp.lambda_seg,
                hp.lambda_inter,
                hp.lambda_intra
            ),
            (2.0, 1.0, 1.0, 5.0, 10.0, 1.0)
        );
        assert_eq!(hp.learning_rate, 1e-4);
        assert_eq!(hp.batch_size, 1);
        assert_eq!((hp.iters_joint, hp.iters_self), (20_000, 5_000));
        hp.validate().unwrap();
        let bad = HyperParams {
            lambda_div: -1.0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
    }

    fn micro() -> Model<f64> {
        Model::new(&ModelConfig::micro(), 5).unwrap()
    }

    #[test]
    fn seg_resolves_to_fixed01_everywhere() {
        let model = micro();
        let pair = resolve_code(&model, TaskName::Seg.code(), &CodeSource::None).unwrap();
        for (f, g) in pair.encoder_layers.iter().chain(&pair.decoder_layers) {
            assert!(f.data().iter().all(|&v| v == 1.0));
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(
            pair.encoder_layers.len(),
            model.generator.encoder_widths().len()
        );
    }

    #[test]
    fn da_x_learns_only_the_decoder() {
        let model = micro();
        let pair = resolve_code(
            &model,
            TaskName::DaX.code(),
            &CodeSource::Latent(Latent::new([0.3, -1.0, 0.5, 2.0])),
        )
        .unwrap();
        for (f, g) in &pair.encoder_layers {
            assert!(f.data().iter().all(|&v| v == 1.0) && g.data().iter().all(|&v| v == 0.0));
        }
        let widths = model.generator.decoder_widths();
        for ((f, g), c) in pair.decoder_layers.iter().zip(widths) {
            assert_eq!((f.len(), g.len()), (c, c));
        }
        assert!(pair
            .decoder_layers
            .iter()
            .any(|(f, _)| f.data().iter().any(|&v| v != 1.0)));
    }

    #[test]
    fn learnable_side_needs_a_source() {
        let model = micro();
        let err = resolve_code(&model, TaskName::SelfSup.code(), &CodeSource::None).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn reference_domain_must_match_target() {
        let model = micro();
        let code = StyleCode {
            values: Tensor::zeros(&[STYLE_DIM]),
            domain: Domain::Inter,
        };
        let err = resolve_code(
            &model,
            TaskName::DaX.code(),
            &CodeSource::Reference(code.clone()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DomainMismatch { .. }));
        resolve_code(&model, TaskName::DaY.code(), &CodeSource::Reference(code)).unwrap();
    }

    #[test]
    fn equal_style_codes_expand_equally() {
        let model = micro();
        let values = Tensor::new(
            &[STYLE_DIM],
            (0..STYLE_DIM).map(|i| i as f64 * 0.1 - 0.5).collect(),
        )
        .unwrap();
        let code = StyleCode {
            values,
            domain: Domain::Mask,
        };
        let a = resolve_code(
            &model,
            TaskName::SelfSup.code(),
            &CodeSource::Reference(code.clone()),
        )
        .unwrap();
        let b = resolve_code(
            &model,
            TaskName::SelfSup.code(),
            &CodeSource::Reference(code),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prebuild_is_deterministic_and_keeps_seg_fixed() {
        let model = micro();
        let a = prebuild_inference_codes(&model, 50, 7).unwrap();
        let b = prebuild_inference_codes(&model, 50, 7).unwrap();
        assert_eq!(a, b);
        let seg = a.get(TaskName::Seg).unwrap();
        for (f, g) in seg.encoder_layers.iter().chain(&seg.decoder_layers) {
            assert!(f.data().iter().all(|&v| v == 1.0) && g.data().iter().all(|&v| v == 0.0));
        }
        assert!(a.get(TaskName::SegDummy).is_err());
        assert!(prebuild_inference_codes(&model, 0, 7).is_err());
    }

    #[test]
    fn prebuild_rejects_nan_parameters() {
        let mut model = micro();
        model.f_enc.params.tensors_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            prebuild_inference_codes(&model, 4, 1),
            Err(Error::InvalidCheckpoint(_))
        ));
    }
}
