//! The joint and self-supervised optimisation schedule.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, ParamKey};
use crate::codespace::{
    prebuild_inference_codes, Domain, HyperParams, Latent, PrebuiltCodes, TaskName,
};
use crate::data::{ShiftLevel, TrainingData};
use crate::error::{Error, Result};
use crate::losses::{
    da_fake, da_losses, disc_losses, seg_losses, self_losses, DaDraws, DummyCode, LossBundle,
    LossGraph, Teacher,
};
use crate::networks::{Model, ModelConfig};
use crate::optim::{Adam, Moments};
use crate::params::ParamStore;
use crate::pipeline::{evaluate, mean_dice, CodeChoice, EvalOptions, InferencePath};
use crate::tensor::{Real, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Joint,
    SelfSup,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Joint => "joint",
            Phase::SelfSup => "self",
        }
    }
}

/// What one training step does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Seg,
    DaX,
    DaY,
    /// Distillation on an INTER image.
    SelfInter,
    /// Distillation on an INTRA image.
    SelfIntra,
}

impl TaskKind {
    pub fn task(self) -> TaskName {
        match self {
            TaskKind::Seg => TaskName::Seg,
            TaskKind::DaX => TaskName::DaX,
            TaskKind::DaY => TaskName::DaY,
            TaskKind::SelfInter | TaskKind::SelfIntra => TaskName::SelfSup,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Seg => "seg",
            TaskKind::DaX => "da_x",
            TaskKind::DaY => "da_y",
            TaskKind::SelfInter => "self_inter",
            TaskKind::SelfIntra => "self_intra",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Draws for one element of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemDraw<T> {
    /// Index into the source pool (INTRA for seg, da_y and self_intra; INTER otherwise).
    pub source: usize,
    /// Index of a target-domain reference image, for reference-guided adaptation.
    pub reference: Option<usize>,
    pub z: Latent<T>,
    pub z2: Latent<T>,
    /// Supervised dummy code taken from the mask rather than a latent.
    pub dummy_from_mask: bool,
}

/// Everything random about one step, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample<T> {
    pub kind: TaskKind,
    pub items: Vec<ItemDraw<T>>,
}

/// Which tasks [`sample_task`] may return.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TaskPolicy {
    #[default]
    Standard,
    /// Self phase also draws seg and adaptation tasks.
    MixSupervised,
    /// Joint phase draws seg only.
    SupervisedOnly,
}

impl TaskPolicy {
    pub fn from_hp(hp: &HyperParams) -> Self {
        if hp.supervised_only {
            TaskPolicy::SupervisedOnly
        } else if hp.mix_supervised {
            TaskPolicy::MixSupervised
        } else {
            TaskPolicy::Standard
        }
    }
}

/// Picks the task of a step and all of its random inputs.
///
/// The joint phase draws uniformly among seg, da_x and da_y; the self phase
/// between distillation on INTER and on INTRA (all five with `mix_supervised`).
pub fn sample_task<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    phase: Phase,
    n_intra: usize,
    n_inter: usize,
    batch_size: usize,
    policy: TaskPolicy,
) -> Result<TaskSample<T>> {
    let mix_supervised = policy == TaskPolicy::MixSupervised;
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Config(
            "task sampling needs INTRA and INTER training images".into(),
        ));
    }
    const JOINT: [TaskKind; 3] = [TaskKind::Seg, TaskKind::DaX, TaskKind::DaY];
    const SELF: [TaskKind; 2] = [TaskKind::SelfInter, TaskKind::SelfIntra];
    const MIXED: [TaskKind; 5] = [
        TaskKind::SelfInter,
        TaskKind::SelfIntra,
        TaskKind::Seg,
        TaskKind::DaX,
        TaskKind::DaY,
    ];
    let choices: &[TaskKind] = match (phase, mix_supervised) {
        (Phase::Joint, _) if policy == TaskPolicy::SupervisedOnly => &JOINT[..1],
        (Phase::Joint, _) => &JOINT,
        (Phase::SelfSup, false) => &SELF,
        (Phase::SelfSup, true) => &MIXED,
    };
    let kind = choices[rng.random_range(0..choices.len())];
    let (n_source, n_target) = match kind {
        TaskKind::Seg | TaskKind::DaY | TaskKind::SelfIntra => (n_intra, n_inter),
        TaskKind::DaX | TaskKind::SelfInter => (n_inter, n_intra),
    };
    let items = (0..batch_size.max(1))
        .map(|_| {
            let source = rng.random_range(0..n_source);
            let use_reference: bool = rng.random_bool(0.5);
            let reference = rng.random_range(0..n_target);
            let z = Latent::sample(rng);
            let z2 = Latent::sample(rng);
            let dummy_from_mask = rng.random_bool(0.5);
            let reference = matches!(kind, TaskKind::DaX | TaskKind::DaY)
                .then_some(reference)
                .filter(|_| use_reference);
            ItemDraw {
                source,
                reference,
                z,
                z2,
                dummy_from_mask,
            }
        })
        .collect();
    Ok(TaskSample { kind, items })
}

/// Deterministic per-step generator, so a resumed run replays the same draws.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Best validation score seen so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestRecord {
    pub score: f64,
    pub iteration: u64,
    pub phase: Phase,
}

/// Parameters, optimiser state and schedule position.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub iteration: u64,
    pub learning_rate: f64,
    pub best: Option<BestRecord>,
    pub phase: Phase,
    pub teacher: Option<Teacher<T>>,
}

/// Learning rate at `iteration`: divided by 10 at each milestone fraction of
/// the current phase.
pub fn learning_rate_at(hp: &HyperParams, iteration: u64) -> f64 {
    let joint = hp.iters_joint as u64;
    let (t, len) = if iteration < joint {
        (iteration, joint)
    } else {
        (iteration - joint, hp.iters_self as u64)
    };
    let drops = hp
        .lr_milestones
        .iter()
        .filter(|&&m| t >= (m * len as f64).floor() as u64)
        .count();
    hp.learning_rate / 10f64.powi(drops as i32)
}

/// Diversity weight at `iteration`, decayed linearly to 0 over the joint phase.
pub fn lambda_div_at(hp: &HyperParams, iteration: u64) -> f64 {
    if !hp.div_decay || hp.iters_joint == 0 {
        return hp.lambda_div;
    }
    let frac = (iteration as f64 / hp.iters_joint as f64).min(1.0);
    hp.lambda_div * (1.0 - frac)
}

impl<T: Real> ModelState<T> {
    pub fn new(cfg: &ModelConfig, hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        let model = Model::new(cfg, hp.seed)?;
        Ok(Self::from_model(model, hp))
    }

    pub fn from_model(model: Model<T>, hp: &HyperParams) -> Self {
        ModelState {
            model,
            optimizer: Adam::new(hp.adam_beta1, hp.adam_beta2, hp.adam_eps),
            iteration: 0,
            learning_rate: hp.learning_rate,
            best: None,
            phase: Phase::Joint,
            teacher: None,
        }
    }

    /// Inference codes of the current parameters.
    pub fn prebuild(&self, hp: &HyperParams) -> Result<PrebuiltCodes<T>> {
        prebuild_inference_codes(&self.model, hp.prebuild_samples, hp.seed)
    }

    fn take_teacher(&mut self, hp: &HyperParams) -> Result<()> {
        let codes = prebuild_inference_codes(&self.model, hp.prebuild_samples, hp.seed)?;
        self.teacher = Some(Teacher::new(&self.model, codes));
        Ok(())
    }

    /// Moves to the self phase at `iters_joint` and refreshes the teacher when configured.
    fn advance_phase(&mut self, hp: &HyperParams) -> Result<()> {
        let joint = hp.iters_joint as u64;
        if self.iteration >= joint && self.phase == Phase::Joint {
            self.phase = Phase::SelfSup;
            self.take_teacher(hp)?;
        } else if self.phase == Phase::SelfSup {
            let local = self.iteration - joint;
            if self.teacher.is_none()
                || (hp.teacher_refresh > 0 && local > 0 && local % hp.teacher_refresh as u64 == 0)
            {
                self.take_teacher(hp)?;
            }
        }
        Ok(())
    }
}

/// Result of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub task: TaskKind,
    pub learning_rate: f64,
    pub losses: LossBundle,
    /// The step produced a non-finite loss or gradient and changed nothing.
    pub aborted: bool,
}

fn backward_checked<T: Real>(lg: &LossGraph<T>) -> Result<Option<Gradients<T>>> {
    match lg.total {
        Some(t) => Ok(Some(lg.graph.backward(t)?)),
        None => Ok(None),
    }
}

fn accumulate<T: Real>(acc: &mut Option<Gradients<T>>, g: Option<Gradients<T>>) {
    if let Some(g) = g {
        match acc {
            Some(a) => a.accumulate(g),
            None => *acc = Some(g),
        }
    }
}

fn finalize<T: Real>(g: &mut Option<Gradients<T>>, batch: usize, clip: f64) {
    if let Some(g) = g {
        if batch > 1 {
            g.scale(T::of_f64(1.0 / batch as f64));
        }
        if clip > 0.0 {
            let norm = g.global_norm();
            if norm > clip {
                g.scale(T::of_f64(clip / norm));
            }
        }
    }
}

fn mean_bundles(bundles: &[LossBundle]) -> LossBundle {
    let mut out = LossBundle::default();
    if let Some(first) = bundles.first() {
        for (t, _) in first.iter() {
            let s: f64 = bundles.iter().filter_map(|b| b.get(t)).sum();
            out.set(t, s / bundles.len() as f64);
        }
    }
    out
}

fn data_image<T: Real>(data: &TrainingData<T>, d: Domain, i: usize) -> Result<&Tensor<T>> {
    match d {
        Domain::Intra => data.intra.get(i).map(|e| &e.image),
        _ => data.inter.get(i).map(|e| &e.image),
    }
    .ok_or_else(|| Error::Config(format!("{} training index {i} out of range", d.name())))
}

fn grads_finite<T: Real>(g: &Option<Gradients<T>>) -> bool {
    g.as_ref().is_none_or(|g| g.all_finite())
}

/// Runs one optimisation step for `sample`.
///
/// Adaptation steps first update the discriminator, then compute the
/// generator-side losses against the updated discriminator. A non-finite
/// loss or gradient anywhere in the step restores parameters and optimiser
/// state to what they were before it; the iteration counter still advances.
pub fn train_step<T: Real>(
    state: &mut ModelState<T>,
    sample: &TaskSample<T>,
    data: &TrainingData<T>,
    hp: &HyperParams,
) -> Result<StepRecord> {
    state.advance_phase(hp)?;
    let lr = learning_rate_at(hp, state.iteration);
    state.learning_rate = lr;
    let eps = hp.eps_adain;
    let batch = sample.items.len();
    let mut bundles: Vec<LossBundle> = Vec::with_capacity(batch);
    let mut grads_g = None;
    let mut finite = true;
    let mut rollback = None;
    match sample.kind {
        TaskKind::Seg => {
            for item in &sample.items {
                let ex = data
                    .intra
                    .get(item.source)
                    .ok_or_else(|| Error::Config("INTRA index out of range".into()))?;
                let dummy = if item.dummy_from_mask {
                    DummyCode::FromMask
                } else {
                    DummyCode::Latent(item.z.clone())
                };
                let lg = seg_losses(&state.model, &ex.image, &ex.target, &dummy, hp)?;
                bundles.push(lg.bundle.clone());
                accumulate(&mut grads_g, backward_checked(&lg)?);
            }
        }
        TaskKind::DaX | TaskKind::DaY => {
            let (source, target) = if sample.kind == TaskKind::DaX {
                (Domain::Inter, Domain::Intra)
            } else {
                (Domain::Intra, Domain::Inter)
            };
            let draws: Vec<DaDraws<T>> = sample
                .items
                .iter()
                .map(|item| {
                    let reference = item
                        .reference
                        .map(|r| data_image(data, target, r).cloned())
                        .transpose()?;
                    Ok(DaDraws {
                        z: item.z.clone(),
                        z2: item.z2.clone(),
                        reference,
                    })
                })
                .collect::<Result<_>>()?;
            let mut d_bundles = Vec::with_capacity(batch);
            if hp.ablation.adv {
                let mut grads_d = None;
                for (item, dr) in sample.items.iter().zip(&draws) {
                    let x = data_image(data, source, item.source)?;
                    let fake = da_fake(&state.model, x, source, target, dr, eps)?;
                    let lg = disc_losses(&state.model, x, source, &fake, target)?;
                    d_bundles.push(lg.bundle.clone());
                    accumulate(&mut grads_d, backward_checked(&lg)?);
                }
                finalize(&mut grads_d, batch, hp.grad_clip);
                finite = grads_finite(&grads_d) && d_bundles.iter().all(|b| b.all_finite());
                if let (true, Some(gd)) = (finite, &grads_d) {
                    rollback = Some(DiscBackup::take(state));
                    let mut stores = state.model.stores_mut();
                    state.optimizer.step(&mut stores, gd, lr)?;
                }
            }
            for (i, (item, dr)) in sample.items.iter().zip(&draws).enumerate() {
                let x = data_image(data, source, item.source)?;
                let lg = da_losses(
                    &state.model,
                    x,
                    source,
                    target,
                    dr,
                    lambda_div_at(hp, state.iteration),
                    hp,
                )?;
                let mut b = d_bundles.get(i).cloned().unwrap_or_default();
                b.merge(&lg.bundle);
                bundles.push(b);
                if finite {
                    accumulate(&mut grads_g, backward_checked(&lg)?);
                }
            }
        }
        TaskKind::SelfInter | TaskKind::SelfIntra => {
            let teacher = state
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Precondition("self step without a teacher".into()))?;
            for item in &sample.items {
                let lg = if sample.kind == TaskKind::SelfInter {
                    let y = data_image(data, Domain::Inter, item.source)?;
                    self_losses(&state.model, teacher, None, Some(y), &item.z, hp)?
                } else {
                    let x = data_image(data, Domain::Intra, item.source)?;
                    self_losses(&state.model, teacher, Some(x), None, &item.z, hp)?
                };
                bundles.push(lg.bundle.clone());
                accumulate(&mut grads_g, backward_checked(&lg)?);
            }
        }
    }
    let losses = mean_bundles(&bundles);
    finalize(&mut grads_g, batch, hp.grad_clip);
    finite = finite && losses.all_finite() && grads_finite(&grads_g);
    if finite {
        if let Some(g) = &grads_g {
            let mut stores = state.model.stores_mut();
            state.optimizer.step(&mut stores, g, lr)?;
        }
    } else if let Some(backup) = rollback {
        backup.restore(state);
    }
    let record = StepRecord {
        iteration: state.iteration,
        phase: state.phase,
        task: sample.kind,
        learning_rate: lr,
        losses,
        aborted: !finite,
    };
    state.iteration += 1;
    Ok(record)
}

/// Discriminator parameters and moments saved before its update.
struct DiscBackup<T> {
    params: ParamStore<T>,
    moments: Vec<(ParamKey, Option<Moments<T>>)>,
}

impl<T: Real> DiscBackup<T> {
    fn take(state: &ModelState<T>) -> Self {
        let params = state.model.disc.params.clone();
        let moments = (0..params.len())
            .map(|i| {
                let k = params.key(i);
                (k, state.optimizer.state().get(&k).cloned())
            })
            .collect();
        DiscBackup { params, moments }
    }

    fn restore(self, state: &mut ModelState<T>) {
        state.model.disc.params = self.params;
        for (k, m) in self.moments {
            state.optimizer.restore_moments(k, m);
        }
    }
}

/// Callbacks invoked by [`run_schedule`].
pub trait Observer<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each validation; `improved` marks a new best.
    fn on_eval(&mut self, _state: &ModelState<T>, _dice: f64, _improved: bool) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_interval` iterations.
    fn on_checkpoint(&mut self, _state: &ModelState<T>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<T> Observer<T> for Silent {}

/// Outcome of [`run_schedule`].
#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub state: ModelState<T>,
    /// Model with the best validation score reached during this run.
    pub best_model: Option<Model<T>>,
    pub records: Vec<StepRecord>,
    /// `(iteration, validation dice)` pairs.
    pub validation: Vec<(u64, f64)>,
}

/// Validation Dice on held-out INTER: teacher path during the joint phase,
/// direct path with the self code during the self phase. A supervised-only
/// run has neither and is validated on the direct segmentation path.
pub fn validation_dice<T: Real>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    hp: &HyperParams,
) -> Result<f64> {
    if data.val.is_empty() {
        return Err(Error::Config("no validation images".into()));
    }
    let codes = state.prebuild(hp)?;
    let path = match state.phase {
        _ if hp.supervised_only => InferencePath::Direct(CodeChoice::Seg),
        Phase::Joint => InferencePath::ViaAdaptation,
        Phase::SelfSup => InferencePath::Direct(CodeChoice::SelfCode),
    };
    let opts = EvalOptions {
        path,
        shift: ShiftLevel::None,
        postprocess: true,
        seed: hp.seed,
        eps: hp.eps_adain,
    };
    Ok(mean_dice(&evaluate(
        &state.model,
        &codes,
        &data.val,
        &opts,
    )?))
}

/// Runs the schedule from `state.iteration` to `iters_joint + iters_self`.
///
/// Validation runs every `eval_interval` iterations and at the end of each
/// phase; the best model is tracked separately per phase and the self-phase
/// best wins once that phase has been validated.
pub fn run_schedule<T: Real>(
    state: ModelState<T>,
    data: &TrainingData<T>,
    hp: &HyperParams,
    observer: &mut dyn Observer<T>,
) -> Result<RunOutcome<T>> {
    run_until(
        state,
        data,
        hp,
        (hp.iters_joint + hp.iters_self) as u64,
        observer,
    )
}

/// Like [`run_schedule`] but stops once `state.iteration` reaches `stop`.
pub fn run_until<T: Real>(
    mut state: ModelState<T>,
    data: &TrainingData<T>,
    hp: &HyperParams,
    stop: u64,
    observer: &mut dyn Observer<T>,
) -> Result<RunOutcome<T>> {
    hp.validate()?;
    data.validate()?;
    let total = (hp.iters_joint + hp.iters_self) as u64;
    let stop = stop.min(total);
    let joint = hp.iters_joint as u64;
    let mut records = Vec::new();
    let mut validation = Vec::new();
    let mut best_model = None;
    while state.iteration < stop {
        let mut rng = step_rng(hp.seed, state.iteration);
        let phase = if state.iteration < joint {
            Phase::Joint
        } else {
            Phase::SelfSup
        };
        let sample = sample_task(
            &mut rng,
            phase,
            data.intra.len(),
            data.inter.len(),
            hp.batch_size,
            TaskPolicy::from_hp(hp),
        )?;
        let record = train_step(&mut state, &sample, data, hp)?;
        observer.on_step(&record)?;
        records.push(record);
        let it = state.iteration;
        let phase_end = it == joint || it == total;
        if !data.val.is_empty()
            && ((hp.eval_interval > 0 && it % hp.eval_interval as u64 == 0) || phase_end)
        {
            let dice = validation_dice(&state, data, hp)?;
            validation.push((it, dice));
            let improved = match state.best {
                Some(b) if b.phase == state.phase => dice >= b.score,
                Some(b) => b.phase == Phase::Joint,
                None => true,
            };
            if improved {
                state.best = Some(BestRecord {
                    score: dice,
                    iteration: it,
                    phase: state.phase,
                });
                best_model = Some(state.model.clone());
            }
            observer.on_eval(&state, dice, improved)?;
        }
        if hp.checkpoint_interval > 0 && (it % hp.checkpoint_interval as u64 == 0 || it == total) {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(RunOutcome {
        state,
        best_model,
        records,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_phase_never_samples_adaptation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s: TaskSample<f32> =
                sample_task(&mut rng, Phase::SelfSup, 3, 3, 1, TaskPolicy::Standard).unwrap();
            assert!(matches!(s.kind, TaskKind::SelfInter | TaskKind::SelfIntra));
        }
    }

    #[test]
    fn joint_phase_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            let s: TaskSample<f32> =
                sample_task(&mut rng, Phase::Joint, 3, 3, 1, TaskPolicy::Standard).unwrap();
            counts[match s.kind {
                TaskKind::Seg => 0,
                TaskKind::DaX => 1,
                TaskKind::DaY => 2,
                _ => unreachable!(),
            }] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02);
        }
    }

    #[test]
    fn supervised_only_policy_draws_seg() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let s: TaskSample<f32> =
                sample_task(&mut rng, Phase::Joint, 3, 3, 1, TaskPolicy::SupervisedOnly).unwrap();
            assert_eq!(s.kind, TaskKind::Seg);
        }
        let mut kinds = alloc::collections::BTreeSet::new();
        for _ in 0..1000 {
            let s: TaskSample<f32> =
                sample_task(&mut rng, Phase::SelfSup, 3, 3, 1, TaskPolicy::MixSupervised).unwrap();
            kinds.insert(s.kind.as_str());
        }
        assert_eq!(kinds.len(), 5);
    }

    #[test]
    fn sampling_is_deterministic_and_needs_data() {
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100)
                .map(|_| {
                    sample_task::<f32, _>(&mut rng, Phase::Joint, 5, 4, 1, TaskPolicy::Standard)
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(7), seq(7));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(
            sample_task::<f32, _>(&mut rng, Phase::Joint, 0, 4, 1, TaskPolicy::Standard).is_err()
        );
    }

    #[test]
    fn two_drops_per_phase_at_milestones() {
        let hp = HyperParams {
            iters_joint: 100,
            iters_self: 50,
            ..HyperParams::default()
        };
        let trace: Vec<f64> = (0..150).map(|i| learning_rate_at(&hp, i)).collect();
        let drops: Vec<u64> = (1..150)
            .filter(|&i| trace[i as usize] < trace[i as usize - 1])
            .collect();
        assert_eq!(drops, vec![60, 90, 130, 145]);
        assert_eq!(trace[100], hp.learning_rate);
        assert!((trace[99] - hp.learning_rate / 100.0).abs() < 1e-18);
    }

    #[test]
    fn diversity_weight_decays_to_zero() {
        let hp = HyperParams {
            iters_joint: 100,
            ..HyperParams::default()
        };
        assert_eq!(lambda_div_at(&hp, 0), 1.0);
        assert_eq!(lambda_div_at(&hp, 50), 0.5);
        assert_eq!(lambda_div_at(&hp, 100), 0.0);
        let off = HyperParams {
            div_decay: false,
            ..hp
        };
        assert_eq!(lambda_div_at(&off, 50), 1.0);
    }

    use crate::codespace::Ablation;
    use crate::data::{one_hot, EvalImage, LabeledImage, UnlabeledImage};
    use crate::losses::LossTerm;
    use crate::pipeline::BinaryMask;
    use alloc::string::ToString;
    use alloc::vec;

    fn square_mask() -> BinaryMask {
        let mut m = BinaryMask::empty(8, 8);
        for r in 2..6 {
            for c in 1..4 {
                m.set(r, c, true);
            }
        }
        m
    }

    fn image(mask: &BinaryMask, offset: f64, phase: usize) -> Tensor<f64> {
        let data = (0..64)
            .map(|i| {
                let base = if mask.data()[i] { -0.5 } else { 0.4 };
                base + offset + 0.05 * (((i + phase) % 3) as f64 - 1.0)
            })
            .collect();
        Tensor::new(&[1, 8, 8], data).unwrap()
    }

    fn micro_data() -> TrainingData<f64> {
        let m = square_mask();
        TrainingData {
            intra: (0..2)
                .map(|k| LabeledImage {
                    image: image(&m, 0.0, k),
                    target: one_hot(&m),
                })
                .collect(),
            inter: (0..2)
                .map(|k| UnlabeledImage {
                    image: image(&m, 0.1, k + 1),
                })
                .collect(),
            val: vec![EvalImage {
                id: "v".to_string(),
                domain: Domain::Inter,
                image: image(&m, 0.1, 2),
                mask: m,
                abnormal: None,
            }],
        }
    }

    fn micro_hp() -> HyperParams {
        HyperParams {
            learning_rate: 1e-3,
            iters_joint: 6,
            iters_self: 4,
            prebuild_samples: 4,
            eval_interval: 5,
            checkpoint_interval: 0,
            seed: 3,
            ..HyperParams::default()
        }
    }

    fn seg_sample() -> TaskSample<f64> {
        let item = ItemDraw {
            source: 0,
            reference: None,
            z: Latent::new([0.1, -0.2, 0.3, 0.0]),
            z2: Latent::zeros(),
            dummy_from_mask: false,
        };
        TaskSample {
            kind: TaskKind::Seg,
            items: vec![item],
        }
    }

    #[test]
    fn repeated_seg_steps_overfit_one_pair() {
        let hp = HyperParams {
            iters_joint: 10_000,
            ..micro_hp()
        };
        let data = micro_data();
        let mut st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        let sample = seg_sample();
        let first = train_step(&mut st, &sample, &data, &hp)
            .unwrap()
            .losses
            .get(LossTerm::Seg)
            .unwrap();
        let mut last = first;
        for _ in 1..300 {
            last = train_step(&mut st, &sample, &data, &hp)
                .unwrap()
                .losses
                .get(LossTerm::Seg)
                .unwrap();
        }
        assert!(last < first && last <= 0.05, "seg loss {first} -> {last}");
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let hp = HyperParams {
            lambda_seg: 0.0,
            lambda_style: 0.0,
            lambda_inter: 0.0,
            lambda_intra: 0.0,
            ..micro_hp()
        };
        let data = micro_data();
        let mut st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        let before = st.model.fingerprint();
        let rec = train_step(&mut st, &seg_sample(), &data, &hp).unwrap();
        assert!(!rec.aborted);
        assert_eq!(st.model.fingerprint(), before);
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn identical_steps_give_identical_parameters() {
        let hp = micro_hp();
        let data = micro_data();
        let st0 = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        let mut rng = step_rng(5, 0);
        let sample = sample_task(&mut rng, Phase::Joint, 2, 2, 2, TaskPolicy::Standard).unwrap();
        let (mut a, mut b) = (st0.clone(), st0);
        train_step(&mut a, &sample, &data, &hp).unwrap();
        train_step(&mut b, &sample, &data, &hp).unwrap();
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
        assert_eq!(a.optimizer, b.optimizer);
    }

    #[test]
    fn non_finite_generator_loss_rolls_back_discriminator() {
        let hp = micro_hp();
        let data = micro_data();
        let mut st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        // Poison the style encoder: the discriminator step stays finite, the style loss does not.
        st.model.style.params.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let before = (
            st.model.disc.params.fingerprint(),
            st.model.generator.params.fingerprint(),
            st.optimizer.clone(),
        );
        let item = ItemDraw {
            source: 0,
            reference: None,
            z: Latent::zeros(),
            z2: Latent::new([1.0, 0.0, 0.0, 0.0]),
            dummy_from_mask: false,
        };
        let sample = TaskSample {
            kind: TaskKind::DaY,
            items: vec![item],
        };
        let rec = train_step(&mut st, &sample, &data, &hp).unwrap();
        assert!(rec.aborted);
        assert!(rec.losses.get(LossTerm::AdvD).unwrap().is_finite());
        assert_eq!(
            (
                st.model.disc.params.fingerprint(),
                st.model.generator.params.fingerprint(),
                st.optimizer.clone()
            ),
            before
        );
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn self_phase_starts_at_boundary_with_frozen_teacher() {
        let hp = micro_hp();
        let data = micro_data();
        let mut seen = Vec::new();
        struct Watch<'a>(&'a mut Vec<(u64, Phase, Option<u64>)>);
        impl Observer<f64> for Watch<'_> {
            fn on_step(&mut self, r: &StepRecord) -> Result<()> {
                self.0.push((r.iteration, r.phase, None));
                Ok(())
            }
        }
        let st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        let out = run_until(st, &data, &hp, 6, &mut Watch(&mut seen)).unwrap();
        assert!(seen.iter().all(|s| s.1 == Phase::Joint));
        assert!(out.state.teacher.is_none());
        let mut st = out.state;
        let mut fps = Vec::new();
        for _ in 0..4 {
            let mut rng = step_rng(hp.seed, st.iteration);
            let sample =
                sample_task(&mut rng, Phase::SelfSup, 2, 2, 1, TaskPolicy::Standard).unwrap();
            let rec = train_step(&mut st, &sample, &data, &hp).unwrap();
            assert_eq!(rec.phase, Phase::SelfSup);
            assert!(matches!(
                rec.task,
                TaskKind::SelfInter | TaskKind::SelfIntra
            ));
            let t = st.teacher.as_ref().unwrap();
            assert_eq!(t.fingerprint(), t.current_fingerprint());
            fps.push(t.fingerprint());
        }
        assert!(fps.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(st.model.fingerprint(), fps[0]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let hp = micro_hp();
        let data = micro_data();
        let st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        let full = run_schedule(st.clone(), &data, &hp, &mut Silent).unwrap();
        let part = run_until(st, &data, &hp, 4, &mut Silent).unwrap();
        let rest = run_schedule(part.state, &data, &hp, &mut Silent).unwrap();
        let joined: Vec<_> = part.records.iter().chain(&rest.records).cloned().collect();
        assert_eq!(full.records, joined);
        assert_eq!(
            full.state.model.fingerprint(),
            rest.state.model.fingerprint()
        );
        assert_eq!(full.records.len(), 10);
        let val_it: Vec<u64> = full.validation.iter().map(|v| v.0).collect();
        assert_eq!(val_it, vec![5, 6, 10]);
        let best = full.state.best.unwrap();
        assert_eq!(best.phase, Phase::SelfSup);
        assert!(full
            .validation
            .iter()
            .filter(|v| v.0 > 6)
            .all(|v| v.1 <= best.score));
    }

    #[test]
    fn disabled_terms_produce_no_update() {
        let hp = HyperParams {
            ablation: Ablation {
                seg: false,
                style_seg: false,
                ..Ablation::default()
            },
            ..micro_hp()
        };
        let data = micro_data();
        let mut st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
        let before = st.model.fingerprint();
        train_step(&mut st, &seg_sample(), &data, &hp).unwrap();
        assert_eq!(st.model.fingerprint(), before);
        assert!(st.optimizer.state().is_empty());
    }
}
