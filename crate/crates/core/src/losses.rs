//! Loss terms for supervised segmentation, domain adaptation and
//! self-consistency distillation.
//!
//! Every function builds a fresh [`Graph`] with the model bound so that only
//! the modules the task is allowed to update are trainable, and returns the
//! graph together with a handle per active term. All randomness is supplied
//! by the caller, so switching a term off draws nothing differently.

use alloc::vec::Vec;
use core::fmt;

use crate::autograd::{Graph, Var};
use crate::codespace::{
    da_task, resolve_code_vars, AdaINCodePair, CodeInput, Domain, HyperParams, Latent,
    PrebuiltCodes, TaskName,
};
use crate::error::{Error, Result};
use crate::networks::{Model, ModelBinding, Trainable, TEACHER_OFFSET};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Seg,
    StyleSeg,
    AdvG,
    AdvD,
    Cycle,
    StyleDa,
    Div,
    SelfInter,
    SelfIntra,
    TotalG,
    TotalD,
}

impl LossTerm {
    pub const ALL: [LossTerm; 11] = [
        LossTerm::Seg,
        LossTerm::StyleSeg,
        LossTerm::AdvG,
        LossTerm::AdvD,
        LossTerm::Cycle,
        LossTerm::StyleDa,
        LossTerm::Div,
        LossTerm::SelfInter,
        LossTerm::SelfIntra,
        LossTerm::TotalG,
        LossTerm::TotalD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Seg => "seg",
            LossTerm::StyleSeg => "style_seg",
            LossTerm::AdvG => "adv_g",
            LossTerm::AdvD => "adv_d",
            LossTerm::Cycle => "cycle",
            LossTerm::StyleDa => "style_da",
            LossTerm::Div => "div",
            LossTerm::SelfInter => "self_inter",
            LossTerm::SelfIntra => "self_intra",
            LossTerm::TotalG => "total_g",
            LossTerm::TotalD => "total_d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar value of every term; `None` marks an inactive term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    values: [Option<f64>; 11],
}

impl LossBundle {
    pub fn get(&self, t: LossTerm) -> Option<f64> {
        self.values[t as usize]
    }

    pub fn set(&mut self, t: LossTerm, v: f64) {
        self.values[t as usize] = Some(v);
    }

    /// Active terms in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (LossTerm, f64)> + '_ {
        LossTerm::ALL
            .into_iter()
            .filter_map(|t| self.get(t).map(|v| (t, v)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, v)| v.is_finite())
    }

    /// Copies the active terms of `other` into `self`.
    pub fn merge(&mut self, other: &LossBundle) {
        for (t, v) in other.iter() {
            self.set(t, v);
        }
    }
}

/// A loss graph ready for [`Graph::backward`].
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    /// Weighted total; absent when every term is switched off.
    pub total: Option<Var>,
    /// Handle of every active component (not including the total).
    pub terms: Vec<(LossTerm, Var)>,
    pub bundle: LossBundle,
}

impl<T: Real> LossGraph<T> {
    pub fn term(&self, t: LossTerm) -> Option<Var> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }

    fn finish(
        graph: Graph<T>,
        terms: Vec<(LossTerm, Var, f64)>,
        total_term: LossTerm,
    ) -> Result<Self> {
        let mut bundle = LossBundle::default();
        for &(t, v, _) in &terms {
            bundle.set(t, graph.value(v).item().as_f64());
        }
        let mut graph = graph;
        let total = if terms.is_empty() {
            None
        } else {
            let weighted: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
            let total = graph.weighted_sum(&weighted)?;
            bundle.set(total_term, graph.value(total).item().as_f64());
            Some(total)
        };
        let terms = terms.into_iter().map(|(t, v, _)| (t, v)).collect();
        Ok(LossGraph {
            graph,
            total,
            terms,
            bundle,
        })
    }
}

/// Source of the dummy 16-dim mask code in the supervised step.
#[derive(Clone, Debug)]
pub enum DummyCode<T> {
    /// Code generator applied to a latent.
    Latent(Latent<T>),
    /// Style encoder applied to the ground-truth mask.
    FromMask,
}

/// Which modules each step may update.
pub fn trainable_for(task: TaskName) -> Trainable {
    match task {
        TaskName::Seg | TaskName::SegDummy => Trainable {
            generator: true,
            f_dec: true,
            style: true,
            ..Trainable::none()
        },
        TaskName::DaX | TaskName::DaY => Trainable {
            generator: true,
            f_enc: true,
            f_dec: true,
            style: true,
            disc: false,
        },
        TaskName::SelfSup => Trainable {
            generator: true,
            f_enc: true,
            ..Trainable::none()
        },
    }
}

fn fixed_codes<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    b: &ModelBinding,
) -> Result<crate::networks::CodeVars> {
    Ok(resolve_code_vars(g, model, b, TaskName::Seg.code(), CodeInput::None)?.0)
}

/// Supervised segmentation: cross-entropy plus the dummy-code style loss.
pub fn seg_losses<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    dummy: &DummyCode<T>,
    hp: &HyperParams,
) -> Result<LossGraph<T>> {
    let (_, h, w) = image.chw()?;
    if mask.shape() != [2, h, w] {
        return Err(Error::Shape(alloc::format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable_for(TaskName::Seg));
    let x = g.input(image.clone());
    let codes = fixed_codes(&mut g, model, &b)?;
    let logits =
        model
            .generator
            .forward(&mut g, &b.generator, x, &codes, Domain::Mask, hp.eps_adain)?;
    let mut terms = Vec::new();
    if hp.ablation.seg {
        let ce = g.softmax_cross_entropy(logits, mask.clone())?;
        terms.push((LossTerm::Seg, ce, hp.lambda_seg));
    }
    if hp.ablation.style_seg {
        let dummy = match dummy {
            DummyCode::Latent(z) => {
                let zv = g.input(z.values.clone());
                model.f_dec.forward(&mut g, &b.f_dec, zv, Domain::Mask)?
            }
            DummyCode::FromMask => {
                let m = g.input(mask.clone());
                model.style.forward(&mut g, &b.style, m, Domain::Mask)?
            }
        };
        let probs = g.softmax(logits)?;
        let encoded = model.style.forward(&mut g, &b.style, probs, Domain::Mask)?;
        let l = g.mean_abs_diff(dummy, encoded)?;
        terms.push((LossTerm::StyleSeg, l, hp.lambda_style));
    }
    LossGraph::finish(g, terms, LossTerm::TotalG)
}

/// Random draws consumed by one domain-adaptation step.
#[derive(Clone, Debug)]
pub struct DaDraws<T> {
    /// Latent for the target code, used when no reference is given.
    pub z: Latent<T>,
    /// Latent for the second target code of the diversity term.
    pub z2: Latent<T>,
    /// Target-domain reference image whose style code replaces `z`.
    pub reference: Option<Tensor<T>>,
}

fn check_da_domains(source: Domain, target: Domain) -> Result<()> {
    if !source.is_image() || !target.is_image() {
        return Err(Error::InvalidDomain(alloc::format!(
            "adaptation between {source} and {target}"
        )));
    }
    if source == target {
        return Err(Error::InvalidDomain(alloc::format!(
            "adaptation from {source} to itself"
        )));
    }
    Ok(())
}

/// Target code for adaptation into `target`, as a 16-dim node plus its expansion.
fn target_code<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    b: &ModelBinding,
    target: Domain,
    z: &Latent<T>,
    reference: Option<&Tensor<T>>,
) -> Result<(crate::networks::CodeVars, Var)> {
    let input = match reference {
        Some(r) => {
            let rv = g.input(r.clone());
            CodeInput::Style(model.style.forward(g, &b.style, rv, target)?)
        }
        None => CodeInput::Latent(g.input(z.values.clone())),
    };
    let (codes, style) = resolve_code_vars(g, model, b, da_task(target)?.code(), input)?;
    Ok((codes, style.expect("adaptation codes are learnable")))
}

/// Generator-side adaptation losses. `lambda_div` is the current (possibly
/// decayed) diversity weight.
pub fn da_losses<T: Real>(
    model: &Model<T>,
    source_img: &Tensor<T>,
    source: Domain,
    target: Domain,
    draws: &DaDraws<T>,
    lambda_div: f64,
    hp: &HyperParams,
) -> Result<LossGraph<T>> {
    check_da_domains(source, target)?;
    let ab = hp.ablation;
    let eps = hp.eps_adain;
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable_for(TaskName::DaX));
    let x = g.input(source_img.clone());
    let (codes, style) = target_code(
        &mut g,
        model,
        &b,
        target,
        &draws.z,
        draws.reference.as_ref(),
    )?;
    let fake = model
        .generator
        .forward(&mut g, &b.generator, x, &codes, target, eps)?;
    let mut terms = Vec::new();
    if ab.adv {
        let logit = model.disc.forward(&mut g, &b.disc, fake, target)?;
        let l = if hp.paper_literal_adv {
            let sp = g.softplus(logit);
            g.scale(sp, -1.0)
        } else {
            let neg = g.scale(logit, -1.0);
            g.softplus(neg)
        };
        terms.push((LossTerm::AdvG, l, 1.0));
    }
    if ab.cycle {
        let src_style = model.style.forward(&mut g, &b.style, x, source)?;
        let (back_codes, _) = resolve_code_vars(
            &mut g,
            model,
            &b,
            da_task(source)?.code(),
            CodeInput::Style(src_style),
        )?;
        let rec = model
            .generator
            .forward(&mut g, &b.generator, fake, &back_codes, source, eps)?;
        let l = g.mean_abs_diff(rec, x)?;
        terms.push((LossTerm::Cycle, l, hp.lambda_cycle));
    }
    if ab.style_da {
        let encoded = model.style.forward(&mut g, &b.style, fake, target)?;
        let l = g.mean_abs_diff(style, encoded)?;
        terms.push((LossTerm::StyleDa, l, hp.lambda_style));
    }
    if ab.div {
        let z2 = g.input(draws.z2.values.clone());
        let (codes2, _) = resolve_code_vars(
            &mut g,
            model,
            &b,
            da_task(target)?.code(),
            CodeInput::Latent(z2),
        )?;
        let fake2 = model
            .generator
            .forward(&mut g, &b.generator, x, &codes2, target, eps)?;
        let fake2 = g.detach(fake2);
        let l = g.mean_abs_diff(fake, fake2)?;
        terms.push((LossTerm::Div, l, -lambda_div));
    }
    LossGraph::finish(g, terms, LossTerm::TotalG)
}

/// Translated image for the discriminator step; no gradient is recorded.
pub fn da_fake<T: Real>(
    model: &Model<T>,
    source_img: &Tensor<T>,
    source: Domain,
    target: Domain,
    draws: &DaDraws<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_da_domains(source, target)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::none());
    let x = g.input(source_img.clone());
    let (codes, _) = target_code(
        &mut g,
        model,
        &b,
        target,
        &draws.z,
        draws.reference.as_ref(),
    )?;
    let fake = model
        .generator
        .forward(&mut g, &b.generator, x, &codes, target, eps)?;
    Ok(g.value(fake).clone())
}

/// Discriminator loss `softplus(−D_s(real)) + softplus(D_t(fake))`.
pub fn disc_losses<T: Real>(
    model: &Model<T>,
    real: &Tensor<T>,
    real_domain: Domain,
    fake: &Tensor<T>,
    fake_domain: Domain,
) -> Result<LossGraph<T>> {
    check_da_domains(real_domain, fake_domain)?;
    let mut g = Graph::new();
    let b = model.disc.params.bind(&mut g, true);
    let r = g.input(real.clone());
    let f = g.input(fake.clone());
    let lr = model.disc.forward(&mut g, &b, r, real_domain)?;
    let lf = model.disc.forward(&mut g, &b, f, fake_domain)?;
    let nr = g.scale(lr, -1.0);
    let sr = g.softplus(nr);
    let sf = g.softplus(lf);
    let adv = g.add(sr, sf)?;
    LossGraph::finish(g, alloc::vec![(LossTerm::AdvD, adv, 1.0)], LossTerm::TotalD)
}

/// Frozen copy of the model plus the inference codes it was taken with.
#[derive(Clone, Debug)]
pub struct Teacher<T> {
    pub model: Model<T>,
    pub codes: PrebuiltCodes<T>,
    fingerprint: u64,
}

impl<T: Real> Teacher<T> {
    pub fn new(model: &Model<T>, codes: PrebuiltCodes<T>) -> Self {
        let model = model.snapshot(TEACHER_OFFSET);
        let fingerprint = model.fingerprint();
        Teacher {
            model,
            codes,
            fingerprint,
        }
    }

    /// Digest of the parameters at snapshot time.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn current_fingerprint(&self) -> u64 {
        self.model.fingerprint()
    }
}

/// Teacher prediction built inside the student graph and then cut off.
///
/// The teacher's parameters are inserted as trainable leaves under their own
/// store ids so that any leak through the detach would show up as a
/// gradient keyed by a teacher store.
fn teacher_probs<T: Real>(
    g: &mut Graph<T>,
    teacher: &Teacher<T>,
    tb: &ModelBinding,
    x: Var,
    via_adaptation: bool,
    eps: f64,
) -> Result<Var> {
    let tm = &teacher.model;
    let to_vars = |g: &mut Graph<T>, c: &AdaINCodePair<T>| c.to_vars(g);
    let mut input = x;
    if via_adaptation {
        let da = to_vars(g, teacher.codes.get(TaskName::DaX)?);
        input = tm
            .generator
            .forward(g, &tb.generator, input, &da, Domain::Intra, eps)?;
    }
    let seg = to_vars(g, teacher.codes.get(TaskName::Seg)?);
    let logits = tm
        .generator
        .forward(g, &tb.generator, input, &seg, Domain::Mask, eps)?;
    let probs = g.softmax(logits)?;
    Ok(g.detach(probs))
}

/// Self-consistency distillation on an INTER image, an INTRA image, or both.
pub fn self_losses<T: Real>(
    model: &Model<T>,
    teacher: &Teacher<T>,
    x_intra: Option<&Tensor<T>>,
    y_inter: Option<&Tensor<T>>,
    z: &Latent<T>,
    hp: &HyperParams,
) -> Result<LossGraph<T>> {
    if x_intra.is_none() && y_inter.is_none() {
        return Err(Error::Precondition(
            "self losses need an INTRA or an INTER image".into(),
        ));
    }
    let eps = hp.eps_adain;
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable_for(TaskName::SelfSup));
    let tb = teacher.model.bind(&mut g, Trainable::all());
    let zv = g.input(z.values.clone());
    let (codes, _) = resolve_code_vars(
        &mut g,
        model,
        &b,
        TaskName::SelfSup.code(),
        CodeInput::Latent(zv),
    )?;
    let mut terms = Vec::new();
    let student = |g: &mut Graph<T>, img: &Tensor<T>, via: bool| -> Result<Var> {
        let x = g.input(img.clone());
        let target = teacher_probs(g, teacher, &tb, x, via, eps)?;
        let logits = model
            .generator
            .forward(g, &b.generator, x, &codes, Domain::Mask, eps)?;
        let probs = g.softmax(logits)?;
        g.mean_abs_diff(target, probs)
    };
    if let (Some(y), true) = (y_inter, hp.ablation.self_inter) {
        let l = student(&mut g, y, true)?;
        terms.push((LossTerm::SelfInter, l, hp.lambda_inter));
    }
    if let (Some(x), true) = (x_intra, hp.ablation.self_intra) {
        let l = student(&mut g, x, false)?;
        terms.push((LossTerm::SelfIntra, l, hp.lambda_intra));
    }
    LossGraph::finish(g, terms, LossTerm::TotalG)
}
