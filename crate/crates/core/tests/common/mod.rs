#![allow(dead_code)]

use adaseg_core::autograd::{Gradients, ParamKey};
use adaseg_core::codespace::{prebuild_inference_codes, Domain, HyperParams, Latent};
use adaseg_core::data::one_hot;
use adaseg_core::losses::{
    da_fake, da_losses, disc_losses, seg_losses, self_losses, DaDraws, DummyCode, LossGraph,
    LossTerm, Teacher,
};
use adaseg_core::networks::{Model, ModelConfig};
use adaseg_core::pipeline::BinaryMask;
use adaseg_core::tensor::Tensor;
use adaseg_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub fn micro_mask() -> BinaryMask {
    let mut m = BinaryMask::empty(8, 8);
    for r in 1..7 {
        for c in 1..4 {
            m.set(r, c, true);
        }
        for c in 5..7 {
            m.set(r, c, true);
        }
    }
    m
}

pub fn micro_image(seed: u64, offset: f64) -> Tensor<f64> {
    let m = micro_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..64)
        .map(|i| {
            let n: f64 = rng.sample(StandardNormal);
            let base = if m.data()[i] { -0.5 } else { 0.4 };
            (base + offset + 0.1 * n).clamp(-1.0, 1.0)
        })
        .collect();
    Tensor::new(&[1, 8, 8], data).unwrap()
}

/// One gradient-check fixture: a micro model in `f64` plus the inputs of every loss.
pub struct Fixture {
    pub model: Model<f64>,
    pub teacher: Teacher<f64>,
    pub hp: HyperParams,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub target: Tensor<f64>,
    pub draws: DaDraws<f64>,
    pub z: Latent<f64>,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let model = Model::<f64>::new(&ModelConfig::micro(), seed).unwrap();
        let codes = prebuild_inference_codes(&model, 4, seed).unwrap();
        let teacher = Teacher::new(&model, codes);
        let hp = HyperParams {
            seed,
            ..HyperParams::default()
        };
        let x = micro_image(seed * 3 + 1, 0.0);
        let y = micro_image(seed * 3 + 2, 0.15);
        let draws = DaDraws {
            z: Latent::new([0.3, -0.7, 1.1, 0.2]),
            z2: Latent::new([-0.9, 0.4, 0.0, 1.3]),
            reference: None,
        };
        Fixture {
            model,
            teacher,
            hp,
            x,
            y,
            target: one_hot(&micro_mask()),
            draws,
            z: Latent::new([0.5, 0.1, -0.4, 0.8]),
        }
    }

    /// Loss graph containing `term`, built from `model`.
    pub fn graph(&self, model: &Model<f64>, term: LossTerm) -> Result<LossGraph<f64>> {
        let hp = &self.hp;
        match term {
            LossTerm::Seg | LossTerm::StyleSeg => seg_losses(
                model,
                &self.x,
                &self.target,
                &DummyCode::Latent(self.z.clone()),
                hp,
            ),
            LossTerm::AdvG | LossTerm::Cycle | LossTerm::StyleDa | LossTerm::Div => da_losses(
                model,
                &self.y,
                Domain::Inter,
                Domain::Intra,
                &self.draws,
                hp.lambda_div,
                hp,
            ),
            LossTerm::AdvD => {
                let fake = da_fake(
                    model,
                    &self.y,
                    Domain::Inter,
                    Domain::Intra,
                    &self.draws,
                    hp.eps_adain,
                )?;
                disc_losses(model, &self.y, Domain::Inter, &fake, Domain::Intra)
            }
            LossTerm::SelfInter => {
                self_losses(model, &self.teacher, None, Some(&self.y), &self.z, hp)
            }
            LossTerm::SelfIntra => {
                self_losses(model, &self.teacher, Some(&self.x), None, &self.z, hp)
            }
            LossTerm::TotalG | LossTerm::TotalD => unreachable!("totals are not checked"),
        }
    }

    /// Value of `term` as a plain function of the parameters. The second fake of
    /// the diversity term is a constant, so it is computed from `self.model`.
    pub fn value(&self, model: &Model<f64>, term: LossTerm) -> f64 {
        if term == LossTerm::Div {
            let eps = self.hp.eps_adain;
            let second = DaDraws {
                z: self.draws.z2.clone(),
                z2: self.draws.z2.clone(),
                reference: None,
            };
            let fixed = da_fake(
                &self.model,
                &self.y,
                Domain::Inter,
                Domain::Intra,
                &second,
                eps,
            )
            .unwrap();
            let fake = da_fake(
                model,
                &self.y,
                Domain::Inter,
                Domain::Intra,
                &self.draws,
                eps,
            )
            .unwrap();
            return fake
                .data()
                .iter()
                .zip(fixed.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / fake.len() as f64;
        }
        self.graph(model, term).unwrap().bundle.get(term).unwrap()
    }

    pub fn analytic(&self, term: LossTerm) -> Gradients<f64> {
        let lg = self.graph(&self.model, term).unwrap();
        let v = lg.term(term).unwrap();
        lg.graph.backward(v).unwrap()
    }
}

fn perturbed(model: &Model<f64>, key: ParamKey, i: usize, delta: f64) -> Model<f64> {
    let mut m = model.clone();
    let store = m
        .stores_mut()
        .into_iter()
        .find(|s| s.id() == key.store)
        .expect("store");
    store.tensors_mut()[key.index as usize].data_mut()[i] += delta;
    m
}

#[derive(Debug)]
pub struct Check {
    pub key: ParamKey,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central differences at `count` parameters drawn uniformly from those that
/// the analytic pass reaches.
pub fn gradcheck(fx: &Fixture, term: LossTerm, count: usize, seed: u64) -> Vec<Check> {
    let grads = fx.analytic(term);
    let slots: Vec<(ParamKey, usize)> = grads
        .iter()
        .flat_map(|(k, g)| (0..g.len()).map(move |i| (*k, i)))
        .collect();
    assert!(!slots.is_empty(), "{term} reaches no parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (key, i) = slots[rng.random_range(0..slots.len())];
            let analytic = grads.get(key).unwrap()[i];
            let up = fx.value(&perturbed(&fx.model, key, i, FD_STEP), term);
            let down = fx.value(&perturbed(&fx.model, key, i, -FD_STEP), term);
            let numeric = (up - down) / (2.0 * FD_STEP);
            Check {
                key,
                index: i,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            }
        })
        .collect()
}

pub const CHECKED_TERMS: [LossTerm; 9] = [
    LossTerm::Seg,
    LossTerm::StyleSeg,
    LossTerm::AdvG,
    LossTerm::AdvD,
    LossTerm::Cycle,
    LossTerm::StyleDa,
    LossTerm::Div,
    LossTerm::SelfInter,
    LossTerm::SelfIntra,
];

fn pixel_counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let (mut both, mut na, mut nb) = (0, 0, 0);
    for i in 0..a.height() {
        for j in 0..a.width() {
            let (x, y) = (a.get(i, j), b.get(i, j));
            both += usize::from(x && y);
            na += usize::from(x);
            nb += usize::from(y);
        }
    }
    (both, na, nb)
}

/// Dice by pixel counting; two empty masks agree perfectly.
pub fn oracle_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (both, na, nb) = pixel_counts(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

pub fn oracle_tpr(pred: &BinaryMask, abnormal: &BinaryMask) -> Option<f64> {
    let (both, _, n) = pixel_counts(pred, abnormal);
    (n > 0).then(|| both as f64 / n as f64)
}

/// Component labels by repeated min-propagation until nothing changes.
fn oracle_labels(m: &BinaryMask, value: bool) -> Vec<Option<usize>> {
    let (h, w) = (m.height(), m.width());
    let mut lab: Vec<Option<usize>> = (0..h * w)
        .map(|p| (m.data()[p] == value).then_some(p))
        .collect();
    loop {
        let mut changed = false;
        for p in 0..h * w {
            let Some(l) = lab[p] else { continue };
            let (i, j) = (p / w, p % w);
            let mut best = l;
            let mut nb = Vec::new();
            if i > 0 {
                nb.push(p - w);
            }
            if i + 1 < h {
                nb.push(p + w);
            }
            if j > 0 {
                nb.push(p - 1);
            }
            if j + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if let Some(lq) = lab[q] {
                    best = best.min(lq);
                }
            }
            if best != l {
                lab[p] = Some(best);
                changed = true;
            }
        }
        if !changed {
            return lab;
        }
    }
}

pub fn oracle_postprocess(m: &BinaryMask) -> Vec<bool> {
    let (h, w) = (m.height(), m.width());
    let lab = oracle_labels(m, true);
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    for l in lab.iter().flatten() {
        match sizes.iter_mut().find(|s| s.0 == *l) {
            Some(s) => s.1 += 1,
            None => sizes.push((*l, 1)),
        }
    }
    // Larger first; ties go to the component seen first in raster order.
    sizes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: Vec<usize> = sizes.iter().take(2).map(|s| s.0).collect();
    let kept: Vec<bool> = lab
        .iter()
        .map(|l| l.is_some_and(|l| keep.contains(&l)))
        .collect();
    let kept_mask = BinaryMask::new(h, w, kept.clone()).unwrap();
    let bg = oracle_labels(&kept_mask, false);
    let border: Vec<usize> = (0..h * w)
        .filter(|&p| p / w == 0 || p / w == h - 1 || p % w == 0 || p % w == w - 1)
        .filter_map(|p| bg[p])
        .collect();
    (0..h * w)
        .map(|p| kept[p] || bg[p].is_some_and(|l| !border.contains(&l)))
        .collect()
}
