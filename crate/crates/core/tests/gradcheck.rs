mod common;

use adaseg_core::losses::LossTerm;
use common::{gradcheck, Fixture, CHECKED_TERMS, REL_TOL};

fn check(term: LossTerm) {
    let fx = Fixture::new(1);
    let checks = gradcheck(&fx, term, 20, 100 + term as u64);
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .unwrap();
    assert!(worst.rel_err <= REL_TOL, "{term}: {worst:?}");
}

#[test]
fn seg_gradients() {
    check(LossTerm::Seg);
}

#[test]
fn style_seg_gradients() {
    check(LossTerm::StyleSeg);
}

#[test]
fn adversarial_generator_gradients() {
    check(LossTerm::AdvG);
}

#[test]
fn adversarial_discriminator_gradients() {
    check(LossTerm::AdvD);
}

#[test]
fn cycle_gradients() {
    check(LossTerm::Cycle);
}

#[test]
fn adaptation_style_gradients() {
    check(LossTerm::StyleDa);
}

#[test]
fn diversity_gradients() {
    check(LossTerm::Div);
}

#[test]
fn self_inter_gradients() {
    check(LossTerm::SelfInter);
}

#[test]
fn self_intra_gradients() {
    check(LossTerm::SelfIntra);
}

#[test]
fn every_term_is_covered() {
    let fx = Fixture::new(2);
    for term in CHECKED_TERMS {
        assert!(
            fx.graph(&fx.model, term).unwrap().term(term).is_some(),
            "{term}"
        );
    }
}
