//! Acceptance suite: one line per criterion.
//!
//! Run a subset by passing criterion numbers, e.g. `cargo test --test acceptance -- 1 3`.
//! Failures are reported but only fail the process when `ACCEPTANCE_STRICT` is set.

mod common;

use std::time::{Duration, Instant};

use adaseg_core::autograd::Graph;
use adaseg_core::codespace::{
    build_code_table, prebuild_inference_codes, resolve_code, CodeMode, CodeSource, Domain,
    HyperParams, Latent, TaskName,
};
use adaseg_core::data::{
    apply_shift_with, synthesize_dataset, EvalImage, ShiftLevel, Split, SynthSpec, TrainingData,
};
use adaseg_core::losses::self_losses;
use adaseg_core::networks::{
    adain_forward, generate, Model, ModelConfig, STORE_F_DEC, TEACHER_OFFSET,
};
use adaseg_core::pipeline::{
    dice, evaluate, mean_dice, postprocess, tpr, BinaryMask, CodeChoice, EvalOptions, InferencePath,
};
use adaseg_core::tensor::Tensor;
use adaseg_core::training::{
    run_schedule, run_until, sample_task, step_rng, train_step, ModelState, Phase, Silent,
    TaskPolicy,
};
use common::{
    gradcheck, oracle_dice, oracle_postprocess, oracle_tpr, Fixture, CHECKED_TERMS, REL_TOL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

fn adain_statistics() -> Verdict {
    const EPS: f64 = 1e-5;
    let start = Instant::now();
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n) = (16, 32 * 32);
        let mut data = Vec::with_capacity(c * n);
        let mut stats = Vec::with_capacity(c);
        for _ in 0..c {
            let (scale, shift) = (rng.random_range(0.01..3.0), rng.random_range(-2.0..2.0));
            let ch: Vec<f64> = (0..n)
                .map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            stats.push(var);
            data.extend(ch);
        }
        let f: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[c, 32, 32], data).unwrap();
        let out = adain_forward(
            &x,
            &Tensor::new(&[c], f.clone()).unwrap(),
            &Tensor::new(&[c], g.clone()).unwrap(),
            EPS,
        )
        .unwrap();
        for k in 0..c {
            let ch = &out.data()[k * n..(k + 1) * n];
            let m = ch.iter().sum::<f64>() / n as f64;
            let v = ch.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / n as f64;
            let want = f[k] * stats[k].sqrt() / (stats[k] + EPS).sqrt();
            worst_mean = worst_mean.max((m - g[k]).abs());
            worst_std = worst_std.max((v.sqrt() - want).abs());
        }
    }
    let t = start.elapsed();
    verdict(
        worst_mean <= 1e-4 && worst_std <= 1e-3 && within(Duration::from_secs(10), t),
        format!(
            "max mean error {worst_mean:.2e}, max std error {worst_std:.2e}, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let fx = Fixture::new(1);
    let mut worst = (0.0f64, String::new());
    for term in CHECKED_TERMS {
        let checks = gradcheck(&fx, term, 20, 100 + term as u64);
        assert_eq!(checks.len(), 20);
        for c in checks {
            if c.rel_err > worst.0 {
                worst = (c.rel_err, term.to_string());
            }
        }
    }
    let t = start.elapsed();
    verdict(
        worst.0 <= REL_TOL && within(Duration::from_secs(300), t),
        format!(
            "{} terms x 20 parameters, worst relative error {:.2e} ({}), {:.1}s",
            CHECKED_TERMS.len(),
            worst.0,
            worst.1,
            t.as_secs_f64()
        ),
    )
}

fn code_table() -> Verdict {
    use CodeMode::{Fixed01, Learnable};
    use Domain::{Inter, Intra, Mask};
    let fixture = [
        ("seg", Intra, Mask, Fixed01, Fixed01),
        ("seg_dummy", Intra, Mask, Fixed01, Learnable),
        ("da_x", Inter, Intra, Fixed01, Learnable),
        ("da_y", Intra, Inter, Fixed01, Learnable),
        ("self", Inter, Mask, Learnable, Fixed01),
    ];
    let table = build_code_table();
    let table_ok = table.len() == fixture.len()
        && table.iter().zip(fixture).all(|(r, (n, s, t, e, d))| {
            r.name.as_str() == n
                && (r.source, r.target, r.encoder_mode, r.decoder_mode) == (s, t, e, d)
        });

    let mut bitwise = true;
    for (cfg, seed) in [(ModelConfig::micro32(), 4), (ModelConfig::desk(), 7)] {
        let model = Model::<f32>::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.img_size * cfg.img_size;
        let x = Tensor::new(
            &[1, cfg.img_size, cfg.img_size],
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let codes = resolve_code(&model, TaskName::Seg.code(), &CodeSource::None).unwrap();
        for head in Domain::ALL {
            let a = generate(&model, &x, &codes, head, 1e-5).unwrap();
            let mut g = Graph::new();
            let p = model.generator.params.bind(&mut g, false);
            let xv = g.input(x.clone());
            let out = model
                .generator
                .forward_instance_norm(&mut g, &p, xv, head, 1e-5)
                .unwrap();
            let b = g.value(out);
            bitwise &= a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(u, v)| u.to_bits() == v.to_bits());
        }
    }
    verdict(
        table_ok && bitwise,
        format!(
            "table fixture {}, fixed01 vs instance norm bitwise {}",
            ok(table_ok),
            ok(bitwise)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "equal"
    } else {
        "DIFFERENT"
    }
}

fn micro_data() -> TrainingData<f64> {
    use adaseg_core::data::{one_hot, LabeledImage, UnlabeledImage};
    let m = common::micro_mask();
    TrainingData {
        intra: (0..3)
            .map(|k| LabeledImage {
                image: common::micro_image(k, 0.0),
                target: one_hot(&m),
            })
            .collect(),
        inter: (0..3)
            .map(|k| UnlabeledImage {
                image: common::micro_image(10 + k, 0.2),
            })
            .collect(),
        val: vec![EvalImage {
            id: "v".into(),
            domain: Domain::Inter,
            image: common::micro_image(20, 0.2),
            mask: m,
            abnormal: None,
        }],
    }
}

fn frozen_teacher() -> Verdict {
    let hp = HyperParams {
        learning_rate: 1e-3,
        iters_joint: 5,
        iters_self: 100,
        prebuild_samples: 8,
        eval_interval: 0,
        checkpoint_interval: 0,
        seed: 2,
        ..HyperParams::default()
    };
    let data = micro_data();
    let st = ModelState::<f64>::new(&ModelConfig::micro(), &hp).unwrap();
    let mut st = run_until(st, &data, &hp, 5, &mut Silent).unwrap().state;
    let (mut hash_constant, mut teacher_zero, mut f_dec_zero, mut moved) = (true, true, true, true);
    let mut first = None;
    for _ in 0..100 {
        let mut rng = step_rng(hp.seed, st.iteration);
        let sample = sample_task(
            &mut rng,
            Phase::SelfSup,
            data.intra.len(),
            data.inter.len(),
            1,
            TaskPolicy::Standard,
        )
        .unwrap();
        let before = st.model.fingerprint();
        train_step(&mut st, &sample, &data, &hp).unwrap();
        moved &= st.model.fingerprint() != before;
        let teacher = st.teacher.as_ref().unwrap();
        let fp = teacher.fingerprint();
        hash_constant &= teacher.current_fingerprint() == fp && *first.get_or_insert(fp) == fp;

        let z = Latent::sample(&mut rng);
        let lg = self_losses(
            &st.model,
            teacher,
            Some(&data.inter[0].image),
            Some(&data.intra[0].image),
            &z,
            &hp,
        )
        .unwrap();
        let grads = lg.graph.backward(lg.total.unwrap()).unwrap();
        for (k, gr) in grads.iter() {
            if k.store >= TEACHER_OFFSET {
                teacher_zero &= gr.iter().all(|&v| v == 0.0);
            }
            if k.store == STORE_F_DEC {
                f_dec_zero &= gr.iter().all(|&v| v == 0.0);
            }
        }
    }
    verdict(
        hash_constant && teacher_zero && f_dec_zero && moved,
        format!(
            "100 self steps: teacher hash constant {hash_constant}, teacher gradients zero {teacher_zero}, F_d gradients zero {f_dec_zero}, student updated every step {moved}"
        ),
    )
}

fn desk_eval(
    model: &Model<f32>,
    hp: &HyperParams,
    set: &[EvalImage<f32>],
    path: InferencePath,
    shift: ShiftLevel,
) -> f64 {
    let codes = prebuild_inference_codes(model, hp.prebuild_samples, hp.seed).unwrap();
    let opts = EvalOptions {
        path,
        shift,
        postprocess: true,
        seed: 1000 + hp.seed,
        eps: hp.eps_adain,
    };
    mean_dice(&evaluate(model, &codes, set, &opts).unwrap())
}

fn supervised_overfit() -> Verdict {
    let start = Instant::now();
    let spec = SynthSpec {
        n_train: 10,
        n_val: 1,
        n_test: 1,
        seed: 11,
        ..SynthSpec::default()
    };
    let ds = synthesize_dataset(&spec).unwrap();
    let mut data = ds.training_data::<f32>();
    data.val.clear();
    let train = ds.eval_set::<f32>(Domain::Intra, Split::Train);
    let hp = HyperParams {
        iters_joint: 2000,
        iters_self: 0,
        supervised_only: true,
        prebuild_samples: 1,
        eval_interval: 0,
        checkpoint_interval: 0,
        seed: 11,
        ..HyperParams::default()
    };
    let mut st = ModelState::<f32>::new(&ModelConfig::desk(), &hp).unwrap();
    let mut score = 0.0;
    while st.iteration < 2000 {
        let stop = st.iteration + 250;
        st = run_until(st, &data, &hp, stop, &mut Silent).unwrap().state;
        score = desk_eval(
            &st.model,
            &hp,
            &train,
            InferencePath::Direct(CodeChoice::Seg),
            ShiftLevel::None,
        );
        if score >= 0.95 {
            break;
        }
    }
    let t = start.elapsed();
    verdict(
        score >= 0.95 && within(Duration::from_secs(900), t),
        format!(
            "{} images, Dice {score:.4} after {} iterations, {:.0}s",
            train.len(),
            st.iteration,
            t.as_secs_f64()
        ),
    )
}

struct SeedResult {
    student: [f64; 2],
    baseline: [f64; 2],
}

fn desk_run(seed: u64) -> SeedResult {
    let ds = synthesize_dataset(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let data = ds.training_data::<f32>();
    let test = ds.eval_set::<f32>(Domain::Inter, Split::Test);
    let student_hp = HyperParams {
        iters_joint: 2000,
        iters_self: 500,
        prebuild_samples: 200,
        eval_interval: 500,
        checkpoint_interval: 0,
        seed,
        ..HyperParams::default()
    };
    let baseline_hp = HyperParams {
        iters_self: 0,
        supervised_only: true,
        ..student_hp.clone()
    };
    let mut scores = Vec::new();
    for (hp, path) in [
        (student_hp, CodeChoice::SelfCode),
        (baseline_hp, CodeChoice::Seg),
    ] {
        let st = ModelState::<f32>::new(&ModelConfig::desk(), &hp).unwrap();
        let out = run_schedule(st, &data, &hp, &mut Silent).unwrap();
        let model = out.best_model.unwrap_or(out.state.model);
        let path = InferencePath::Direct(path);
        scores.push([
            desk_eval(&model, &hp, &test, path, ShiftLevel::None),
            desk_eval(&model, &hp, &test, path, ShiftLevel::Harsh),
        ]);
    }
    SeedResult {
        student: scores[0],
        baseline: scores[1],
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_runs(cache: &mut Option<(Vec<SeedResult>, Duration)>) -> &(Vec<SeedResult>, Duration) {
    cache.get_or_insert_with(|| {
        let start = Instant::now();
        let runs = (0..3).map(desk_run).collect();
        (runs, start.elapsed())
    })
}

fn distillation(runs: &[SeedResult], elapsed: Duration) -> Verdict {
    let student = median(runs.iter().map(|r| r.student[0]).collect());
    let baseline = median(runs.iter().map(|r| r.baseline[0]).collect());
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.student[0], r.baseline[0]))
        .collect();
    verdict(
        student >= baseline + 0.05 && student >= 0.80 && within(Duration::from_secs(3600), elapsed),
        format!(
            "median self-code Dice {student:.4} vs baseline {baseline:.4} (margin {:+.4}); per seed {}; {:.0}s",
            student - baseline,
            per_seed.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn shift_robustness(runs: &[SeedResult]) -> Verdict {
    let student = median(runs.iter().map(|r| r.student[0] - r.student[1]).collect());
    let baseline = median(runs.iter().map(|r| r.baseline[0] - r.baseline[1]).collect());
    verdict(
        student <= 0.15 && baseline > student,
        format!("median None->Harsh drop: student {student:.4}, baseline {baseline:.4}"),
    )
}

fn parameter_budget() -> Verdict {
    let start = Instant::now();
    let model = Model::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let g = model.parameter_counts()[0].1;
    let t = start.elapsed();
    verdict(
        (28_900_000..=39_100_000).contains(&g) && within(Duration::from_secs(10), t),
        format!("generator {g} parameters, {:.2}s", t.as_secs_f64()),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.random_range(0.1..0.9);
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut dice_ok, mut tpr_ok, mut post_ok, mut idem_ok) = (true, true, true, true);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..16), rng.random_range(2..16));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        dice_ok &= dice(&a, &b).unwrap() == oracle_dice(&a, &b);
        tpr_ok &= tpr(&a, &b).ok() == oracle_tpr(&a, &b);
        let once = postprocess(&a);
        post_ok &= once.data() == &oracle_postprocess(&a)[..];
        idem_ok &= postprocess(&once) == once;
    }
    verdict(
        dice_ok && tpr_ok && post_ok && idem_ok,
        format!(
            "50 pairs: dice {}, tpr {}; 50 masks: postprocess {}, idempotent {idem_ok}",
            ok(dice_ok),
            ok(tpr_ok),
            ok(post_ok)
        ),
    )
}

fn shift_contract() -> Verdict {
    // A large, well-spread image keeps the regression estimates tight.
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img: Tensor<f64> = Tensor::new(
        &[1, n, n],
        (0..n * n).map(|_| rng.random_range(-0.2..0.9)).collect(),
    )
    .unwrap();
    let x: Vec<f64> = img.data().to_vec();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var_x = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let mut lines = Vec::new();
    let mut pass = true;
    for level in [ShiftLevel::Weak, ShiftLevel::Harsh] {
        let r = level.scale_range();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ss, mut count) = (0.0, 0usize);
        let mut worst_fit = 0.0f64;
        for draw in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(draw);
            rng.set_stream(level as u64);
            let out = apply_shift_with(&img, r, level.noise_std(), &mut rng);
            // Recover both factors by least squares on the pre-clamp output.
            let um = out.unclamped.iter().sum::<f64>() / x.len() as f64;
            let beta = x
                .iter()
                .zip(&out.unclamped)
                .map(|(a, u)| (a - mean) * (u - um))
                .sum::<f64>()
                / var_x;
            let alpha = um / mean;
            worst_fit = worst_fit
                .max((beta - out.beta).abs())
                .max((alpha - out.alpha).abs());
            for f in [out.alpha, out.beta] {
                lo = lo.min(f);
                hi = hi.max(f);
            }
            for (a, u) in x.iter().zip(&out.unclamped) {
                let noise = u - out.beta * (a - mean) - out.alpha * mean;
                ss += noise * noise;
                count += 1;
            }
        }
        let std = (ss / count as f64).sqrt();
        let s = level.noise_std();
        let ok = lo >= 1.0 - r && hi <= 1.0 + r && (std - s).abs() <= 0.05 * s && worst_fit <= 0.05;
        pass &= ok;
        lines.push(format!("{level}: factors in [{lo:.3}, {hi:.3}], noise std {std:.4}, recovery error {worst_fit:.3}"));
    }
    verdict(pass, lines.join("; "))
}

fn determinism() -> Verdict {
    let ds = synthesize_dataset(&SynthSpec {
        n_train: 6,
        n_val: 2,
        n_test: 1,
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let data = ds.training_data::<f32>();
    let hp = HyperParams {
        iters_joint: 6,
        iters_self: 4,
        prebuild_samples: 16,
        eval_interval: 0,
        checkpoint_interval: 0,
        seed: 4,
        ..HyperParams::default()
    };
    let trace = || {
        let st = ModelState::<f32>::new(&ModelConfig::desk(), &hp).unwrap();
        let out = run_schedule(st, &data, &hp, &mut Silent).unwrap();
        let losses: Vec<(u64, u64)> = out
            .records
            .iter()
            .flat_map(|r| {
                r.losses
                    .iter()
                    .map(move |(t, v)| (r.iteration * 64 + t as u64, v.to_bits()))
            })
            .collect();
        (out.records.len(), losses, out.state.model.fingerprint())
    };
    let (a, b) = (trace(), trace());
    verdict(
        a == b && a.0 == 10,
        format!(
            "{} steps, {} loss values, traces identical {}",
            a.0,
            a.1.len(),
            a == b
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut cache = None;
    let mut failed = 0;
    let mut ran = 0;
    for n in 1..=11 {
        if !selected(n) {
            continue;
        }
        let (name, v) = match n {
            1 => ("adain statistics", adain_statistics()),
            2 => ("gradient check", gradient_check()),
            3 => ("code table exactness", code_table()),
            4 => ("frozen teacher", frozen_teacher()),
            5 => ("supervised overfit", supervised_overfit()),
            6 => {
                let (runs, t) = desk_runs(&mut cache);
                ("distillation beats supervised-only", distillation(runs, *t))
            }
            7 => (
                "shift robustness",
                shift_robustness(&desk_runs(&mut cache).0),
            ),
            8 => ("parameter budget", parameter_budget()),
            9 => ("metric and post-processing oracles", metric_oracles()),
            10 => ("shift modulator contract", shift_contract()),
            _ => ("determinism", determinism()),
        };
        ran += 1;
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
