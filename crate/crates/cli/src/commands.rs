//! Subcommand implementations, independent of argument parsing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaseg_core::codespace::Domain;
use adaseg_core::data::{
    apply_shift, preprocess, resize_nearest, synthesize_dataset, DatasetManifest, ManifestRecord,
    ShiftLevel, Split, SynthSpec,
};
use adaseg_core::networks::Model;
use adaseg_core::pipeline::{
    dice, lung_intensity_stats, postprocess, segment, segment_via_adaptation, tpr, InferencePath,
    MetricsRow,
};
use adaseg_core::training::{run_schedule, ModelState, Observer, StepRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, IoContext, Result};
use crate::manifest::{
    load_dataset, read_manifest, read_mask, read_raw, resolve, training_data, write_image16,
    write_manifest, write_mask,
};
use crate::report::{emit_report, rows_from_csv, ReportFiles};

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).at(p)
}

/// Renders the synthetic dataset as 16-bit images, 8-bit masks and a manifest.
/// INTER training masks are not written.
pub fn synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    let ds = synthesize_dataset(spec)?;
    for sub in ["images", "masks", "abnormal"] {
        mkdir(&out.join(sub))?;
    }
    let mut records = Vec::new();
    for r in &ds.records {
        let image = format!("images/{}.png", r.id);
        write_image16(&out.join(&image), &r.image)?;
        let hidden = r.domain == Domain::Inter && r.split == Split::Train;
        let mask = (!hidden).then(|| format!("masks/{}.png", r.id));
        if let Some(m) = &mask {
            write_mask(&out.join(m), &r.mask)?;
        }
        let abnormal = match (&r.abnormal, hidden) {
            (Some(a), false) => {
                let p = format!("abnormal/{}.png", r.id);
                write_mask(&out.join(&p), a)?;
                Some(p)
            }
            _ => None,
        };
        records.push(ManifestRecord {
            image,
            mask,
            domain: r.domain,
            split: r.split,
            abnormal,
        });
    }
    let path = out.join("manifest.csv");
    write_manifest(
        &path,
        &DatasetManifest {
            records,
            depth: Some(16),
        },
    )?;
    Ok(path)
}

/// Writes the loss log, periodic and best checkpoints.
struct TrainLog {
    out: PathBuf,
    config: RunConfig,
    log: BufWriter<File>,
    aborted: usize,
    error: Option<CliError>,
}

impl TrainLog {
    fn keep<T>(&mut self, r: Result<T>) -> adaseg_core::Result<()> {
        match r {
            Ok(_) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(adaseg_core::Error::Data(msg))
            }
        }
    }
}

impl Observer<f32> for TrainLog {
    fn on_step(&mut self, r: &StepRecord) -> adaseg_core::Result<()> {
        let losses: serde_json::Map<String, serde_json::Value> = r
            .losses
            .iter()
            .map(|(t, v)| (t.as_str().to_string(), json!(v)))
            .collect();
        let line = json!({
            "iteration": r.iteration,
            "phase": r.phase.as_str(),
            "task": r.task.as_str(),
            "lr": r.learning_rate,
            "aborted": r.aborted,
            "losses": losses,
        });
        if r.aborted {
            self.aborted += 1;
            eprintln!(
                "warning: non-finite step {} ({}) skipped",
                r.iteration, r.task
            );
        }
        let res = writeln!(self.log, "{line}").at(&self.out.join("losses.ndjson"));
        self.keep(res)
    }

    fn on_eval(
        &mut self,
        s: &ModelState<f32>,
        dice: f64,
        improved: bool,
    ) -> adaseg_core::Result<()> {
        eprintln!(
            "iteration {}: validation dice {dice:.4}{}",
            s.iteration,
            if improved { " (best)" } else { "" }
        );
        if improved {
            let res = checkpoint::save(&self.out.join("best.ckpt"), &self.config, s);
            return self.keep(res);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, s: &ModelState<f32>) -> adaseg_core::Result<()> {
        let res = self.log.flush().at(&self.out).and_then(|_| {
            checkpoint::save(
                &self.out.join(format!("iter_{:07}.ckpt", s.iteration)),
                &self.config,
                s,
            )
        });
        self.keep(res)
    }
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub summary: PathBuf,
    pub best_iteration: Option<u64>,
}

pub fn train(
    config: &RunConfig,
    manifest: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    let started = Instant::now();
    let hp = config.hyper_params();
    let state = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.config.model() != config.model() {
                return Err(CliError::Config(format!(
                    "{} was trained with a different architecture",
                    p.display()
                )));
            }
            ck.state
        }
        None => ModelState::new(&config.model(), &hp)?,
    };
    let m = read_manifest(manifest)?;
    let records = load_dataset(&m, &base_dir(manifest), config.img_size, hp.seed)?;
    let data = training_data(&records)?;
    mkdir(out)?;
    let log_path = out.join("losses.ndjson");
    let log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .at(&log_path)?;
    let mut obs = TrainLog {
        out: out.to_path_buf(),
        config: config.clone(),
        log: BufWriter::new(log),
        aborted: 0,
        error: None,
    };
    let outcome = run_schedule(state, &data, &hp, &mut obs);
    if let Some(e) = obs.error.take() {
        return Err(e);
    }
    let outcome = outcome?;
    obs.log.flush().at(&log_path)?;
    if !outcome.state.model.all_finite() {
        return Err(CliError::Numeric("parameters became non-finite".into()));
    }
    if obs.aborted * 2 > outcome.records.len() {
        return Err(CliError::Numeric(format!(
            "{} of {} steps had non-finite losses",
            obs.aborted,
            outcome.records.len()
        )));
    }
    let final_checkpoint = out.join("final.ckpt");
    checkpoint::save(&final_checkpoint, config, &outcome.state)?;
    let best = outcome.state.best;
    let summary = json!({
        "final_iteration": outcome.state.iteration,
        "final_validation_dice": outcome.validation.last().map(|v| v.1),
        "best_iteration": best.map(|b| b.iteration),
        "best_validation_dice": best.map(|b| b.score),
        "best_phase": best.map(|b| b.phase.as_str()),
        "validation": outcome.validation,
        "aborted_steps": obs.aborted,
        "wall_time_s": started.elapsed().as_secs_f64(),
        "parameter_counts": outcome.state.model.parameter_counts().iter().map(|(n, c)| json!({ "module": n, "parameters": c })).collect::<Vec<_>>(),
    });
    let summary_path = out.join("summary.json");
    fs::write(
        &summary_path,
        format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).expect("json")
        ),
    )
    .at(&summary_path)?;
    Ok(TrainSummary {
        final_checkpoint,
        summary: summary_path,
        best_iteration: best.map(|b| b.iteration),
    })
}

/// Options of [`infer`].
#[derive(Clone, Debug)]
pub struct InferOptions {
    pub path: InferencePath,
    pub postprocess: bool,
    pub split: Option<Split>,
    pub save_adapted: bool,
}

/// Segments every manifest image and writes `<stem>.png` masks into `out`.
pub fn infer(ck: &Checkpoint, manifest: &Path, out: &Path, opts: &InferOptions) -> Result<usize> {
    let hp = ck.config.hyper_params();
    let codes = ck.state.prebuild(&hp)?;
    let m = read_manifest(manifest)?;
    let records = load_dataset(&m, &base_dir(manifest), ck.config.img_size, hp.seed)?;
    mkdir(out)?;
    let mut n = 0;
    for r in records
        .iter()
        .filter(|r| opts.split.is_none_or(|s| r.record.split == s))
    {
        let mut mask = if opts.save_adapted && opts.path == InferencePath::ViaAdaptation {
            let (mask, adapted) =
                segment_via_adaptation(&ck.state.model, &codes, &r.image, hp.eps_adain)?;
            write_image16(&out.join(format!("{}_adapted.png", r.id())), &adapted)?;
            mask
        } else {
            segment(&ck.state.model, &codes, &r.image, opts.path, hp.eps_adain)?
        };
        if opts.postprocess {
            mask = postprocess(&mask);
        }
        write_mask(&out.join(format!("{}.png", r.id())), &mask)?;
        n += 1;
    }
    Ok(n)
}

/// Applies a shift level to every image; masks are referenced in place.
pub fn shift(
    manifest: &Path,
    level: ShiftLevel,
    seed: u64,
    size: Option<usize>,
    out: &Path,
) -> Result<PathBuf> {
    let m = read_manifest(manifest)?;
    let base = base_dir(manifest);
    mkdir(&out.join("images"))?;
    let abs = |p: &Option<String>| -> Result<Option<String>> {
        p.as_ref()
            .map(|p| {
                fs::canonicalize(resolve(&base, p))
                    .at(&resolve(&base, p))
                    .map(|a| a.to_string_lossy().into_owned())
            })
            .transpose()
    };
    let mut records = Vec::new();
    for (k, rec) in m.records.iter().enumerate() {
        let raw = read_raw(&resolve(&base, &rec.image), m.depth)?;
        let side = match size {
            Some(s) => s,
            None if raw.height == raw.width => raw.height,
            None => {
                return Err(CliError::Config(format!(
                    "{} is not square; pass --size",
                    rec.image
                )))
            }
        };
        let img = preprocess(&raw, side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let shifted = apply_shift(&img, level, &mut rng);
        let stem = Path::new(&rec.image)
            .file_stem()
            .map_or_else(|| format!("{k}"), |s| s.to_string_lossy().into_owned());
        let image = format!("images/{stem}.png");
        write_image16(&out.join(&image), &shifted)?;
        records.push(ManifestRecord {
            image,
            mask: abs(&rec.mask)?,
            domain: rec.domain,
            split: rec.split,
            abnormal: abs(&rec.abnormal)?,
        });
    }
    let path = out.join("manifest.csv");
    write_manifest(
        &path,
        &DatasetManifest {
            records,
            depth: Some(16),
        },
    )?;
    Ok(path)
}

/// Scores predicted masks in `pred_dir` against the manifest's ground truth.
pub fn eval(
    pred_dir: &Path,
    manifest: &Path,
    level: ShiftLevel,
    split: Option<Split>,
    out: &Path,
) -> Result<ReportFiles> {
    let m = read_manifest(manifest)?;
    let base = base_dir(manifest);
    let mut rows = Vec::new();
    for rec in m
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
    {
        let Some(gt_path) = &rec.mask else { continue };
        let stem = Path::new(&rec.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let pred_path = pred_dir.join(format!("{stem}.png"));
        if !pred_path.exists() {
            return Err(CliError::Data(format!(
                "record {}: no prediction {}",
                rec.image,
                pred_path.display()
            )));
        }
        let pred = read_mask(&pred_path)?;
        let (h, w) = (pred.height(), pred.width());
        if h != w {
            return Err(CliError::Data(format!(
                "{}: prediction is not square",
                pred_path.display()
            )));
        }
        let gt = resize_nearest(&read_mask(&resolve(&base, gt_path))?, h, w);
        let image = preprocess(&read_raw(&resolve(&base, &rec.image), m.depth)?, h)?;
        let abnormal = rec
            .abnormal
            .as_ref()
            .map(|p| read_mask(&resolve(&base, p)).map(|a| resize_nearest(&a, h, w)))
            .transpose()?;
        let tpr_v = match &abnormal {
            Some(a) if a.count() > 0 => Some(tpr(&pred, a)?),
            _ => None,
        };
        rows.push(MetricsRow {
            id: stem,
            domain: rec.domain,
            shift: level,
            dice: Some(dice(&pred, &gt)?),
            tpr: tpr_v,
            intensity: lung_intensity_stats::<f32>(&image, &gt).ok(),
        });
    }
    emit_report(&rows, out)
}

/// Re-renders tables and plots from an emitted metrics table (several may be concatenated).
pub fn report(tables: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let mut rows = Vec::new();
    for t in tables {
        rows.extend(rows_from_csv(&fs::read_to_string(t).at(t)?)?);
    }
    emit_report(&rows, out)
}

/// `module,parameters` table with a total line.
pub fn params_table(model: &Model<f32>) -> String {
    let counts = model.parameter_counts();
    let mut s = String::from("module,parameters\n");
    for (n, c) in counts {
        s.push_str(&format!("{n},{c}\n"));
    }
    s.push_str(&format!(
        "total,{}\n",
        counts.iter().map(|c| c.1).sum::<usize>()
    ));
    s
}
