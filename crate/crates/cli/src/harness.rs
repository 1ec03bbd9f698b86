//! Monte-Carlo orchestration with persisted, resumable results.
//!
//! Run directory layout (versioned by [`RUN_SCHEMA`]):
//!
//! ```text
//! <out>/manifest.json        spec, config hash, seeds, versions, aggregates
//! <out>/summary.csv          one row per swept point
//! <out>/trials/PPP-TTTTT.json one record per (point, trial)
//! <out>/models/<name>.bin    checkpoints of trained models (+ .json sidecar)
//! ```
//!
//! Each trial draws its scene from its own substream and writes its own file,
//! so trials can run in any order on any number of workers. Completed trial
//! files are reused when a run is resumed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lowalt_core::learning::RefinerModel;
use serde::{Deserialize, Serialize};

use crate::binary::{dataset_hash, write_atomic};
use crate::checkpoint::{load_checkpoint, make_sidecar, save_checkpoint};
use crate::error::CliError;
use crate::pipeline::{draw_scene, reconstruct, train_refiner, trial_rng, Geometry, Method, TrialMetrics};
use crate::schema::{read_json, ExperimentKind, ExperimentSpec, TrainJson};

/// Version of the run-directory layout and manifest.
pub const RUN_SCHEMA: u32 = 1;

/// Largest tolerated fraction of failed trials.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// One swept point: the value, the method run there and the model it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub value: f64,
    pub label: String,
    pub method: Method,
    /// Key into [`Plan::models`].
    pub model: Option<String>,
}

/// A model the plan trains before any trial runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelJob {
    pub name: String,
    pub method: Method,
    pub train: TrainJson,
}

/// What a run computes.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub spec: ExperimentSpec,
    pub command: String,
    pub swept: String,
    pub points: Vec<Point>,
    pub models: Vec<ModelJob>,
}

impl Plan {
    /// The plan of `spec.experiment`.
    pub fn for_spec(spec: &ExperimentSpec, command: &str) -> Plan {
        let mut plan = Plan {
            spec: spec.clone(),
            command: command.into(),
            swept: spec.experiment.swept_name().into(),
            points: Vec::new(),
            models: Vec::new(),
        };
        match spec.experiment {
            ExperimentKind::SweepPower | ExperimentKind::SweepAntennas | ExperimentKind::SweepDistance => {
                plan.points = spec
                    .sweep
                    .iter()
                    .map(|&v| Point {
                        value: v,
                        label: format!("{v}"),
                        method: Method::Sp,
                        model: None,
                    })
                    .collect();
            }
            ExperimentKind::CompareOffgrid => {
                for (i, m) in Method::ALL.into_iter().enumerate() {
                    let model = m.prior(spec.solver.k_prior).map(|_| m.key().to_string());
                    if let Some(name) = &model {
                        plan.models.push(ModelJob {
                            name: name.clone(),
                            method: m,
                            train: spec.train.clone(),
                        });
                    }
                    plan.points.push(Point {
                        value: i as f64,
                        label: m.to_string(),
                        method: m,
                        model,
                    });
                }
            }
            ExperimentKind::SweepEta => {
                for &eta in &spec.sweep {
                    let name = format!("eta-{eta}");
                    plan.models.push(ModelJob {
                        name: name.clone(),
                        method: Method::ModelDnnMf,
                        train: TrainJson { eta, ..spec.train.clone() },
                    });
                    plan.points.push(Point {
                        value: eta,
                        label: format!("{eta}"),
                        method: Method::ModelDnnMf,
                        model: Some(name),
                    });
                }
            }
        }
        plan
    }

    /// A single SP point at the base configuration.
    pub fn single_sp(spec: &ExperimentSpec, command: &str) -> Plan {
        Plan {
            spec: spec.clone(),
            command: command.into(),
            swept: "method".into(),
            points: vec![Point {
                value: 0.0,
                label: Method::Sp.to_string(),
                method: Method::Sp,
                model: None,
            }],
            models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error of the mean; 0 for a single trial.
    pub stderr: f64,
}

impl Stat {
    /// Mean and standard error of `values`, independent of their order.
    pub fn of(values: &[f64]) -> Stat {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Stat { mean: f64::NAN, stderr: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub index: usize,
    pub value: f64,
    pub label: String,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mse: Stat,
    pub ssim: Stat,
    pub dr: Stat,
    pub fdr: Stat,
    pub l1_mass: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub method: Method,
    pub checkpoint: String,
    pub dataset_hash: String,
    pub best_epoch: usize,
}

/// The run manifest. Deliberately free of timestamps and host details, so
/// rerunning a manifest reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_trials: usize,
    pub experiment: ExperimentKind,
    pub swept: String,
    pub spec: ExperimentSpec,
    pub models: Vec<ModelSummary>,
    pub points: Vec<PointSummary>,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub config_hash: String,
    pub seed: u64,
    pub point: usize,
    pub value: f64,
    pub method: Method,
    pub trial: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TrialMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

pub fn trial_path(out: &Path, point: usize, trial: usize) -> PathBuf {
    out.join("trials").join(format!("{point:03}-{trial:05}.json"))
}

fn read_trial(path: &Path, hash: &str) -> Option<TrialRecord> {
    let rec: TrialRecord = read_json(path).ok()?;
    (rec.config_hash == hash).then_some(rec)
}

/// Trains (or reloads from `out/models`) every model of the plan.
type ModelSet = BTreeMap<String, RefinerModel<f32>>;

fn prepare_models(
    plan: &Plan,
    geom: &Geometry,
    out: &Path,
    hash: &str,
) -> Result<(ModelSet, Vec<ModelSummary>), CliError> {
    let mut models = BTreeMap::new();
    let mut summaries = Vec::new();
    for job in &plan.models {
        let path = out.join("models").join(format!("{}.bin", job.name));
        let prior = job.method.prior(plan.spec.solver.k_prior).expect("model jobs are learned methods");
        let reuse = match load_checkpoint(&path) {
            Ok((model, side)) if side.config_hash == hash && side.train == job.train => Some((model, side)),
            _ => None,
        };
        let (model, side) = match reuse {
            Some(found) => {
                log::info!("reusing checkpoint {}", path.display());
                found
            }
            None => {
                log::info!("training {} ({} scenes, {} epochs)", job.name, job.train.n_train_scenes, job.train.epochs);
                let name = job.name.clone();
                let trained = train_refiner(geom, &plan.spec, &job.train, prior, &mut |r| {
                    let v = r.validation.unwrap_or_default();
                    log::info!(
                        "{name} epoch {} lr {:.2e} train {:.5} val {:.5} ssim {:.4} dr {:.3} fdr {:.3}",
                        r.epoch,
                        r.learning_rate,
                        r.train_loss,
                        v.loss,
                        v.ssim,
                        v.dr,
                        v.fdr
                    );
                })?;
                let config = job.train.to_config(plan.spec.threshold);
                let side = make_sidecar(
                    &trained.outcome.model,
                    prior,
                    &job.train,
                    &config,
                    job.train.seed,
                    &dataset_hash(&trained.dataset, hash),
                    hash,
                    trained.outcome.best_epoch,
                );
                save_checkpoint(&path, &trained.outcome.model, &side)?;
                let trace = serde_json::to_vec_pretty(
                    &trained
                        .outcome
                        .trace
                        .iter()
                        .map(|r| {
                            let v = r.validation.unwrap_or_default();
                            serde_json::json!({
                                "epoch": r.epoch, "learning_rate": r.learning_rate, "train_loss": r.train_loss,
                                "val_loss": v.loss, "val_mse": v.mse, "val_ssim": v.ssim, "val_dr": v.dr,
                                "val_fdr": v.fdr, "val_l1_mass": v.l1_mass,
                            })
                        })
                        .collect::<Vec<_>>(),
                )
                .expect("trace serializes");
                write_atomic(&out.join("models").join(format!("{}.trace.json", job.name)), &trace)?;
                (trained.outcome.model, side)
            }
        };
        summaries.push(ModelSummary {
            name: job.name.clone(),
            method: job.method,
            checkpoint: format!("models/{}.bin", job.name),
            dataset_hash: side.dataset_hash.clone(),
            best_epoch: side.best_epoch,
        });
        models.insert(job.name.clone(), model);
    }
    Ok((models, summaries))
}

/// Runs every trial of `plan`, writing results under `out`, and returns the
/// manifest. Fails with [`CliError::TooManyFailures`] when more than 10% of
/// trials error; the manifest is written either way.
pub fn run_monte_carlo(plan: &Plan, out: &Path, opts: &RunOptions) -> Result<Manifest, CliError> {
    let spec = &plan.spec;
    spec.validate()?;
    let hash = spec.config_hash();
    let manifest_path = out.join("manifest.json");
    if let Ok(old) = read_json::<Manifest>(&manifest_path) {
        if old.config_hash != hash {
            return Err(CliError::ConfigMismatch {
                path: out.to_path_buf(),
                expected: hash,
                found: old.config_hash,
            });
        }
    }
    std::fs::create_dir_all(out.join("trials")).map_err(|e| CliError::io(out, e))?;

    // Models share the base geometry; only SP sweeps change it per point.
    let base = Geometry::new(spec.system_config(), spec.voxel_grid())?;
    let (models, model_summaries) = prepare_models(plan, &base, out, &hash)?;

    let n = spec.n_trials;
    let geoms: Vec<Option<Geometry>> = plan
        .points
        .iter()
        .map(|p| {
            let config = spec.system_at(p.value);
            if config == base.config {
                Ok(None)
            } else {
                Geometry::new(config, spec.voxel_grid()).map(Some)
            }
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, usize)> = (0..plan.points.len())
        .flat_map(|p| (0..n).map(move |t| (p, t)))
        .filter(|&(p, t)| {
            read_trial(&trial_path(out, p, t), &hash).is_none_or(|r| r.metrics.is_none())
        })
        .collect();
    log::info!("{} of {} trials to run", jobs.len(), plan.points.len() * n);

    let next = AtomicUsize::new(0);
    let first_io_error: Mutex<Option<CliError>> = Mutex::new(None);
    let workers = opts.workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(p, t)) = jobs.get(i) else { break };
                let point = &plan.points[p];
                let geom = geoms[p].as_ref().unwrap_or(&base);
                let model = point.model.as_ref().and_then(|k| models.get(k));
                let result = (|| {
                    let mut rng = trial_rng(spec.seed, t);
                    let (scene, y, noise_std) = draw_scene(geom, &spec.scenes, &mut rng)?;
                    reconstruct(
                        geom,
                        point.method,
                        spec.solver.k_prior,
                        spec.solver.max_iter,
                        spec.threshold,
                        model,
                        &scene,
                        &y,
                        noise_std,
                    )
                })();
                if let Err(e) = &result {
                    log::warn!("point {p} trial {t} failed: {e}");
                }
                let (metrics, error) = match result {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                let rec = TrialRecord {
                    config_hash: hash.clone(),
                    seed: spec.seed,
                    point: p,
                    value: point.value,
                    method: point.method,
                    trial: t,
                    metrics,
                    error,
                };
                let bytes = serde_json::to_vec_pretty(&rec).expect("records serialize");
                if let Err(e) = write_atomic(&trial_path(out, p, t), &bytes) {
                    first_io_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = first_io_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut points = Vec::with_capacity(plan.points.len());
    let mut n_failed = 0;
    for (p, point) in plan.points.iter().enumerate() {
        let mut ok: Vec<TrialMetrics> = Vec::with_capacity(n);
        let mut failed = 0;
        for t in 0..n {
            match read_trial(&trial_path(out, p, t), &hash).and_then(|r| r.metrics) {
                Some(m) => ok.push(m),
                None => failed += 1,
            }
        }
        n_failed += failed;
        let stat = |f: fn(&TrialMetrics) -> f64| Stat::of(&ok.iter().map(f).collect::<Vec<_>>());
        points.push(PointSummary {
            index: p,
            value: point.value,
            label: point.label.clone(),
            method: point.method,
            n_ok: ok.len(),
            n_failed: failed,
            mse: stat(|m| m.mse),
            ssim: stat(|m| m.ssim),
            dr: stat(|m| m.dr),
            fdr: stat(|m| m.fdr),
            l1_mass: stat(|m| m.l1_mass),
        });
    }

    let manifest = Manifest {
        schema: RUN_SCHEMA,
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: plan.command.clone(),
        config_hash: hash,
        seed: spec.seed,
        n_trials: n,
        experiment: spec.experiment,
        swept: plan.swept.clone(),
        spec: spec.clone(),
        models: model_summaries,
        points,
        n_failed,
    };
    write_atomic(
        &manifest_path,
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    write_atomic(&out.join("summary.csv"), summary_csv(std::slice::from_ref(&manifest), None).as_bytes())?;

    let total = plan.points.len() * n;
    if n_failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(CliError::TooManyFailures {
            failed: n_failed,
            total,
        });
    }
    Ok(manifest)
}

/// Flattens manifests into CSV with a fixed column order. The swept column
/// is named after the swept parameter when all manifests share it (e.g.
/// `eta`), and `value` otherwise. `runs` labels each manifest.
pub fn summary_csv(manifests: &[Manifest], runs: Option<&[String]>) -> String {
    let swept = match manifests.first() {
        Some(m) if manifests.iter().all(|x| x.swept == m.swept) => m.swept.clone(),
        _ => "value".into(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "run", "experiment", &swept, "label", "mse", "mse_se", "ssim", "ssim_se", "dr", "dr_se", "fdr", "fdr_se",
        "l1_mass", "l1_mass_se", "n_ok", "n_failed",
    ];
    w.write_record(header).expect("in-memory write");
    for (i, m) in manifests.iter().enumerate() {
        let run = runs.and_then(|r| r.get(i)).map_or(".", String::as_str);
        let experiment = serde_json::to_value(m.experiment).unwrap();
        for p in &m.points {
            let stats = [p.mse, p.ssim, p.dr, p.fdr, p.l1_mass].map(|st| [st.mean.to_string(), st.stderr.to_string()]);
            let mut row = vec![
                run.to_string(),
                experiment.as_str().unwrap_or("").to_string(),
                p.value.to_string(),
                p.label.clone(),
            ];
            row.extend(stats.into_iter().flatten());
            row.push(p.n_ok.to_string());
            row.push(p.n_failed.to_string());
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
}

/// Finds `manifest.json` files under `root` (sorted by path) and flattens them.
pub fn report(root: &Path) -> Result<String, CliError> {
    let mut found = Vec::new();
    collect_manifests(root, &mut found)?;
    found.sort();
    let mut manifests = Vec::with_capacity(found.len());
    let mut runs = Vec::with_capacity(found.len());
    for path in &found {
        manifests.push(read_json::<Manifest>(path)?);
        let dir = path.parent().unwrap_or(root);
        let rel = dir.strip_prefix(root).unwrap_or(dir);
        runs.push(if rel.as_os_str().is_empty() {
            ".".to_string()
        } else {
            rel.display().to_string()
        });
    }
    Ok(summary_csv(&manifests, Some(&runs)))
}

fn collect_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            CliError::io(&path, e.into())
        })?;
        if entry.file_type().is_file() && entry.file_name() == "manifest.json" {
            out.push(entry.into_path());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stat_of_constant_and_single() {
        assert_eq!(Stat::of(&[2.0]), Stat { mean: 2.0, stderr: 0.0 });
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.stderr - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn stat_is_order_independent(mut v in prop::collection::vec(-1e3f64..1e3, 1..50), seed in any::<u64>()) {
            let a = Stat::of(&v);
            use rand::seq::SliceRandom;
            v.shuffle(&mut lowalt_core::rng::seeded(seed));
            prop_assert_eq!(a, Stat::of(&v));
        }
    }

    #[test]
    fn compare_plan_has_five_rows_and_three_models() {
        let plan = Plan::for_spec(&ExperimentSpec::new(ExperimentKind::CompareOffgrid), "eval");
        assert_eq!(plan.points.len(), 5);
        assert_eq!(plan.models.len(), 3);
        assert!(plan.points.iter().all(|p| p.model.is_some() == p.method.prior(5).is_some()));
    }

    #[test]
    fn eta_plan_trains_one_model_per_value() {
        let mut spec = ExperimentSpec::new(ExperimentKind::SweepEta);
        spec.sweep = vec![1.0, 10.0, 30.0];
        let plan = Plan::for_spec(&spec, "sweep");
        let etas: Vec<f64> = plan.models.iter().map(|m| m.train.eta).collect();
        assert_eq!(etas, [1.0, 10.0, 30.0]);
        assert_eq!(plan.swept, "eta");
    }
}
