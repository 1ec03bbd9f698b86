use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lowalt::binary::{dataset_hash, measurement_csv, save_dataset, save_matrix, save_measurement, write_atomic};
use lowalt::checkpoint::{make_sidecar, save_checkpoint};
use lowalt::harness::{report, run_monte_carlo, Manifest, Plan, RunOptions};
use lowalt::pipeline::{dataset_spec, draw_scene, train_refiner, trial_rng, training_seed, Geometry};
use lowalt::schema::{load_spec, ExperimentKind, ExperimentSpec, SceneFile};
use lowalt::CliError;
use lowalt_core::channel::Measurement;
use lowalt_core::learning::{make_dataset, PriorKind};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lowalt", version, about = "Multi-BS ISAC imaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a normalized training dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Prior::Ahy)]
        prior: Prior,
        /// Number of scenes (default: train.n_train_scenes).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Build the sensing matrix and cache its gain table.
    BuildMatrix {
        #[command(flatten)]
        common: Common,
    },
    /// Subspace pursuit on independent scenes at the base configuration.
    RunSp {
        #[command(flatten)]
        common: Common,
    },
    /// Train one refiner and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Prior::Ahy)]
        prior: Prior,
    },
    /// Compare the five methods on off-grid scenes.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment named in the experiment file.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Flatten every manifest under a directory into CSV.
    Report {
        root: PathBuf,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Trials per swept point.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent trial workers (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Published scale: 1000 trials, 40×40 grid, 100k scenes × 200 epochs.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Ahy,
    Sp,
    Y,
}

impl Prior {
    fn kind(self, k_prior: usize) -> PriorKind {
        match self {
            Prior::Ahy => PriorKind::MatchedFilter,
            Prior::Sp => PriorKind::SubspacePursuit { k_prior },
            Prior::Y => PriorKind::RawMeasurement,
        }
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = load_spec(&self.spec)?;
        if self.full_scale {
            spec.full_scale();
        }
        if let Some(t) = self.trials {
            spec.n_trials = t;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn options(&self) -> RunOptions {
        let mut o = RunOptions::default();
        if let Some(w) = self.workers {
            o.workers = w.max(1);
        }
        o
    }
}

/// Manifest of commands that write artifacts rather than trial records.
#[derive(Serialize)]
struct ArtifactManifest<'a> {
    schema: u32,
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: String,
    seed: u64,
    spec: &'a ExperimentSpec,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_hash: Option<String>,
}

fn write_manifest(out: &Path, command: &str, spec: &ExperimentSpec, files: Vec<String>, dataset_hash: Option<String>) -> Result<(), CliError> {
    let m = ArtifactManifest {
        schema: lowalt::harness::RUN_SCHEMA,
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: spec.config_hash(),
        seed: spec.seed,
        spec,
        files,
        dataset_hash,
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&m).expect("manifest serializes"))
}

fn print_table(m: &Manifest) {
    println!("{:<16} {:>10} {:>8} {:>8} {:>8}", "Method", "MSE", "SSIM", "DR", "FDR");
    for p in &m.points {
        println!(
            "{:<16} {:>10.6} {:>8.4} {:>8.4} {:>8.4}",
            p.label, p.mse.mean, p.ssim.mean, p.dr.mean, p.fdr.mean
        );
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common, prior, scenes } => {
            let spec = common.load()?;
            let geom = Geometry::new(spec.system_config(), spec.voxel_grid())?;
            let hash = spec.config_hash();
            let kind = prior.kind(spec.solver.k_prior);
            let n = scenes.unwrap_or(spec.train.n_train_scenes);
            let d = make_dataset(&geom.setup(), &dataset_spec(&spec.scenes, n, kind, training_seed(spec.seed)), None)?;
            save_dataset(&common.out.join("dataset.bin"), &d, &hash)?;
            // One example scene and its CSI for inspection.
            let (scene, y, noise_std) = draw_scene(&geom, &spec.scenes, &mut trial_rng(spec.seed, 0))?;
            let m = Measurement {
                y,
                layout: lowalt_core::channel::MeasurementLayout::from_config(&geom.config),
                noise_std,
            };
            save_measurement(&common.out.join("example-measurement.bin"), &m, &hash)?;
            write_atomic(&common.out.join("example-measurement.csv"), measurement_csv(&m).as_bytes())?;
            let scene_json = SceneFile::new(&geom.config, &geom.grid, &scene.targets);
            write_atomic(
                &common.out.join("example-scene.json"),
                &serde_json::to_vec_pretty(&scene_json).expect("scene serializes"),
            )?;
            let files = ["dataset.bin", "example-measurement.bin", "example-measurement.csv", "example-scene.json"];
            write_manifest(
                &common.out,
                "gen-data",
                &spec,
                files.map(String::from).to_vec(),
                Some(dataset_hash(&d, &hash)),
            )?;
            println!("wrote {n} scenes to {}", common.out.display());
        }
        Command::BuildMatrix { common } => {
            let spec = common.load()?;
            let geom = Geometry::new(spec.system_config(), spec.voxel_grid())?;
            save_matrix(&common.out.join("matrix.bin"), &geom.matrix, &spec.config_hash())?;
            write_manifest(&common.out, "build-matrix", &spec, vec!["matrix.bin".into()], None)?;
            println!("{} x {} sensing matrix cached in {}", geom.matrix.nrows(), geom.matrix.ncols(), common.out.display());
        }
        Command::RunSp { common } => {
            let spec = common.load()?;
            let m = run_monte_carlo(&Plan::single_sp(&spec, "run-sp"), &common.out, &common.options())?;
            print_table(&m);
        }
        Command::Train { common, prior } => {
            let spec = common.load()?;
            let geom = Geometry::new(spec.system_config(), spec.voxel_grid())?;
            let hash = spec.config_hash();
            let kind = prior.kind(spec.solver.k_prior);
            let trained = train_refiner(&geom, &spec, &spec.train, kind, &mut |r| {
                let v = r.validation.unwrap_or_default();
                log::info!(
                    "epoch {} lr {:.2e} train {:.5} val {:.5} ssim {:.4} dr {:.3} fdr {:.3}",
                    r.epoch, r.learning_rate, r.train_loss, v.loss, v.ssim, v.dr, v.fdr
                );
            })?;
            let dhash = dataset_hash(&trained.dataset, &hash);
            let side = make_sidecar(
                &trained.outcome.model,
                kind,
                &spec.train,
                &spec.train_config(),
                spec.train.seed,
                &dhash,
                &hash,
                trained.outcome.best_epoch,
            );
            save_checkpoint(&common.out.join("model.bin"), &trained.outcome.model, &side)?;
            write_manifest(&common.out, "train", &spec, vec!["model.bin".into(), "model.json".into()], Some(dhash))?;
            println!("best epoch {} of {}", trained.outcome.best_epoch, spec.train.epochs);
        }
        Command::Eval { common } => {
            let mut spec = common.load()?;
            spec.experiment = ExperimentKind::CompareOffgrid;
            let m = run_monte_carlo(&Plan::for_spec(&spec, "eval"), &common.out, &common.options())?;
            print_table(&m);
        }
        Command::Sweep { common } => {
            let spec = common.load()?;
            let m = run_monte_carlo(&Plan::for_spec(&spec, "sweep"), &common.out, &common.options())?;
            print!("{}", lowalt::harness::summary_csv(std::slice::from_ref(&m), None));
        }
        Command::Report { root, out } => {
            let csv = report(&root)?;
            match out {
                Some(path) => write_atomic(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Schema { .. } | CliError::Invalid { .. } => ExitCode::from(2),
                CliError::TooManyFailures { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
