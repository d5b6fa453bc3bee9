//! Command-line surface: subcommands, run configuration and manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comgan::{self, Comgan, TrainConfig, TrainingManifest};
use crate::dataset::{self, fit_standardizer, split_by_rp, transform, Direction, FingerprintDatabase, Provenance, SplitSizes, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{self, digest_json, EvalReport, ExperimentConfig, ReportKind};
use crate::exec::Execution;
use crate::localizer::{self, LocalizerConfig, LocalizerKind};
use crate::refine;
use crate::rng;
use crate::scene::{build_database, Scene};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "RADIOMAP_SEED";

/// Everything an experiment run needs. Unset fields take their defaults.
///
/// Relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene JSON; the default indoor scene when unset.
    pub scene: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub samples_per_rp: usize,
    pub split: SplitSizes,
    pub train: TrainConfig,
    pub refine_k: usize,
    pub k_values: Vec<usize>,
    pub localizer: LocalizerConfig,
    pub test_keep: usize,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            scene: None,
            output_dir: PathBuf::from("runs"),
            samples_per_rp: e.samples_per_rp,
            split: e.split,
            train: e.train,
            refine_k: e.refine_k,
            k_values: e.k_values,
            localizer: e.localizer,
            test_keep: e.test_keep,
            bootstrap_resamples: e.bootstrap_resamples,
            ci_level: e.ci_level,
            seeds: e.seeds,
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            samples_per_rp: self.samples_per_rp,
            split: self.split.clone(),
            train: self.train.clone(),
            refine_k: self.refine_k,
            k_values: self.k_values.clone(),
            localizer: self.localizer.clone(),
            test_keep: self.test_keep,
            bootstrap_resamples: self.bootstrap_resamples,
            ci_level: self.ci_level,
            seeds: self.seeds.clone(),
        }
    }

    pub fn load_scene(&self) -> Result<Scene> {
        match &self.scene {
            Some(p) => Scene::load(p),
            None => Ok(Scene::default_indoor(0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.scene {
            if !p.exists() {
                return Err(Error::Config {
                    key: "scene".into(),
                    message: format!("{} does not exist", p.display()),
                });
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config {
                key: "seeds".into(),
                message: "at least one seed is required".into(),
            });
        }
        let l = self.load_scene()?.ru_count();
        self.experiment().validate(l)
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self.train.seed = seed;
        self.localizer.seed = seed;
        self
    }
}

/// Parses and validates a run config; an empty file gives the defaults.
///
/// Schema errors carry the dotted key path of the offending entry.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config`] without file access or validation.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            key: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

/// Provenance record written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_digest: String,
    /// The resolved configuration, enough to replay the run.
    pub config: serde_json::Value,
    /// Input path → content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::nn::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::nn::read_json(path)
    }
}

/// Git-style object hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    eval::hex(&h.finalize())
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Parser)]
#[command(name = "radiomap", version, about = "Radio-map completion and fingerprinting localization on synthetic scenes")]
pub struct Cli {
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Knn,
    Learned,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a fingerprint database from a scene.
    Simulate {
        /// Scene JSON; the default indoor scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 381)]
        samples_per_rp: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a database by RP into rss_train, rss_test and loc_test, plus rss_train's stats.
    Split {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// RP counts for the three parts.
        #[arg(long, value_delimiter = ',', default_values_t = [15, 15, 10])]
        sizes: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a completion model on a fully measured raw-dB database.
    Train {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train the variant without the auxiliary RP head.
        #[arg(long)]
        lite: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill every unmeasured entry with a single generator pass.
    Complete {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a hybrid database from K single-RU subsets.
    ///
    /// The RUs are `--rus`, or K drawn from those measured in every sample.
    /// Other measurements are dropped first.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, value_delimiter = ',')]
        rus: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a localizer on a database and locate query fingerprints (CSV rss_0..).
    Localize {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Learned)]
        kind: KindArg,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also save the fitted localizer.
        #[arg(long)]
        save_model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Completion quality and incomplete/full/hybrid localization over all seeds.
    Evaluate {
        /// Run config, or a manifest from an earlier run to replay it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Full vs lite model, refined vs unrefined hybrid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Localization RMSE over the configured K values.
    Ksweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a saved report as text.
    Report {
        report: PathBuf,
        /// Also write the K sweep as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let exec = match cli.jobs {
        Some(0) => {
            return Err(Error::Config {
                key: "--jobs".into(),
                message: "must be at least 1".into(),
            })
        }
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.jobs.filter(|&n| n > 1) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::contract(e.to_string()))?;
        return pool.install(|| dispatch(cli.command, exec));
    }
    dispatch(cli.command, exec)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config {
            key: SEED_ENV.into(),
            message: format!("`{v}` is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

/// Flag, then environment, then the configured value.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    Ok(flag.or(env_seed()?))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

struct Recorder {
    command: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
}

impl Recorder {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    fn finish<C: Serialize>(self, config: &C, outputs: &[&Path], manifest: &Path) -> Result<()> {
        let m = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_digest: digest_json(config)?,
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        m.save(manifest)?;
        for p in outputs {
            println!("wrote {}", p.display());
        }
        Ok(())
    }
}

fn load_run_config(path: Option<&Path>, rec: &mut Recorder) -> Result<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            rec.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let value: Option<serde_json::Value> = serde_json::from_str(&text).ok();
            match value.as_ref().and_then(|v| v.get("config_digest")).is_some() {
                true => {
                    let m: Manifest = serde_json::from_str(&text)?;
                    parse_config_str(&m.config.to_string())?
                }
                false => parse_config_str(&text)?,
            }
        }
    };
    if let Some(s) = env_seed()? {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    if let Some(scene) = &cfg.scene {
        rec.input(scene)?;
    }
    Ok(cfg)
}

fn dispatch(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::Simulate {
            scene,
            samples_per_rp,
            seed,
            out,
        } => {
            let mut rec = Recorder::new("simulate");
            let scene = match &scene {
                Some(p) => {
                    rec.input(p)?;
                    Scene::load(p)?
                }
                None => Scene::default_indoor(0),
            };
            let seed = resolve_seed(seed)?.unwrap_or(scene.seed);
            let db = build_database(&scene, samples_per_rp, &mut rng::stream(seed, eval::label::DATABASE))?;
            dataset::save(&db, &out)?;
            #[derive(Serialize)]
            struct Cfg<'a> {
                scene: &'a Scene,
                samples_per_rp: usize,
                seed: u64,
            }
            let cfg = Cfg {
                scene: &scene,
                samples_per_rp,
                seed,
            };
            rec.finish(&cfg, &[&out], &manifest_path(&out))
        }
        Command::Split { db, out_dir, sizes, seed } => {
            let mut rec = Recorder::new("split");
            rec.input(&db)?;
            let sizes: [usize; 3] = sizes.try_into().map_err(|v: Vec<usize>| Error::Config {
                key: "--sizes".into(),
                message: format!("expected three counts, got {}", v.len()),
            })?;
            let spec = SplitSpec {
                sizes: SplitSizes::Counts(sizes),
                seed: resolve_seed(seed)?.unwrap_or(0),
            };
            let data = dataset::load(&db)?;
            let (a, b, c) = split_by_rp(&data, &spec)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let paths: Vec<PathBuf> = ["rss_train.csv", "rss_test.csv", "loc_test.csv"]
                .iter()
                .map(|n| out_dir.join(n))
                .collect();
            for (part, p) in [&a, &b, &c].into_iter().zip(&paths) {
                dataset::save(part, p)?;
            }
            let stats = fit_standardizer(&a, "rss_train")?;
            let stats_path = out_dir.join("stats.json");
            stats.save(&stats_path)?;
            let outs: Vec<&Path> = paths.iter().map(PathBuf::as_path).chain([stats_path.as_path()]).collect();
            rec.finish(&spec, &outs, &out_dir.join("split.manifest.json"))
        }
        Command::Train {
            db,
            config,
            lite,
            seed,
            checkpoint_dir,
            out,
        } => {
            let mut rec = Recorder::new("train");
            rec.input(&db)?;
            let mut cfg = match &config {
                Some(p) => {
                    rec.input(p)?;
                    parse_config(p)?.train
                }
                None => TrainConfig::default(),
            };
            if lite {
                cfg = cfg.lite();
            }
            if let Some(s) = resolve_seed(seed)? {
                cfg.seed = s;
            }
            let raw = dataset::load(&db)?;
            if raw.standardization().is_some() {
                return Err(Error::contract("train expects a raw-dB database"));
            }
            let stats = fit_standardizer(&raw, "rss_train")?;
            let z = transform(&raw, &stats, Direction::Forward)?;
            if let Some(d) = &checkpoint_dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let (model, secs) = comgan::timed(|| comgan::train_with_checkpoints(&z, &cfg, checkpoint_dir.as_deref()))?;
            model.save(&out)?;
            let mut training = out.as_os_str().to_owned();
            training.push(".training.json");
            let training = PathBuf::from(training);
            TrainingManifest {
                config: cfg.clone(),
                seed: cfg.seed,
                epoch_losses: model.history.clone(),
                wall_time_s: secs,
            }
            .save(&training)?;
            rec.finish(&cfg, &[&out, &training], &manifest_path(&out))
        }
        Command::Complete { model, db, out } => {
            let mut rec = Recorder::new("complete");
            rec.input(&model)?;
            rec.input(&db)?;
            let m = Comgan::load(&model)?;
            let sparse = dataset::load(&db)?;
            let pred = refine::complete_database(&m, &sparse, sparse.mask(), exec)?;
            let merged: Vec<f64> = sparse
                .samples()
                .iter()
                .zip(&pred)
                .zip(sparse.mask())
                .map(|((&v, &p), &measured)| if measured { v } else { p })
                .collect();
            let provenance = sparse
                .mask()
                .iter()
                .map(|&m| if m { Provenance::Measured } else { Provenance::Predicted })
                .collect();
            let done = FingerprintDatabase::new(
                sparse.ru_count(),
                merged,
                vec![true; sparse.mask().len()],
                sparse.rp_index().to_vec(),
                sparse.rp_coords().clone(),
            )?
            .with_provenance(provenance)?;
            dataset::save(&done, &out)?;
            rec.finish(&serde_json::json!({}), &[&out], &manifest_path(&out))
        }
        Command::Refine {
            model,
            db,
            k,
            rus,
            seed,
            out,
        } => {
            let mut rec = Recorder::new("refine");
            rec.input(&model)?;
            rec.input(&db)?;
            let m = Comgan::load(&model)?;
            let data = dataset::load(&db)?;
            let seed = resolve_seed(seed)?.unwrap_or(0);
            let rus = match rus {
                Some(r) => r,
                None => {
                    let mut candidates: Vec<usize> = (0..data.ru_count())
                        .filter(|&ru| (0..data.len()).all(|i| data.mask_row(i)[ru]))
                        .collect();
                    if k == 0 || k > candidates.len() || k >= data.ru_count() {
                        return Err(Error::Config {
                            key: "--k".into(),
                            message: format!(
                                "K = {k} needs 1 <= K < {} and at most {} RUs measured in every sample",
                                data.ru_count(),
                                candidates.len()
                            ),
                        });
                    }
                    candidates.shuffle(&mut rng::stream(seed, eval::label::RU_SELECTION));
                    candidates.truncate(k);
                    candidates
                }
            };
            let sparse = data.keep_rus(&rus)?;
            let hybrid = refine::refine_with_rus(&sparse, &m, &rus, exec)?;
            dataset::save(&hybrid, &out)?;
            rec.finish(&serde_json::json!({ "rus": rus, "seed": seed }), &[&out], &manifest_path(&out))
        }
        Command::Localize {
            db,
            queries,
            kind,
            k,
            config,
            seed,
            save_model,
            out,
        } => {
            let mut rec = Recorder::new("localize");
            rec.input(&db)?;
            rec.input(&queries)?;
            let mut cfg = match &config {
                Some(p) => {
                    rec.input(p)?;
                    parse_config(p)?.localizer
                }
                None => LocalizerConfig::default(),
            };
            cfg.kind = match kind {
                KindArg::Knn => LocalizerKind::Knn,
                KindArg::Learned => LocalizerKind::Learned,
            };
            cfg.k = k;
            if let Some(s) = resolve_seed(seed)? {
                cfg.seed = s;
            }
            let data = dataset::load(&db)?;
            let data = match (cfg.kind, data.standardization()) {
                (LocalizerKind::Learned, None) => {
                    let stats = fit_standardizer(&data, "localizer_train")?;
                    transform(&data, &stats, Direction::Forward)?
                }
                (LocalizerKind::Knn, Some(stats)) => {
                    let stats = stats.clone();
                    transform(&data, &stats, Direction::Inverse)?
                }
                _ => data,
            };
            let model = localizer::train_localizer(&data, &cfg)?;
            let (q, l) = localizer::load_queries(&queries)?;
            if l != data.ru_count() {
                return Err(Error::Shape {
                    op: "localize",
                    lhs: vec![l],
                    rhs: vec![data.ru_count()],
                });
            }
            let est = localizer::localize_batch(&model, &q, l, exec)?;
            write_positions(&out, &est)?;
            let mut outs: Vec<&Path> = vec![&out];
            if let Some(p) = &save_model {
                model.save(p)?;
                outs.push(p);
            }
            rec.finish(&cfg, &outs, &manifest_path(&out))
        }
        Command::Evaluate { config, out_dir } => experiment(ReportKind::Comparison, config, out_dir, exec),
        Command::Ablate { config, out_dir } => experiment(ReportKind::Ablation, config, out_dir, exec),
        Command::Ksweep { config, out_dir } => experiment(ReportKind::KSweep, config, out_dir, exec),
        Command::Report { report, csv } => {
            let r = EvalReport::load(&report)?;
            print!("{}", render_report(&r));
            if let Some(p) = csv {
                r.write_k_sweep_csv(&p)?;
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn write_positions(path: &Path, est: &[crate::scene::Point]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    w.write_record(["x", "y"]).map_err(io)?;
    for p in est {
        w.write_record([p.x.to_string(), p.y.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Report file stem per harness.
pub fn report_name(kind: &ReportKind) -> &'static str {
    match kind {
        ReportKind::Comparison => "comparison",
        ReportKind::Ablation => "ablation",
        ReportKind::KSweep => "k_sweep",
    }
}

fn experiment(kind: ReportKind, config: Option<PathBuf>, out_dir: Option<PathBuf>, exec: Execution) -> Result<()> {
    let mut rec = Recorder::new(match kind {
        ReportKind::Comparison => "evaluate",
        ReportKind::Ablation => "ablate",
        ReportKind::KSweep => "ksweep",
    });
    let mut cfg = load_run_config(config.as_deref(), &mut rec)?;
    if let Some(d) = out_dir {
        cfg.output_dir = d;
    }
    let scene = cfg.load_scene()?;
    let e = cfg.experiment();
    let report = match kind {
        ReportKind::Comparison => eval::run_comparison(&scene, &e, exec)?,
        ReportKind::Ablation => eval::run_ablation(&scene, &e, exec)?,
        ReportKind::KSweep => eval::run_k_sweep(&scene, &e, exec)?,
    };
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = report_name(&kind);
    let path = dir.join(format!("{name}.json"));
    report.save(&path)?;
    let mut outs = vec![path.clone()];
    if kind == ReportKind::KSweep {
        let csv = dir.join("k_sweep.csv");
        report.write_k_sweep_csv(&csv)?;
        outs.push(csv);
    }
    print!("{}", render_report(&report));
    let outs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    rec.finish(&cfg, &outs, &dir.join(format!("{name}.manifest.json")))
}

/// Plain-text summary of a report.
pub fn render_report(r: &EvalReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "report: {} ({} seeds)", report_name(&r.kind), r.per_seed.len());
    let _ = writeln!(
        s,
        "completion RMSE {:.3} dB, {:.0}% CI [{:.3}, {:.3}], NRMSE {:.4}",
        r.rss_rmse,
        100.0 * r.ci_level,
        r.bootstrap_ci.0,
        r.bootstrap_ci.1,
        r.rss_nrmse
    );
    let _ = writeln!(s, "baselines: mean {:.3} dB, idw {:.3} dB", r.mean_baseline_rmse, r.idw_baseline_rmse);
    if let Some(l) = &r.lite_rss_rmse {
        let _ = writeln!(s, "lite completion RMSE {:.3} ± {:.3} dB", l.mean, l.std);
    }
    let _ = writeln!(s, "localization RMSE (m):");
    if r.k_sweep.is_empty() {
        for (name, v) in &r.localization_rmse {
            let _ = writeln!(s, "  {name:<20} {:.3} ± {:.3}", v.mean, v.std);
        }
    }
    for e in &r.k_sweep {
        let gain = e.marginal_gain.map_or(String::new(), |g| format!("  gain {g:+.3}"));
        let _ = writeln!(s, "  K={} {:.3} ± {:.3}{gain}", e.k, e.rmse_mean, e.rmse_std);
    }
    if let Some(k) = r.k_knee {
        let _ = writeln!(s, "knee at K={k}");
    }
    s
}
