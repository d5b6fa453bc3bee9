//! Metrics, bootstrap intervals, naive imputation baselines and the multi-seed experiment harnesses.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comgan::{self, Comgan, TrainConfig};
use crate::dataset::{
    fit_standardizer, mask_randomly, split_by_rp, transform, Direction, FingerprintDatabase, Provenance, SplitSizes,
    SplitSpec, StandardizationStats,
};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::localizer::{localize_batch, position_rmse, train_localizer, LocalizerConfig};
use crate::refine::{self, select_rus};
use crate::rng;
use crate::scene::{build_database, Point, Scene};

fn selected<'a>(pred: &'a [f64], truth: &'a [f64], select: Option<&'a [bool]>) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.len() != truth.len() || select.is_some_and(|s| s.len() != pred.len()) {
        return Err(Error::Shape {
            op: "rmse",
            lhs: vec![pred.len()],
            rhs: vec![truth.len(), select.map_or(truth.len(), <[bool]>::len)],
        });
    }
    Ok(pred
        .iter()
        .zip(truth)
        .enumerate()
        .filter(move |(i, _)| select.is_none_or(|s| s[*i]))
        .map(|(_, (&p, &t))| (p, t)))
}

/// Root mean squared error over the entries flagged in `select` (all when `None`).
pub fn rmse(pred: &[f64], truth: &[f64], select: Option<&[bool]>) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, t) in selected(pred, truth, select)? {
        s += (p - t) * (p - t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("rmse over an empty selection"));
    }
    Ok((s / n as f64).sqrt())
}

/// [`rmse`] divided by the range of the evaluated truth values.
pub fn nrmse(pred: &[f64], truth: &[f64], select: Option<&[bool]>) -> Result<f64> {
    let e = rmse(pred, truth, select)?;
    let (lo, hi) = selected(pred, truth, select)?.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, t)| {
        (lo.min(t), hi.max(t))
    });
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Domain("nrmse needs truth values with a positive range".into()));
    }
    Ok(e / range)
}

fn rms(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Percentile bootstrap interval for the RMS of `errors`.
///
/// Resample `r` draws from its own seeded stream, so the result does not
/// depend on how resamples are spread over threads.
pub fn bootstrap_ci(errors: &[f64], resamples: usize, level: f64, seed: u64, exec: Execution) -> Result<(f64, f64)> {
    if errors.len() < 2 {
        return Err(Error::contract("bootstrap needs at least 2 errors"));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::contract("bootstrap needs resamples > 0 and 0 < level < 1"));
    }
    let n = errors.len();
    let mut stats = exec::map_range(exec, resamples, |r| {
        let mut g = rng::stream(seed, r as u64);
        let s: f64 = (0..n).map(|_| errors[g.random_range(0..n)].powi(2)).sum();
        (s / n as f64).sqrt()
    });
    stats.sort_by(f64::total_cmp);
    let last = (resamples - 1) as f64;
    let lo = stats[((1.0 - level) / 2.0 * last).round() as usize];
    let hi = stats[((1.0 + level) / 2.0 * last).round() as usize];
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Mean,
    Idw,
}

/// Fills unmeasured entries with a naive estimate.
///
/// `Mean` uses the per-RU means in `stats` (zero on a standardized database);
/// `Idw` averages the same RU's per-RP means at the other RPs with weights `1/d²`.
pub fn baseline_impute(db: &FingerprintDatabase, method: Baseline, stats: &StandardizationStats) -> Result<FingerprintDatabase> {
    let l = db.ru_count();
    if stats.ru_count() != l {
        return Err(Error::Shape {
            op: "baseline_impute",
            lhs: vec![l],
            rhs: vec![stats.ru_count()],
        });
    }
    let mut samples = db.samples().to_vec();
    match method {
        Baseline::Mean => {
            let standardized = db.standardization().is_some();
            for (k, v) in samples.iter_mut().enumerate() {
                if !db.mask()[k] {
                    *v = if standardized { 0.0 } else { stats.means[k % l] };
                }
            }
        }
        Baseline::Idw => {
            // Per-RP, per-RU means of measured values.
            let mut acc: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
            for i in 0..db.len() {
                let e = acc.entry(db.rp_index()[i]).or_insert_with(|| vec![(0.0, 0); l]);
                for ru in 0..l {
                    if db.mask_row(i)[ru] {
                        e[ru].0 += db.row(i)[ru];
                        e[ru].1 += 1;
                    }
                }
            }
            let donors: Vec<(usize, Point, Vec<Option<f64>>)> = acc
                .into_iter()
                .map(|(rp, v)| {
                    let means = v.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
                    (rp, db.rp_coords()[&rp], means)
                })
                .collect();
            let mut cache: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for i in 0..db.len() {
                let rp = db.rp_index()[i];
                let here = db.sample_coord(i);
                for ru in 0..l {
                    if db.mask_row(i)[ru] {
                        continue;
                    }
                    let v = match cache.get(&(rp, ru)) {
                        Some(&v) => v,
                        None => {
                            let v = idw(&donors, rp, here, ru)?;
                            cache.insert((rp, ru), v);
                            v
                        }
                    };
                    samples[i * l + ru] = v;
                }
            }
        }
    }
    let provenance = db
        .mask()
        .iter()
        .map(|&m| if m { Provenance::Measured } else { Provenance::Predicted })
        .collect();
    Ok(FingerprintDatabase::new(l, samples, vec![true; db.mask().len()], db.rp_index().to_vec(), db.rp_coords().clone())?
        .with_provenance(provenance)?
        .with_standardization(db.standardization().cloned()))
}

fn idw(donors: &[(usize, Point, Vec<Option<f64>>)], rp: usize, at: Point, ru: usize) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (other, p, means) in donors {
        if *other == rp {
            continue;
        }
        if let Some(v) = means[ru] {
            let d2 = (p.x - at.x).powi(2) + (p.y - at.y).powi(2);
            if d2 == 0.0 {
                return Ok(v);
            }
            num += v / d2;
            den += 1.0 / d2;
        }
    }
    if den == 0.0 {
        return Err(Error::contract(format!("no IDW donors for RU {ru} at RP {rp}")));
    }
    Ok(num / den)
}

/// Multi-seed experiment settings shared by every harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub samples_per_rp: usize,
    pub split: SplitSizes,
    pub train: TrainConfig,
    /// Subsets fused into the hybrid database.
    pub refine_k: usize,
    pub k_values: Vec<usize>,
    pub localizer: LocalizerConfig,
    /// Measured RUs per held-out sample when scoring completion.
    pub test_keep: usize,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            samples_per_rp: 381,
            split: SplitSizes::Counts([15, 15, 10]),
            train: TrainConfig::default(),
            refine_k: 2,
            k_values: vec![1, 2, 3],
            localizer: LocalizerConfig::default(),
            test_keep: 1,
            bootstrap_resamples: 1000,
            ci_level: 0.95,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, ru_count: usize) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: key.into(),
            message,
        };
        if self.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed is required".into()));
        }
        if self.samples_per_rp == 0 {
            return Err(bad("samples_per_rp", "must be positive".into()));
        }
        for &k in self.k_values.iter().chain(std::iter::once(&self.refine_k)) {
            if k == 0 || k >= ru_count {
                return Err(bad("refine_k", format!("K = {k} must satisfy 1 <= K < {ru_count}")));
            }
        }
        if self.test_keep == 0 || self.test_keep >= ru_count {
            return Err(bad("test_keep", format!("must satisfy 1 <= keep < {ru_count}")));
        }
        self.train.validate(ru_count)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn digest_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one seed's experiments share: the simulated splits and the trained model.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub scene: Scene,
    pub rss_train: FingerprintDatabase,
    pub rss_test: FingerprintDatabase,
    pub loc_test: FingerprintDatabase,
    pub stats: StandardizationStats,
    pub model: Comgan,
}

/// Stream and seed labels; one place so that variants of a seed share them.
pub(crate) mod label {
    pub const DATABASE: u64 = 100;
    pub const TEST_MASK: u64 = 101;
    pub const RU_SELECTION: u64 = 102;
    pub const SPLIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const LOCALIZER: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
}

impl SeedContext {
    /// Simulates, splits, standardizes and trains the full model for `seed`.
    pub fn prepare(scene: &Scene, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        scene.validate()?;
        cfg.validate(scene.ru_count())?;
        let db = build_database(scene, cfg.samples_per_rp, &mut rng::stream(seed, label::DATABASE))?;
        let spec = SplitSpec {
            sizes: cfg.split.clone(),
            seed: rng::derive_seed(seed, label::SPLIT),
        };
        let (rss_train, rss_test, loc_test) = split_by_rp(&db, &spec)?;
        let stats = fit_standardizer(&rss_train, "rss_train")?;
        let mut ctx = Self {
            seed,
            scene: scene.clone(),
            rss_train,
            rss_test,
            loc_test,
            stats,
            model: Comgan::new(scene.ru_count(), &cfg.train, scene.area_bounds)?,
        };
        ctx.model = ctx.train_variant(&cfg.train)?;
        Ok(ctx)
    }

    /// Trains a model on this seed's training split with `train` (seed replaced by the seed's own).
    pub fn train_variant(&self, train: &TrainConfig) -> Result<Comgan> {
        let mut tc = train.clone();
        tc.seed = rng::derive_seed(self.seed, label::TRAIN);
        tc.coord_bounds.get_or_insert(self.scene.area_bounds);
        let z = transform(&self.rss_train, &self.stats, Direction::Forward)?;
        comgan::train(&z, &tc)
    }

    /// Held-out samples with `keep` random RUs measured each.
    pub fn sparse_test(&self, keep: usize) -> Result<FingerprintDatabase> {
        mask_randomly(&self.rss_test, keep, &mut rng::stream(self.seed, label::TEST_MASK))
    }

    /// The seed's RU order; the first `k` entries are the selection for `k` subsets.
    pub fn ru_order(&self) -> Result<Vec<usize>> {
        let l = self.scene.ru_count();
        let mut order = select_rus(l, l - 1, &mut rng::stream(self.seed, label::RU_SELECTION))?;
        let last = (0..l).find(|r| !order.contains(r)).expect("one RU left over");
        order.push(last);
        Ok(order)
    }

    pub fn completion(&self, model: &Comgan, cfg: &ExperimentConfig) -> Result<CompletionResult> {
        let sparse = self.sparse_test(cfg.test_keep)?;
        let predicted = refine::complete_database(model, &sparse, sparse.mask(), Execution::Sequential)?;
        let unmeasured: Vec<bool> = sparse.mask().iter().map(|&m| !m).collect();
        let truth = self.rss_test.samples();
        let errors: Vec<f64> = predicted
            .iter()
            .zip(truth)
            .zip(&unmeasured)
            .filter(|(_, &u)| u)
            .map(|((p, t), _)| p - t)
            .collect();
        let mean = baseline_impute(&sparse, Baseline::Mean, &self.stats)?;
        let idw = baseline_impute(&sparse, Baseline::Idw, &self.stats)?;
        let ci = bootstrap_ci(
            &errors,
            cfg.bootstrap_resamples,
            cfg.ci_level,
            rng::derive_seed(self.seed, label::BOOTSTRAP),
            Execution::Sequential,
        )?;
        Ok(CompletionResult {
            rmse: rmse(&predicted, truth, Some(&unmeasured))?,
            nrmse: nrmse(&predicted, truth, Some(&unmeasured))?,
            bootstrap_ci: ci,
            mean_baseline_rmse: rmse(mean.samples(), truth, Some(&unmeasured))?,
            idw_baseline_rmse: rmse(idw.samples(), truth, Some(&unmeasured))?,
            errors,
        })
    }

    /// Held-out samples with only the first `k` RUs of the seed's order measured.
    pub fn incomplete(&self, k: usize) -> Result<FingerprintDatabase> {
        self.rss_test.keep_rus(&self.ru_order()?[..k])
    }

    pub fn hybrid(&self, model: &Comgan, k: usize) -> Result<FingerprintDatabase> {
        let rus = self.ru_order()?;
        refine::refine_with_rus(&self.incomplete(k)?, model, &rus[..k], Execution::Sequential)
    }

    /// Trains the localizer on `train_db` (raw dB) and scores it on the localization split.
    pub fn localization_rmse(&self, train_db: &FingerprintDatabase, cfg: &ExperimentConfig) -> Result<f64> {
        let z = transform(train_db, &self.stats, Direction::Forward)?;
        let mut lc = cfg.localizer.clone();
        lc.seed = rng::derive_seed(self.seed, label::LOCALIZER);
        lc.bounds.get_or_insert(self.scene.area_bounds);
        let model = train_localizer(&z, &lc)?;
        let est = localize_batch(&model, self.loc_test.samples(), self.loc_test.ru_count(), Execution::Sequential)?;
        let truth: Vec<Point> = (0..self.loc_test.len()).map(|i| self.loc_test.sample_coord(i)).collect();
        position_rmse(&est, &truth)
    }
}

/// Completion quality on held-out RPs, raw dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub rmse: f64,
    pub nrmse: f64,
    pub bootstrap_ci: (f64, f64),
    pub mean_baseline_rmse: f64,
    pub idw_baseline_rmse: f64,
    #[serde(skip)]
    pub errors: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

pub const INCOMPLETE: &str = "incomplete";
pub const FULL: &str = "full";
pub const HYBRID: &str = "hybrid";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub completion: CompletionResult,
    /// Localization RMSE (m) per training-set variant.
    pub localization: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub refined: bool,
    pub localization_rmse: Summary,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepEntry {
    pub k: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub per_seed: Vec<f64>,
    /// Mean improvement over the previous K in the list.
    pub marginal_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Comparison,
    Ablation,
    KSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    /// Pooled over all seeds, raw dB.
    pub rss_rmse: f64,
    pub rss_nrmse: f64,
    pub bootstrap_ci: (f64, f64),
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    pub mean_baseline_rmse: f64,
    pub idw_baseline_rmse: f64,
    pub localization_rmse: BTreeMap<String, Summary>,
    pub per_seed: Vec<SeedResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lite_rss_rmse: Option<Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k_sweep: Vec<KSweepEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_knee: Option<usize>,
    pub config_digest: String,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::nn::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::nn::read_json(path)
    }

    /// JSON text with the wall-time field zeroed, for reproducibility checks.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_time_s = 0.0;
        Ok(serde_json::to_string_pretty(&r)?)
    }

    /// Writes `K,rmse_mean,rmse_std` rows.
    pub fn write_k_sweep_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["K", "rmse_mean", "rmse_std"]).map_err(io)?;
        for e in &self.k_sweep {
            w.write_record([e.k.to_string(), e.rmse_mean.to_string(), e.rmse_std.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-seed completion and three-way localization comparison.
pub fn compare_seed(ctx: &SeedContext, cfg: &ExperimentConfig) -> Result<SeedResult> {
    let completion = ctx.completion(&ctx.model, cfg)?;
    let mut localization = BTreeMap::new();
    localization.insert(INCOMPLETE.to_string(), ctx.localization_rmse(&ctx.incomplete(cfg.refine_k)?, cfg)?);
    localization.insert(FULL.to_string(), ctx.localization_rmse(&ctx.rss_test, cfg)?);
    localization.insert(HYBRID.to_string(), ctx.localization_rmse(&ctx.hybrid(&ctx.model, cfg.refine_k)?, cfg)?);
    Ok(SeedResult {
        seed: ctx.seed,
        completion,
        localization,
    })
}

/// `(variant, refined, localization rmse)` for one seed.
pub type AblationRow = (String, bool, f64);

/// Per-seed ablation: the lite model's completion and the four localization cells.
pub fn ablate_seed(ctx: &SeedContext, cfg: &ExperimentConfig) -> Result<(CompletionResult, Vec<AblationRow>)> {
    let lite = ctx.train_variant(&cfg.train.clone().lite())?;
    let lite_completion = ctx.completion(&lite, cfg)?;
    let mut cells = Vec::new();
    for (name, model) in [("comgan", &ctx.model), ("lite", &lite)] {
        for refined in [true, false] {
            let k = if refined { cfg.refine_k } else { 1 };
            cells.push((name.to_string(), refined, ctx.localization_rmse(&ctx.hybrid(model, k)?, cfg)?));
        }
    }
    Ok((lite_completion, cells))
}

/// Per-seed localization RMSE for each K in `ks`.
pub fn k_sweep_seed(ctx: &SeedContext, cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<f64>> {
    ks.iter()
        .map(|&k| ctx.localization_rmse(&ctx.hybrid(&ctx.model, k)?, cfg))
        .collect()
}

fn base_report(kind: ReportKind, cfg: &ExperimentConfig, per_seed: Vec<SeedResult>, started: Instant) -> Result<EvalReport> {
    let errors: Vec<f64> = per_seed.iter().flat_map(|s| s.completion.errors.iter().copied()).collect();
    let pooled = rms(&errors);
    let ci = bootstrap_ci(
        &errors,
        cfg.bootstrap_resamples,
        cfg.ci_level,
        rng::derive_seed(cfg.seeds[0], label::BOOTSTRAP),
        Execution::Sequential,
    )?;
    let mean_of = |f: fn(&CompletionResult) -> f64| per_seed.iter().map(|s| f(&s.completion)).sum::<f64>() / per_seed.len() as f64;
    let mut names: Vec<String> = per_seed.iter().flat_map(|s| s.localization.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let localization_rmse = names
        .into_iter()
        .map(|n| {
            let v: Vec<f64> = per_seed.iter().filter_map(|s| s.localization.get(&n).copied()).collect();
            (n, Summary::of(&v))
        })
        .collect();
    Ok(EvalReport {
        kind,
        rss_rmse: pooled,
        rss_nrmse: mean_of(|c| c.nrmse),
        bootstrap_ci: ci,
        bootstrap_resamples: cfg.bootstrap_resamples,
        ci_level: cfg.ci_level,
        mean_baseline_rmse: mean_of(|c| c.mean_baseline_rmse),
        idw_baseline_rmse: mean_of(|c| c.idw_baseline_rmse),
        localization_rmse,
        per_seed,
        lite_rss_rmse: None,
        ablation: Vec::new(),
        k_sweep: Vec::new(),
        k_knee: None,
        config_digest: digest_json(cfg)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Completion plus localization with incomplete, full and hybrid training sets, over all seeds.
pub fn comparison_report(contexts: &[SeedContext], cfg: &ExperimentConfig, exec: Execution, started: Instant) -> Result<EvalReport> {
    let per_seed = exec::try_map_slice(exec, contexts, |ctx| compare_seed(ctx, cfg))?;
    base_report(ReportKind::Comparison, cfg, per_seed, started)
}

/// 2×2 table of {full, lite} × {refined, unrefined} localization RMSE.
pub fn ablation_report(contexts: &[SeedContext], cfg: &ExperimentConfig, exec: Execution, started: Instant) -> Result<EvalReport> {
    let rows = exec::try_map_slice(exec, contexts, |ctx| -> Result<_> {
        let completion = ctx.completion(&ctx.model, cfg)?;
        let (lite, cells) = ablate_seed(ctx, cfg)?;
        Ok((completion, lite, cells))
    })?;
    let per_seed: Vec<SeedResult> = rows
        .iter()
        .zip(contexts)
        .map(|((completion, _, cells), ctx)| SeedResult {
            seed: ctx.seed,
            completion: completion.clone(),
            localization: cells
                .iter()
                .map(|(v, r, e)| (format!("{v}_{}", if *r { "refined" } else { "unrefined" }), *e))
                .collect(),
        })
        .collect();
    let mut report = base_report(ReportKind::Ablation, cfg, per_seed, started)?;
    let lite: Vec<f64> = rows.iter().map(|(_, l, _)| l.rmse).collect();
    report.lite_rss_rmse = Some(Summary::of(&lite));
    report.ablation = (0..4)
        .map(|c| {
            let v: Vec<f64> = rows.iter().map(|(_, _, cells)| cells[c].2).collect();
            let (name, refined, _) = &rows[0].2[c];
            AblationCell {
                variant: name.clone(),
                refined: *refined,
                localization_rmse: Summary::of(&v),
                per_seed: v,
            }
        })
        .collect();
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Localization RMSE per K, with marginal gains and the knee.
pub fn k_sweep_report(contexts: &[SeedContext], cfg: &ExperimentConfig, exec: Execution, started: Instant) -> Result<EvalReport> {
    let ks = cfg.k_values.clone();
    let rows = exec::try_map_slice(exec, contexts, |ctx| -> Result<_> {
        Ok((ctx.completion(&ctx.model, cfg)?, k_sweep_seed(ctx, cfg, &ks)?))
    })?;
    let per_seed: Vec<SeedResult> = rows
        .iter()
        .zip(contexts)
        .map(|((completion, errs), ctx)| SeedResult {
            seed: ctx.seed,
            completion: completion.clone(),
            localization: ks.iter().zip(errs).map(|(k, e)| (format!("k{k}"), *e)).collect(),
        })
        .collect();
    let mut report = base_report(ReportKind::KSweep, cfg, per_seed, started)?;
    let mut entries: Vec<KSweepEntry> = Vec::new();
    for (j, &k) in ks.iter().enumerate() {
        let v: Vec<f64> = rows.iter().map(|(_, e)| e[j]).collect();
        let s = Summary::of(&v);
        entries.push(KSweepEntry {
            k,
            rmse_mean: s.mean,
            rmse_std: s.std,
            per_seed: v,
            marginal_gain: entries.last().map(|p| p.rmse_mean - s.mean),
        });
    }
    report.k_knee = knee(&entries);
    report.k_sweep = entries;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// First K after which the next step gains less than a quarter of the step into K.
pub fn knee(entries: &[KSweepEntry]) -> Option<usize> {
    for w in entries.windows(2).skip(1) {
        let (into, next) = (w[0].marginal_gain?, w[1].marginal_gain?);
        if into > 0.0 && next < 0.25 * into {
            return Some(w[0].k);
        }
    }
    entries.last().map(|e| e.k)
}

/// Prepares every seed's context (in parallel when `exec` allows).
pub fn prepare_all(scene: &Scene, cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<SeedContext>> {
    exec::try_map_slice(exec, &cfg.seeds, |&seed| SeedContext::prepare(scene, cfg, seed))
}

pub fn run_comparison(scene: &Scene, cfg: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    let started = Instant::now();
    comparison_report(&prepare_all(scene, cfg, exec)?, cfg, exec, started)
}

pub fn run_ablation(scene: &Scene, cfg: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    let started = Instant::now();
    ablation_report(&prepare_all(scene, cfg, exec)?, cfg, exec, started)
}

pub fn run_k_sweep(scene: &Scene, cfg: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    let started = Instant::now();
    k_sweep_report(&prepare_all(scene, cfg, exec)?, cfg, exec, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn stats(l: usize) -> StandardizationStats {
        StandardizationStats {
            means: (0..l).map(|i| -50.0 - i as f64).collect(),
            stds: vec![5.0; l],
            split: "train".into(),
        }
    }

    /// One RU, one sample per RP; RP 0 is the target with nothing measured.
    fn idw_db(donors: &[(Point, f64)]) -> FingerprintDatabase {
        let mut coords = BTreeMap::new();
        coords.insert(0, Point::new(0.0, 0.0));
        let mut samples = vec![0.0];
        let mut mask = vec![false];
        for (i, &(p, v)) in donors.iter().enumerate() {
            coords.insert(i + 1, p);
            samples.push(v);
            mask.push(true);
        }
        let index = (0..=donors.len()).collect();
        FingerprintDatabase::new(1, samples, mask, index, coords).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0], None).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0], None).unwrap() - 3.5355).abs() < 1e-4);
        assert_eq!(rmse(&[3.0, 9.0], &[0.0, 0.0], Some(&[true, false])).unwrap(), 3.0);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0], None), Err(Error::Shape { .. })));
        assert!(matches!(rmse(&[1.0], &[1.0], Some(&[false])), Err(Error::Contract(_))));
    }

    #[test]
    fn nrmse_divides_by_truth_range() {
        let v = nrmse(&[1.0, 3.0, 5.0], &[0.0, 4.0, 4.0], None).unwrap();
        assert!((v - rmse(&[1.0, 3.0, 5.0], &[0.0, 4.0, 4.0], None).unwrap() / 4.0).abs() < 1e-12);
        assert!(matches!(nrmse(&[1.0, 2.0], &[3.0, 3.0], None), Err(Error::Domain(_))));
    }

    #[test]
    fn bootstrap_of_constant_errors_is_degenerate() {
        let (lo, hi) = bootstrap_ci(&[2.0; 50], 200, 0.95, 1, Execution::Sequential).unwrap();
        assert_eq!((lo, hi), (2.0, 2.0));
    }

    #[test]
    fn bootstrap_contains_point_estimate_and_is_execution_independent() {
        let normal = Normal::new(0.0, 3.0).unwrap();
        let mut r = rng::stream(9, 0);
        let errors: Vec<f64> = (0..400).map(|_| normal.sample(&mut r)).collect();
        let point = rms(&errors);
        let seq = bootstrap_ci(&errors, 500, 0.95, 3, Execution::Sequential).unwrap();
        assert!(seq.0 <= point && point <= seq.1, "{seq:?} {point}");
        assert_eq!(seq, bootstrap_ci(&errors, 500, 0.95, 3, Execution::Parallel).unwrap());
        let narrow = bootstrap_ci(&errors, 500, 0.5, 3, Execution::Sequential).unwrap();
        assert!(narrow.1 - narrow.0 < seq.1 - seq.0);
    }

    #[test]
    fn bootstrap_rejects_bad_arguments() {
        assert!(bootstrap_ci(&[1.0], 10, 0.95, 0, Execution::Sequential).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], 0, 0.95, 0, Execution::Sequential).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], 10, 1.0, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn idw_with_single_donor_copies_it() {
        let db = idw_db(&[(Point::new(3.0, 4.0), -61.5)]);
        let out = baseline_impute(&db, Baseline::Idw, &stats(1)).unwrap();
        assert_eq!(out.samples()[0], -61.5);
        assert_eq!(out.provenance().unwrap()[0], Provenance::Predicted);
        assert_eq!(out.provenance().unwrap()[1], Provenance::Measured);
        assert!(out.mask().iter().all(|&m| m));
    }

    #[test]
    fn idw_matches_hand_weights_on_three_donors() {
        let db = idw_db(&[
            (Point::new(1.0, 0.0), -40.0),
            (Point::new(0.0, 2.0), -60.0),
            (Point::new(3.0, 4.0), -80.0),
        ]);
        let out = baseline_impute(&db, Baseline::Idw, &stats(1)).unwrap();
        // weights 1/1, 1/4, 1/25
        let expected = (-40.0 * 1.0 + -60.0 * 0.25 + -80.0 * 0.04) / (1.0 + 0.25 + 0.04);
        assert_eq!(out.samples()[0], expected);
    }

    #[test]
    fn idw_without_donors_fails() {
        let mut coords = BTreeMap::new();
        coords.insert(0, Point::new(0.0, 0.0));
        let db = FingerprintDatabase::new(1, vec![0.0], vec![false], vec![0], coords).unwrap();
        assert!(matches!(baseline_impute(&db, Baseline::Idw, &stats(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_baseline_uses_training_means() {
        let db = idw_db(&[(Point::new(1.0, 0.0), -40.0)]);
        let out = baseline_impute(&db, Baseline::Mean, &stats(1)).unwrap();
        assert_eq!(out.samples(), &[-50.0, -40.0]);
        let z = transform(&db, &stats(1), Direction::Forward).unwrap();
        let out = baseline_impute(&z, Baseline::Mean, &stats(1)).unwrap();
        assert_eq!(out.samples()[0], 0.0);
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Summary::of(&[4.0]).std, 0.0);
    }

    fn entries(means: &[f64]) -> Vec<KSweepEntry> {
        let mut out: Vec<KSweepEntry> = Vec::new();
        for (i, &m) in means.iter().enumerate() {
            out.push(KSweepEntry {
                k: i + 1,
                rmse_mean: m,
                rmse_std: 0.0,
                per_seed: vec![m],
                marginal_gain: out.last().map(|p| p.rmse_mean - m),
            });
        }
        out
    }

    #[test]
    fn knee_is_where_gains_flatten() {
        assert_eq!(knee(&entries(&[1.03, 0.93, 0.92])), Some(2));
        assert_eq!(knee(&entries(&[1.3, 1.2, 1.1, 1.0])), Some(4));
        assert_eq!(knee(&entries(&[1.0])), Some(1));
        assert_eq!(knee(&[]), None);
    }

    fn report() -> EvalReport {
        let mut per_seed = BTreeMap::new();
        per_seed.insert(FULL.to_string(), Summary::of(&[1.0, 1.2]));
        EvalReport {
            kind: ReportKind::KSweep,
            rss_rmse: 5.25,
            rss_nrmse: 0.08,
            bootstrap_ci: (5.0, 5.5),
            bootstrap_resamples: 1000,
            ci_level: 0.95,
            mean_baseline_rmse: 9.1,
            idw_baseline_rmse: 5.7,
            localization_rmse: per_seed,
            per_seed: vec![],
            lite_rss_rmse: None,
            ablation: vec![],
            k_sweep: entries(&[1.03, 0.93, 0.92]),
            k_knee: Some(2),
            config_digest: digest_json(&ExperimentConfig::default()).unwrap(),
            wall_time_s: 12.5,
        }
    }

    #[test]
    fn report_round_trips_and_canonical_form_ignores_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report();
        r.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), r);
        let mut later = r.clone();
        later.wall_time_s = 99.0;
        assert_eq!(later.canonical_json().unwrap(), r.canonical_json().unwrap());
    }

    #[test]
    fn k_sweep_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k_sweep.csv");
        report().write_k_sweep_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "K,rmse_mean,rmse_std");
        assert_eq!(lines[1], "1,1.03,0");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn config_digest_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            refine_k: 3,
            ..ExperimentConfig::default()
        };
        assert_eq!(digest_json(&a).unwrap(), digest_json(&a.clone()).unwrap());
        assert_ne!(digest_json(&a).unwrap(), digest_json(&b).unwrap());
        assert_eq!(digest_json(&a).unwrap().len(), 64);
    }

    #[test]
    fn experiment_config_validation() {
        assert!(ExperimentConfig::default().validate(6).is_ok());
        let bad = ExperimentConfig {
            refine_k: 6,
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(6), Err(Error::Config { .. })));
        let bad = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate(6).is_err());
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"refine_kk": 2}"#).unwrap_err();
        assert!(err.to_string().contains("refine_kk"));
    }
}
