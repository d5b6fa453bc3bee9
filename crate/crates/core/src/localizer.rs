//! Online-phase position estimation: centroid kNN matching and a learned coordinate regressor.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{FingerprintDatabase, MaskFill, Provenance, StandardizationStats};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{self, param_grads, AdamState, Linear, ParamStore};
use crate::rng;
use crate::scene::{Point, Rect};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizerKind {
    Knn,
    #[default]
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub kind: LocalizerKind,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of Gaussian noise added to predicted (standardized) training entries each batch.
    /// `None` uses the pooled within-RP spread of the measured entries.
    pub predicted_noise: Option<f64>,
    pub seed: u64,
    /// Output clamp and coordinate normalization; the training RPs' bounding box when unset.
    pub bounds: Option<Rect>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            kind: LocalizerKind::Learned,
            k: 3,
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            predicted_noise: None,
            seed: 0,
            bounds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    /// `(rp id, coordinate, centroid fingerprint)` in ascending RP order.
    pub centroids: Vec<(usize, Point, Vec<f64>)>,
}

impl KnnModel {
    pub fn fit(db: &FingerprintDatabase, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        let centroids: Vec<_> = db
            .centroids()
            .into_iter()
            .map(|(rp, c)| (rp, db.rp_coords()[&rp], c))
            .collect();
        if k > centroids.len() {
            return Err(Error::contract(format!("k = {k} exceeds the {} RPs available", centroids.len())));
        }
        Ok(Self { k, centroids })
    }

    pub fn locate(&self, query: &[f64]) -> Result<Point> {
        let l = self.centroids[0].2.len();
        if query.len() != l {
            return Err(Error::Shape {
                op: "knn_localize",
                lhs: vec![query.len()],
                rhs: vec![l],
            });
        }
        let mut dist: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, (_, _, c))| (c.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
            .collect();
        // Stable order on (distance, RP position) breaks ties toward the lower RP id.
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut x, mut y) = (0.0, 0.0);
        for &(_, i) in &dist[..self.k] {
            x += self.centroids[i].1.x;
            y += self.centroids[i].1.y;
        }
        let k = self.k as f64;
        Ok(Point::new(x / k, y / k))
    }
}

/// Mean coordinate of the `k` RPs whose centroid fingerprints are nearest to `query`.
pub fn knn_localize(db: &FingerprintDatabase, query: &[f64], k: usize) -> Result<Point> {
    KnnModel::fit(db, k)?.locate(query)
}

/// MLP from standardized RSS to normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    layers: Vec<Linear>,
    params: ParamStore,
    stats: StandardizationStats,
    bounds: Rect,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

impl LearnedModel {
    fn forward_batch(&self, standardized: Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params = self.params.bind(&g);
        let mut h = g.constant(standardized);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&params, h)?;
            if i + 1 < self.layers.len() {
                h = nn::leaky_relu(h);
            }
        }
        let out = (*h.value()).clone();
        Ok(out)
    }

    pub fn ru_count(&self) -> usize {
        self.stats.ru_count()
    }

    /// Raw-dB queries, row-major; positions clamped to the model bounds.
    pub fn locate_batch(&self, queries: &[f64]) -> Result<Vec<Point>> {
        let l = self.ru_count();
        if !queries.len().is_multiple_of(l) {
            return Err(Error::Shape {
                op: "localize",
                lhs: vec![queries.len()],
                rhs: vec![l],
            });
        }
        let n = queries.len() / l;
        let z = queries
            .iter()
            .enumerate()
            .map(|(k, &v)| self.stats.forward(k % l, v))
            .collect();
        let y = self.forward_batch(Tensor::new(vec![n, l], z)?)?;
        Ok(y.data()
            .chunks(2)
            .map(|u| self.bounds.denormalize([u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0)]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LocalizerModel {
    Knn(KnnModel),
    Learned(LearnedModel),
}

impl LocalizerModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        nn::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        nn::read_json(path)
    }
}

/// Fits the configured localizer.
///
/// The learned path needs a standardized database; masked entries are fed
/// as the standardized-zero fill.
pub fn train_localizer(db: &FingerprintDatabase, cfg: &LocalizerConfig) -> Result<LocalizerModel> {
    match cfg.kind {
        LocalizerKind::Knn => Ok(LocalizerModel::Knn(KnnModel::fit(db, cfg.k)?)),
        LocalizerKind::Learned => Ok(LocalizerModel::Learned(train_learned(db, cfg)?)),
    }
}

fn train_learned(db: &FingerprintDatabase, cfg: &LocalizerConfig) -> Result<LearnedModel> {
    let stats = db
        .standardization()
        .ok_or_else(|| Error::contract("learned localizer needs a standardized database"))?
        .clone();
    if cfg.batch_size == 0 || cfg.hidden.contains(&0) || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config {
            key: "localizer".into(),
            message: "batch size, hidden widths and learning rate must be positive".into(),
        });
    }
    let predicted: Vec<bool> = match db.provenance() {
        Some(p) => p.iter().map(|&p| p == Provenance::Predicted).collect(),
        None => vec![false; db.samples().len()],
    };
    let spread = match cfg.predicted_noise {
        Some(s) if s >= 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(Error::Config {
                key: "localizer.predicted_noise".into(),
                message: format!("must be finite and non-negative, got {s}"),
            })
        }
        None if predicted.contains(&true) => measured_spread(db),
        None => 0.0,
    };
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Domain(e.to_string()))?;
    let mut jitter = rng::stream(cfg.seed, 13);
    let bounds = match &cfg.bounds {
        Some(b) => *b,
        None => db.coord_bounds(),
    };
    if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
        return Err(Error::contract("localizer bounds must have positive area"));
    }
    let l = db.ru_count();
    let mut init = rng::stream(cfg.seed, 11);
    let mut params = ParamStore::new();
    let mut layers = Vec::new();
    let mut width = l;
    for (i, &w) in cfg.hidden.iter().chain(std::iter::once(&2)).enumerate() {
        layers.push(Linear::new(&mut params, &format!("loc.fc{i}"), width, w, &mut init));
        width = w;
    }
    let mut model = LearnedModel {
        layers,
        params,
        stats,
        bounds,
        history: Vec::new(),
    };
    let fill = MaskFill::StandardizedZero.value(&model.stats, 0);
    let inputs: Vec<f64> = db
        .samples()
        .iter()
        .zip(db.mask())
        .map(|(&v, &m)| if m { v } else { fill })
        .collect();
    let targets: Vec<f64> = (0..db.len()).flat_map(|i| model.bounds.normalize(db.sample_coord(i))).collect();
    let mut adam = AdamState::new(&model.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..db.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, 12);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let b = rows.len();
            let mut x: Vec<f64> = rows.iter().flat_map(|&r| inputs[r * l..(r + 1) * l].iter().copied()).collect();
            if spread > 0.0 {
                for (&r, row) in rows.iter().zip(x.chunks_mut(l)) {
                    for (v, &p) in row.iter_mut().zip(&predicted[r * l..(r + 1) * l]) {
                        if p {
                            *v += noise.sample(&mut jitter);
                        }
                    }
                }
            }
            let t: Vec<f64> = rows.iter().flat_map(|&r| targets[2 * r..2 * r + 2].iter().copied()).collect();
            let g = Graph::new();
            let vars = model.params.bind(&g);
            let mut h = g.constant(Tensor::new(vec![b, l], x)?);
            for (i, layer) in model.layers.iter().enumerate() {
                h = layer.forward(&vars, h)?;
                if i + 1 < model.layers.len() {
                    h = nn::leaky_relu(h);
                }
            }
            let loss = h.sub(g.constant(Tensor::new(vec![b, 2], t)?))?.square().mean();
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::numeric(format!("non-finite localizer loss in epoch {epoch}")));
            }
            total += v * b as f64;
            let grads = param_grads(&g, loss, &vars)?;
            adam.step(&mut model.params, &grads)?;
        }
        model.history.push(total / db.len() as f64);
    }
    Ok(model)
}

/// Pooled population std of measured entries around their (RP, RU) means.
///
/// Zero when no (RP, RU) cell holds two or more measurements.
pub fn measured_spread(db: &FingerprintDatabase) -> f64 {
    let l = db.ru_count();
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for i in 0..db.len() {
        let rp = db.rp_index()[i];
        let measured = db.provenance().map(|p| &p[i * l..(i + 1) * l]);
        for ru in 0..l {
            let is_measured = db.mask_row(i)[ru] && measured.is_none_or(|p| p[ru] == Provenance::Measured);
            if is_measured {
                cells.entry((rp, ru)).or_default().push(db.row(i)[ru]);
            }
        }
    }
    let (mut ss, mut n) = (0.0, 0usize);
    for v in cells.values().filter(|v| v.len() >= 2) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        ss += v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        n += v.len();
    }
    if n == 0 {
        0.0
    } else {
        (ss / n as f64).sqrt()
    }
}

/// Position of one raw-dB query in meters.
pub fn localize(model: &LocalizerModel, query: &[f64]) -> Result<Point> {
    match model {
        LocalizerModel::Knn(m) => m.locate(query),
        LocalizerModel::Learned(m) => {
            if query.len() != m.ru_count() {
                return Err(Error::Shape {
                    op: "localize",
                    lhs: vec![query.len()],
                    rhs: vec![m.ru_count()],
                });
            }
            Ok(m.locate_batch(query)?[0])
        }
    }
}

/// Positions for row-major raw-dB queries of width `ru_count`.
pub fn localize_batch(model: &LocalizerModel, queries: &[f64], ru_count: usize, exec: Execution) -> Result<Vec<Point>> {
    if ru_count == 0 || !queries.len().is_multiple_of(ru_count) {
        return Err(Error::Shape {
            op: "localize_batch",
            lhs: vec![queries.len()],
            rhs: vec![ru_count],
        });
    }
    let n = queries.len() / ru_count;
    const CHUNK: usize = 1024;
    let parts = exec::try_map_range(exec, n.div_ceil(CHUNK), |c| {
        let rows = &queries[c * CHUNK * ru_count..((c + 1) * CHUNK).min(n) * ru_count];
        match model {
            LocalizerModel::Knn(m) => rows.chunks(ru_count).map(|q| m.locate(q)).collect(),
            LocalizerModel::Learned(m) => m.locate_batch(rows),
        }
    })?;
    Ok(parts.concat())
}

/// Reads a query CSV with columns `rss_0..rss_{L-1}`; returns row-major values and `L`.
pub fn load_queries(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let cols: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let expected: Vec<String> = (0..cols.len()).map(|i| format!("rss_{i}")).collect();
    if cols.is_empty() || cols != expected {
        let message = match cols.iter().zip(&expected).find(|(a, b)| a != b) {
            Some((c, _)) => format!("unexpected column `{c}`; expected rss_0..rss_{{L-1}}"),
            None => "no columns".into(),
        };
        return Err(Error::Parse { line: 1, message });
    }
    let l = cols.len();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for v in rec.iter() {
            values.push(v.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid RSS value `{v}`"),
            })?);
        }
    }
    Ok((values, l))
}

/// Root mean squared Euclidean distance between estimates and truths, in meters.
pub fn position_rmse(estimates: &[Point], truth: &[Point]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::contract("position lists must be non-empty and aligned"));
    }
    let s: f64 = estimates.iter().zip(truth).map(|(a, b)| a.distance(*b).powi(2)).sum();
    Ok((s / estimates.len() as f64).sqrt())
}
