//! Fingerprint database, RP-disjoint splits, masking, standardization and CSV persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, Rect};

/// Value stored at unmeasured entries, in raw and standardized space alike.
pub const MASKED_SENTINEL: f64 = 0.0;
pub const STD_FLOOR: f64 = 1e-6;

/// Origin of an entry in a refined (hybrid) database.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Measured,
    Predicted,
}

impl Provenance {
    fn code(self) -> &'static str {
        match self {
            Provenance::Measured => "M",
            Provenance::Predicted => "P",
        }
    }
}

/// Per-RU location and scale used to standardize RSS values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizationStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub split: String,
}

impl StandardizationStats {
    pub fn ru_count(&self) -> usize {
        self.means.len()
    }

    /// True when the RU's spread was below [`STD_FLOOR`] and got clamped.
    pub fn is_floored(&self, ru: usize) -> bool {
        self.stds[ru] <= STD_FLOOR
    }

    pub fn forward(&self, ru: usize, value: f64) -> f64 {
        (value - self.means[ru]) / self.stds[ru]
    }

    pub fn inverse(&self, ru: usize, value: f64) -> f64 {
        value * self.stds[ru] + self.means[ru]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::nn::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::nn::read_json(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

/// How a masked entry is presented to a network, in standardized units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Zero after standardization, i.e. the per-RU training mean.
    #[default]
    StandardizedZero,
    /// Zero in raw dB, then standardized.
    RawZero,
}

impl MaskFill {
    pub fn value(self, stats: &StandardizationStats, ru: usize) -> f64 {
        match self {
            MaskFill::StandardizedZero => 0.0,
            MaskFill::RawZero => stats.forward(ru, 0.0),
        }
    }
}

/// Sample matrix of RSS vectors with a per-entry measurement mask and RP labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintDatabase {
    ru_count: usize,
    samples: Vec<f64>,
    mask: Vec<bool>,
    rp_index: Vec<usize>,
    rp_coords: BTreeMap<usize, Point>,
    provenance: Option<Vec<Provenance>>,
    standardization: Option<StandardizationStats>,
}

impl FingerprintDatabase {
    pub fn new(
        ru_count: usize,
        mut samples: Vec<f64>,
        mask: Vec<bool>,
        rp_index: Vec<usize>,
        rp_coords: BTreeMap<usize, Point>,
    ) -> Result<Self> {
        if ru_count == 0 {
            return Err(Error::contract("database needs at least one RU"));
        }
        let rows = rp_index.len();
        if rows == 0 {
            return Err(Error::contract("database needs at least one sample"));
        }
        if samples.len() != rows * ru_count || mask.len() != samples.len() {
            return Err(Error::contract(format!(
                "database dimensions disagree: {} values, {} mask entries, {rows} rows x {ru_count} RUs",
                samples.len(),
                mask.len()
            )));
        }
        if let Some(rp) = rp_index.iter().find(|rp| !rp_coords.contains_key(rp)) {
            return Err(Error::contract(format!("RP {rp} has no coordinate")));
        }
        for (v, &m) in samples.iter_mut().zip(&mask) {
            if !m {
                *v = MASKED_SENTINEL;
            } else if !v.is_finite() {
                return Err(Error::numeric("non-finite measured RSS value"));
            }
        }
        Ok(Self {
            ru_count,
            samples,
            mask,
            rp_index,
            rp_coords,
            provenance: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rp_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rp_index.is_empty()
    }

    pub fn ru_count(&self) -> usize {
        self.ru_count
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.ru_count..(i + 1) * self.ru_count]
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.ru_count..(i + 1) * self.ru_count]
    }

    pub fn rp_index(&self) -> &[usize] {
        &self.rp_index
    }

    pub fn rp_coords(&self) -> &BTreeMap<usize, Point> {
        &self.rp_coords
    }

    pub fn rp_coord(&self, rp: usize) -> Option<Point> {
        self.rp_coords.get(&rp).copied()
    }

    /// Coordinate of the RP that sample `i` was taken at.
    pub fn sample_coord(&self, i: usize) -> Point {
        self.rp_coords[&self.rp_index[i]]
    }

    pub fn provenance(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    pub fn standardization(&self) -> Option<&StandardizationStats> {
        self.standardization.as_ref()
    }

    /// Distinct RP ids present in the samples, ascending.
    pub fn rp_ids(&self) -> Vec<usize> {
        self.rp_index.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn rp_count(&self) -> usize {
        self.rp_ids().len()
    }

    pub fn coord_bounds(&self) -> Rect {
        Rect::bounding(self.rp_coords.values().copied()).expect("database has coordinates")
    }

    pub fn measured_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub(crate) fn with_provenance(mut self, provenance: Vec<Provenance>) -> Result<Self> {
        if provenance.len() != self.samples.len() {
            return Err(Error::contract("provenance length must match sample entries"));
        }
        self.provenance = Some(provenance);
        Ok(self)
    }

    pub(crate) fn with_standardization(mut self, stats: Option<StandardizationStats>) -> Self {
        self.standardization = stats;
        self
    }

    /// Rows `rows` (in that order) as a new database; coordinates reduced to the RPs used.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let l = self.ru_count;
        let mut samples = Vec::with_capacity(rows.len() * l);
        let mut mask = Vec::with_capacity(rows.len() * l);
        let mut rp_index = Vec::with_capacity(rows.len());
        let mut provenance = self.provenance.as_ref().map(|_| Vec::with_capacity(rows.len() * l));
        for &r in rows {
            samples.extend_from_slice(self.row(r));
            mask.extend_from_slice(self.mask_row(r));
            rp_index.push(self.rp_index[r]);
            if let (Some(out), Some(src)) = (provenance.as_mut(), self.provenance.as_ref()) {
                out.extend_from_slice(&src[r * l..(r + 1) * l]);
            }
        }
        let coords = rp_index.iter().map(|rp| (*rp, self.rp_coords[rp])).collect();
        let mut db = Self::new(l, samples, mask, rp_index, coords)?;
        db.provenance = provenance;
        db.standardization = self.standardization.clone();
        Ok(db)
    }

    /// All samples whose RP is in `rps`, in original order.
    pub fn select_rps(&self, rps: &BTreeSet<usize>) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| rps.contains(&self.rp_index[i])).collect();
        self.select_rows(&rows)
    }

    /// Same samples with a replacement mask; newly masked entries take the sentinel.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::contract("mask length must match sample entries"));
        }
        if mask.iter().zip(&self.mask).any(|(&new, &old)| new && !old) {
            return Err(Error::contract("cannot unmask an unmeasured entry"));
        }
        let mut db = Self::new(self.ru_count, self.samples.clone(), mask, self.rp_index.clone(), self.rp_coords.clone())?;
        db.standardization = self.standardization.clone();
        Ok(db)
    }

    /// Keeps only the RUs in `rus` measured, for every sample.
    pub fn keep_rus(&self, rus: &[usize]) -> Result<Self> {
        if let Some(bad) = rus.iter().find(|&&r| r >= self.ru_count) {
            return Err(Error::contract(format!("RU {bad} out of range")));
        }
        let mask = (0..self.len())
            .flat_map(|i| (0..self.ru_count).map(move |l| (i, l)))
            .map(|(i, l)| self.mask_row(i)[l] && rus.contains(&l))
            .collect();
        self.with_mask(mask)
    }

    /// Per-RP mean fingerprint over each RU's measured entries (sentinel where none).
    pub fn centroids(&self) -> Vec<(usize, Vec<f64>)> {
        let l = self.ru_count;
        let mut acc: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
        for i in 0..self.len() {
            let (sum, count) = acc.entry(self.rp_index[i]).or_insert_with(|| (vec![0.0; l], vec![0; l]));
            for ((s, c), (&v, &m)) in sum.iter_mut().zip(count.iter_mut()).zip(self.row(i).iter().zip(self.mask_row(i))) {
                if m {
                    *s += v;
                    *c += 1;
                }
            }
        }
        acc.into_iter()
            .map(|(rp, (sum, count))| {
                let c = sum
                    .iter()
                    .zip(&count)
                    .map(|(&s, &n)| if n > 0 { s / n as f64 } else { MASKED_SENTINEL })
                    .collect();
                (rp, c)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    /// RP counts for (rss_train, rss_test, loc_test).
    Counts([usize; 3]),
    /// Fractions of the RP total; the last split takes the remainder.
    Ratios([f64; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            sizes: SplitSizes::Counts([15, 15, 10]),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn counts(&self, total: usize) -> Result<[usize; 3]> {
        let counts = match self.sizes {
            SplitSizes::Counts(c) => c,
            SplitSizes::Ratios(r) => {
                if r.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Split("ratios must be positive".into()));
                }
                let sum: f64 = r.iter().sum();
                let a = (r[0] / sum * total as f64).round() as usize;
                let b = (r[1] / sum * total as f64).round() as usize;
                [a, b, total.saturating_sub(a + b)]
            }
        };
        if counts.contains(&0) {
            return Err(Error::Split(format!("every split needs at least one RP, got {counts:?}")));
        }
        if counts.iter().sum::<usize>() != total {
            return Err(Error::Split(format!(
                "split counts {counts:?} do not sum to the {total} RPs available"
            )));
        }
        Ok(counts)
    }
}

/// Three RP-disjoint databases: (rss_train, rss_test, loc_test).
pub fn split_by_rp(
    db: &FingerprintDatabase,
    spec: &SplitSpec,
) -> Result<(FingerprintDatabase, FingerprintDatabase, FingerprintDatabase)> {
    let mut rps = db.rp_ids();
    let [a, b, _] = spec.counts(rps.len())?;
    rps.shuffle(&mut crate::rng::stream(spec.seed, 0x5911));
    let set = |s: &[usize]| s.iter().copied().collect::<BTreeSet<_>>();
    Ok((
        db.select_rps(&set(&rps[..a]))?,
        db.select_rps(&set(&rps[a..a + b]))?,
        db.select_rps(&set(&rps[a + b..]))?,
    ))
}

/// Keeps `keep` uniformly chosen entries of `sample` and zeroes the rest.
pub fn apply_mask<R: Rng + ?Sized>(sample: &[f64], keep: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<bool>)> {
    let l = sample.len();
    if keep < 1 || keep >= l {
        return Err(Error::contract(format!("keep must satisfy 1 <= keep < {l}, got {keep}")));
    }
    let mut mask = vec![false; l];
    for i in index::sample(rng, l, keep) {
        mask[i] = true;
    }
    let masked = sample
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { MASKED_SENTINEL })
        .collect();
    Ok((masked, mask))
}

/// Re-masks every sample of `db`, keeping `keep` random measured RUs per sample.
pub fn mask_randomly<R: Rng + ?Sized>(db: &FingerprintDatabase, keep: usize, rng: &mut R) -> Result<FingerprintDatabase> {
    let mut mask = Vec::with_capacity(db.mask.len());
    for i in 0..db.len() {
        let (_, m) = apply_mask(db.row(i), keep, rng)?;
        mask.extend(m.iter().zip(db.mask_row(i)).map(|(&a, &b)| a && b));
    }
    db.with_mask(mask)
}

/// Per-RU mean and population std over measured entries.
pub fn fit_standardizer(db: &FingerprintDatabase, split: &str) -> Result<StandardizationStats> {
    let l = db.ru_count;
    let mut means = Vec::with_capacity(l);
    let mut stds = Vec::with_capacity(l);
    for ru in 0..l {
        let vals: Vec<f64> = (0..db.len())
            .filter(|&i| db.mask_row(i)[ru])
            .map(|i| db.row(i)[ru])
            .collect();
        if vals.len() < 2 {
            return Err(Error::contract(format!(
                "RU {ru} has {} measured entries; at least 2 are needed",
                vals.len()
            )));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(StandardizationStats {
        means,
        stds,
        split: split.to_string(),
    })
}

/// Standardizes (forward) or restores (inverse) the measured entries of `db`.
pub fn transform(
    db: &FingerprintDatabase,
    stats: &StandardizationStats,
    direction: Direction,
) -> Result<FingerprintDatabase> {
    if stats.ru_count() != db.ru_count || stats.stds.len() != db.ru_count {
        return Err(Error::Shape {
            op: "transform",
            lhs: vec![db.ru_count],
            rhs: vec![stats.ru_count()],
        });
    }
    match (direction, db.standardization.is_some()) {
        (Direction::Forward, true) => return Err(Error::contract("database is already standardized")),
        (Direction::Inverse, false) => return Err(Error::contract("database is not standardized")),
        _ => {}
    }
    let l = db.ru_count;
    let samples = db
        .samples
        .iter()
        .zip(&db.mask)
        .enumerate()
        .map(|(k, (&v, &m))| match (m, direction) {
            (false, _) => MASKED_SENTINEL,
            (true, Direction::Forward) => stats.forward(k % l, v),
            (true, Direction::Inverse) => stats.inverse(k % l, v),
        })
        .collect();
    let mut out = db.clone();
    out.samples = samples;
    out.standardization = match direction {
        Direction::Forward => Some(stats.clone()),
        Direction::Inverse => None,
    };
    Ok(out)
}

/// Path of the standardization sidecar written next to a database CSV.
pub fn stats_sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".stats.json");
    PathBuf::from(name)
}

fn header(l: usize, with_provenance: bool) -> Vec<String> {
    let mut cols = vec!["rp_id".to_string(), "x".into(), "y".into()];
    cols.extend((0..l).map(|i| format!("rss_{i}")));
    cols.extend((0..l).map(|i| format!("mask_{i}")));
    if with_provenance {
        cols.extend((0..l).map(|i| format!("provenance_{i}")));
    }
    cols
}

/// Writes `db` as CSV; a standardized database also gets a stats sidecar.
pub fn save(db: &FingerprintDatabase, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let l = db.ru_count;
    w.write_record(header(l, db.provenance.is_some())).map_err(|e| csv_io(path, e))?;
    for i in 0..db.len() {
        let p = db.sample_coord(i);
        let mut rec = vec![db.rp_index[i].to_string(), p.x.to_string(), p.y.to_string()];
        rec.extend(db.row(i).iter().map(|v| v.to_string()));
        rec.extend(db.mask_row(i).iter().map(|&m| if m { "1" } else { "0" }.to_string()));
        if let Some(prov) = &db.provenance {
            rec.extend(prov[i * l..(i + 1) * l].iter().map(|p| p.code().to_string()));
        }
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = stats_sidecar(path);
    match &db.standardization {
        Some(stats) => stats.save(&sidecar)?,
        None if sidecar.exists() => std::fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?,
        None => {}
    }
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a database CSV written by [`save`] (plus its sidecar, when present).
pub fn load(path: &Path) -> Result<FingerprintDatabase> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let cols: Vec<String> = r
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let l = cols.iter().filter(|c| c.starts_with("rss_")).count();
    let with_prov = cols.iter().any(|c| c.starts_with("provenance_"));
    let expected = header(l, with_prov);
    if l == 0 || cols != expected {
        let unknown = cols.iter().find(|c| !expected.contains(c));
        let message = match unknown {
            Some(c) => format!("unknown column `{c}`"),
            None => format!("expected columns {expected:?}, found {cols:?}"),
        };
        return Err(Error::Parse { line: 1, message });
    }

    let mut samples = Vec::new();
    let mut mask = Vec::new();
    let mut rp_index = Vec::new();
    let mut coords: BTreeMap<usize, Point> = BTreeMap::new();
    let mut provenance = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str, v: &str| Error::Parse {
            line,
            message: format!("invalid {what} `{v}`"),
        };
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad(&cols[i], &rec[i]));
        let rp: usize = rec[0].trim().parse().map_err(|_| bad("rp_id", &rec[0]))?;
        let p = Point::new(num(1)?, num(2)?);
        match coords.get(&rp) {
            Some(q) if *q != p => {
                return Err(Error::Parse {
                    line,
                    message: format!("RP {rp} has conflicting coordinates"),
                })
            }
            _ => {
                coords.insert(rp, p);
            }
        }
        rp_index.push(rp);
        for i in 0..l {
            samples.push(num(3 + i)?);
        }
        for i in 0..l {
            let c = 3 + l + i;
            mask.push(match rec[c].trim() {
                "1" => true,
                "0" => false,
                v => return Err(bad(&cols[c], v)),
            });
        }
        if with_prov {
            for i in 0..l {
                let c = 3 + 2 * l + i;
                provenance.push(match rec[c].trim() {
                    "M" => Provenance::Measured,
                    "P" => Provenance::Predicted,
                    v => return Err(bad(&cols[c], v)),
                });
            }
        }
    }
    if rp_index.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no sample rows".into(),
        });
    }
    let mut db = FingerprintDatabase::new(l, samples, mask, rp_index, coords)?;
    if with_prov {
        db = db.with_provenance(provenance)?;
    }
    let sidecar = stats_sidecar(path);
    if sidecar.exists() {
        db.standardization = Some(StandardizationStats::load(&sidecar)?);
    }
    Ok(db)
}
