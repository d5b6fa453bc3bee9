//! Single-RU subset completion and the fusion of K prediction sets with measured entries.

use rand::seq::SliceRandom;

use crate::comgan::Comgan;
use crate::dataset::{FingerprintDatabase, Provenance};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng::Rng;
use crate::scene::Point;

/// Rows per generator call when completing a database.
const CHUNK: usize = 512;

/// Anything that maps masked raw-dB rows plus coordinates to full raw-dB rows.
pub trait Completer: Sync {
    fn ru_count(&self) -> usize;
    fn complete_batch(&self, rss: &[f64], mask: &[bool], coords: &[Point]) -> Result<Vec<f64>>;
}

impl Completer for Comgan {
    fn ru_count(&self) -> usize {
        Comgan::ru_count(self)
    }

    fn complete_batch(&self, rss: &[f64], mask: &[bool], coords: &[Point]) -> Result<Vec<f64>> {
        Comgan::complete_batch(self, rss, mask, coords)
    }
}

/// Predictions for every target sample from inputs that keep only `measured_ru`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPrediction {
    pub measured_ru: usize,
    /// Row-major `[samples, L]`, raw dB.
    pub predictions: Vec<f64>,
    pub mask: Vec<bool>,
}

/// `k` distinct RUs out of `ru_count`, uniformly without replacement.
///
/// Draws a full permutation and keeps its prefix, so for one RNG state the
/// selection for `k` is contained in the selection for `k + 1`.
pub fn select_rus(ru_count: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 || k >= ru_count {
        return Err(Error::contract(format!("K must satisfy 1 <= K < {ru_count}, got {k}")));
    }
    let mut order: Vec<usize> = (0..ru_count).collect();
    order.shuffle(rng);
    order.truncate(k);
    Ok(order)
}

/// Completes every row of `db` through `model` in parallel chunks.
pub fn complete_database(
    model: &dyn Completer,
    db: &FingerprintDatabase,
    mask: &[bool],
    exec: Execution,
) -> Result<Vec<f64>> {
    let l = db.ru_count();
    let n = db.len();
    let coords: Vec<Point> = (0..n).map(|i| db.sample_coord(i)).collect();
    let chunks = n.div_ceil(CHUNK);
    let parts = exec::try_map_range(exec, chunks, |c| {
        let (a, b) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
        model.complete_batch(&db.samples()[a * l..b * l], &mask[a * l..b * l], &coords[a..b])
    })?;
    Ok(parts.concat())
}

/// One subset per RU in `rus`; each sample must have those RUs measured.
pub fn build_subsets_for(
    db_sparse: &FingerprintDatabase,
    model: &dyn Completer,
    rus: &[usize],
    exec: Execution,
) -> Result<Vec<SubsetPrediction>> {
    let l = db_sparse.ru_count();
    if model.ru_count() != l {
        return Err(Error::Shape {
            op: "build_subsets",
            lhs: vec![l],
            rhs: vec![model.ru_count()],
        });
    }
    if let Some(ru) = rus.iter().find(|&&ru| ru >= l) {
        return Err(Error::contract(format!("RU {ru} out of range")));
    }
    for &ru in rus {
        if let Some(i) = (0..db_sparse.len()).find(|&i| !db_sparse.mask_row(i)[ru]) {
            return Err(Error::contract(format!("sample {i} has no measurement for selected RU {ru}")));
        }
    }
    rus.iter()
        .map(|&ru| {
            let keep: Vec<bool> = (0..l).map(|j| j == ru).collect();
            let mask = keep.repeat(db_sparse.len());
            Ok(SubsetPrediction {
                measured_ru: ru,
                predictions: complete_database(model, db_sparse, &mask, exec)?,
                mask: keep,
            })
        })
        .collect()
}

/// Draws `k` RUs and builds their subsets.
pub fn build_subsets(
    db_sparse: &FingerprintDatabase,
    model: &dyn Completer,
    k: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<Vec<SubsetPrediction>> {
    let rus = select_rus(db_sparse.ru_count(), k, rng)?;
    build_subsets_for(db_sparse, model, &rus, exec)
}

/// Measured entries pass through; the rest is the plain mean of the predictions.
pub fn aggregate(mask: &[bool], measured: &[f64], predictions: &[&[f64]]) -> Result<Vec<f64>> {
    if predictions.is_empty() {
        return Err(Error::contract("aggregation needs at least one prediction set"));
    }
    let l = mask.len();
    if measured.len() != l || predictions.iter().any(|p| p.len() != l) {
        return Err(Error::Shape {
            op: "aggregate",
            lhs: vec![l, measured.len()],
            rhs: predictions.iter().map(|p| p.len()).collect(),
        });
    }
    let k = predictions.len() as f64;
    Ok((0..l)
        .map(|i| {
            if mask[i] {
                measured[i]
            } else {
                predictions.iter().map(|p| p[i]).sum::<f64>() / k
            }
        })
        .collect())
}

/// Fuses subsets into a hybrid database: all entries present, provenance per entry.
pub fn fuse(db_sparse: &FingerprintDatabase, subsets: &[SubsetPrediction]) -> Result<FingerprintDatabase> {
    if subsets.is_empty() {
        return Err(Error::contract("aggregation needs at least one prediction set"));
    }
    let l = db_sparse.ru_count();
    let mut union = vec![false; l];
    for s in subsets {
        for (u, &m) in union.iter_mut().zip(&s.mask) {
            *u |= m;
        }
    }
    let n = db_sparse.len();
    let mut samples = Vec::with_capacity(n * l);
    for i in 0..n {
        let preds: Vec<&[f64]> = subsets.iter().map(|s| &s.predictions[i * l..(i + 1) * l]).collect();
        samples.extend(aggregate(&union, db_sparse.row(i), &preds)?);
    }
    let provenance = union
        .iter()
        .map(|&m| if m { Provenance::Measured } else { Provenance::Predicted })
        .collect::<Vec<_>>()
        .repeat(n);
    FingerprintDatabase::new(
        l,
        samples,
        vec![true; n * l],
        db_sparse.rp_index().to_vec(),
        db_sparse.rp_coords().clone(),
    )?
    .with_provenance(provenance)
}

/// Hybrid database from `k` randomly selected single-RU subsets.
pub fn refine_database(
    db_sparse: &FingerprintDatabase,
    model: &dyn Completer,
    k: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<FingerprintDatabase> {
    let subsets = build_subsets(db_sparse, model, k, rng, exec)?;
    fuse(db_sparse, &subsets)
}

/// Hybrid database from the given RUs.
pub fn refine_with_rus(
    db_sparse: &FingerprintDatabase,
    model: &dyn Completer,
    rus: &[usize],
    exec: Execution,
) -> Result<FingerprintDatabase> {
    let subsets = build_subsets_for(db_sparse, model, rus, exec)?;
    fuse(db_sparse, &subsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::mask_randomly;
    use crate::rng;
    use crate::scene::{build_database, rss_mean, NlosConfig, Scene};
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Returns the noiseless field regardless of the input.
    struct Oracle(Scene);

    impl Completer for Oracle {
        fn ru_count(&self) -> usize {
            self.0.ru_count()
        }

        fn complete_batch(&self, _rss: &[f64], _mask: &[bool], coords: &[Point]) -> Result<Vec<f64>> {
            let mut out = Vec::new();
            for &p in coords {
                for ru in 0..self.0.ru_count() {
                    out.push(rss_mean(p, ru, &self.0)?);
                }
            }
            Ok(out)
        }
    }

    /// Predicts `-100·kept − ru`, so each subset is identifiable.
    struct Constant;

    impl Completer for Constant {
        fn ru_count(&self) -> usize {
            6
        }

        fn complete_batch(&self, _rss: &[f64], mask: &[bool], coords: &[Point]) -> Result<Vec<f64>> {
            let kept = mask.iter().position(|&m| m).unwrap_or(0) as f64;
            Ok((0..coords.len() * 6).map(|k| -100.0 * kept - (k % 6) as f64).collect())
        }
    }

    fn noiseless() -> Scene {
        Scene {
            noise_std: 0.0,
            nlos: NlosConfig::default(),
            ..Scene::default_indoor(0)
        }
    }

    fn loop_oracle(mask: &[bool], measured: &[f64], preds: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; mask.len()];
        for i in 0..mask.len() {
            if mask[i] {
                out[i] = measured[i];
            } else {
                let mut s = 0.0;
                for p in preds {
                    s += p[i];
                }
                out[i] = s / preds.len() as f64;
            }
        }
        out
    }

    #[test]
    fn aggregate_examples() {
        let out = aggregate(&[true, false], &[-50.0, 0.0], &[&[0.0, -60.0], &[0.0, -70.0]]).unwrap();
        assert_eq!(out, vec![-50.0, -65.0]);
        let m = [-1.0, -2.0, -3.0];
        assert_eq!(aggregate(&[true; 3], &m, &[&[9.0; 3]]).unwrap(), m.to_vec());
        assert!(aggregate(&[true], &[1.0], &[]).is_err());
        assert!(aggregate(&[true, false], &[1.0], &[&[1.0, 2.0]]).is_err());
    }

    #[test]
    fn aggregate_matches_loop_oracle_on_random_instances() {
        let mut r = rng::stream(5, 0);
        for _ in 0..1000 {
            let l = r.random_range(1..10);
            let k = r.random_range(1..5);
            let mask: Vec<bool> = (0..l).map(|_| r.random::<bool>()).collect();
            let measured: Vec<f64> = (0..l).map(|_| r.random_range(-90.0..-30.0)).collect();
            let preds: Vec<Vec<f64>> = (0..k).map(|_| (0..l).map(|_| r.random_range(-90.0..-30.0)).collect()).collect();
            let refs: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
            assert_eq!(aggregate(&mask, &measured, &refs).unwrap(), loop_oracle(&mask, &measured, &preds));
        }
    }

    #[test]
    fn subsets_have_distinct_rus_and_are_seeded() {
        let db = build_database(&Scene::default_indoor(0), 2, &mut rng::stream(0, 0)).unwrap();
        let a = build_subsets(&db, &Constant, 2, &mut rng::stream(3, 0), Execution::Sequential).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].measured_ru, a[1].measured_ru);
        for s in &a {
            assert_eq!(s.mask.iter().filter(|&&m| m).count(), 1);
            assert!(s.mask[s.measured_ru]);
        }
        let b = build_subsets(&db, &Constant, 2, &mut rng::stream(3, 0), Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(build_subsets(&db, &Constant, 6, &mut rng::stream(3, 0), Execution::Sequential).is_err());
        assert!(build_subsets(&db, &Constant, 0, &mut rng::stream(3, 0), Execution::Sequential).is_err());
    }

    #[test]
    fn selection_is_nested_across_k() {
        for seed in 0..20 {
            let s1 = select_rus(6, 1, &mut rng::stream(seed, 0)).unwrap();
            let s2 = select_rus(6, 2, &mut rng::stream(seed, 0)).unwrap();
            let s3 = select_rus(6, 3, &mut rng::stream(seed, 0)).unwrap();
            assert_eq!(s1[..], s2[..1]);
            assert_eq!(s2[..], s3[..2]);
        }
    }

    #[test]
    fn oracle_generator_gives_ground_truth_hybrid() {
        let scene = noiseless();
        let db = build_database(&scene, 2, &mut rng::stream(0, 0)).unwrap();
        let hybrid = refine_database(&db, &Oracle(scene), 2, &mut rng::stream(1, 0), Execution::Parallel).unwrap();
        for (a, b) in hybrid.samples().iter().zip(db.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
        let prov = hybrid.provenance().unwrap();
        assert_eq!(prov.iter().filter(|&&p| p == Provenance::Measured).count(), 2 * db.len());
        assert!(hybrid.mask().iter().all(|&m| m));
    }

    #[test]
    fn k1_is_completion_merged_with_measurement() {
        let db = build_database(&Scene::default_indoor(1), 2, &mut rng::stream(0, 0)).unwrap();
        let hybrid = refine_with_rus(&db, &Constant, &[4], Execution::Sequential).unwrap();
        for i in 0..db.len() {
            for l in 0..6 {
                let want = if l == 4 { db.row(i)[l] } else { -400.0 - l as f64 };
                assert_eq!(hybrid.row(i)[l], want);
            }
        }
    }

    #[test]
    fn missing_selected_measurement_is_rejected() {
        let db = build_database(&Scene::default_indoor(1), 2, &mut rng::stream(0, 0)).unwrap();
        let sparse = mask_randomly(&db, 1, &mut rng::stream(1, 0)).unwrap();
        assert!(refine_with_rus(&sparse, &Constant, &[0, 1], Execution::Sequential).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_properties(
            mask in prop::collection::vec(any::<bool>(), 1..8),
            seed in any::<u64>(),
            k in 1usize..5,
        ) {
            let l = mask.len();
            let mut r = rng::stream(seed, 0);
            let measured: Vec<f64> = (0..l).map(|_| r.random_range(-90.0..-30.0)).collect();
            let preds: Vec<Vec<f64>> = (0..k).map(|_| (0..l).map(|_| r.random_range(-90.0..-30.0)).collect()).collect();
            let refs: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
            let out = aggregate(&mask, &measured, &refs).unwrap();
            let rev: Vec<&[f64]> = refs.iter().rev().copied().collect();
            let out_rev = aggregate(&mask, &measured, &rev).unwrap();
            for i in 0..l {
                if mask[i] {
                    prop_assert_eq!(out[i], measured[i]);
                } else {
                    let lo = preds.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
                    let hi = preds.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(lo - 1e-9 <= out[i] && out[i] <= hi + 1e-9);
                }
                prop_assert!((out[i] - out_rev[i]).abs() < 1e-9);
            }
        }
    }
}
