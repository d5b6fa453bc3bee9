//! Synthetic localization scenes and log-distance RSS observations.
//!
//! The received level at distance `d` from a radio unit is
//! `tx_offset - alpha * ln(d)`, plus Gaussian noise and an optional
//! non-line-of-sight attenuation. Whether a (position, RU) pair is
//! obstructed is a deterministic hash of the scene seed, the position and
//! the RU, so repeated draws at one reference point share the same
//! obstruction pattern.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::FingerprintDatabase;
use crate::error::{Error, Result};
use crate::rng::{mix64, unit_from_hash};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub const fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn expanded(&self, margin: f64) -> Rect {
        Rect {
            min: Point::new(self.min.x - margin, self.min.y - margin),
            max: Point::new(self.max.x + margin, self.max.y + margin),
        }
    }

    /// Maps `p` to the unit square spanned by this rectangle.
    pub fn normalize(&self, p: Point) -> [f64; 2] {
        [
            (p.x - self.min.x) / self.width(),
            (p.y - self.min.y) / self.height(),
        ]
    }

    pub fn denormalize(&self, u: [f64; 2]) -> Point {
        Point::new(
            self.min.x + u[0] * self.width(),
            self.min.y + u[1] * self.height(),
        )
    }

    /// Smallest rectangle holding every point.
    pub fn bounding(points: impl IntoIterator<Item = Point>) -> Option<Rect> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut r = Rect::new(first, first);
        for p in it {
            r.min.x = r.min.x.min(p.x);
            r.min.y = r.min.y.min(p.y);
            r.max.x = r.max.x.max(p.x);
            r.max.y = r.max.y.max(p.y);
        }
        Some(r)
    }
}

/// Bernoulli-gated constant attenuation per (position, RU) pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlosConfig {
    pub probability: f64,
    /// Attenuation in dB for each RU; empty disables the effect.
    #[serde(default)]
    pub attenuation_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub ru_positions: Vec<Point>,
    pub area_bounds: Rect,
    pub grid_spacing: f64,
    /// Path-loss exponent of the natural-log model.
    pub alpha: f64,
    /// Additive level in dB absorbing transmit power, antenna gain and the reference shift.
    pub tx_offset: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub nlos: NlosConfig,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub index: usize,
    pub coord: Point,
}

impl Scene {
    /// 10 m x 4 m room, 1 m grid (40 RPs), six RUs evenly spaced on the perimeter.
    pub fn default_indoor(seed: u64) -> Self {
        let area = Rect::new(Point::new(0.0, 0.0), Point::new(10.0, 4.0));
        Self {
            ru_positions: perimeter_positions(&area, 6),
            area_bounds: area,
            grid_spacing: 1.0,
            alpha: 13.0,
            tx_offset: -40.0,
            noise_std: 3.0,
            nlos: NlosConfig {
                probability: 0.1,
                attenuation_db: vec![5.0; 6],
            },
            seed,
        }
    }

    pub fn ru_count(&self) -> usize {
        self.ru_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.to_string(),
                message,
            })
        };
        if self.ru_positions.len() < 2 {
            return bad("ru_positions", format!("need at least 2 RUs, got {}", self.ru_positions.len()));
        }
        if !(self.area_bounds.width() > 0.0 && self.area_bounds.height() > 0.0) {
            return bad("area_bounds", "degenerate rectangle".into());
        }
        if !(self.grid_spacing > 0.0) {
            return bad("grid_spacing", format!("must be positive, got {}", self.grid_spacing));
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", format!("must be positive, got {}", self.alpha));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", format!("must be non-negative, got {}", self.noise_std));
        }
        if !self.tx_offset.is_finite() {
            return bad("tx_offset", "must be finite".into());
        }
        for (i, p) in self.ru_positions.iter().enumerate() {
            if !self.area_bounds.contains(*p) {
                return bad(&format!("ru_positions[{i}]"), format!("{p:?} outside area_bounds"));
            }
        }
        if !(0.0..=1.0).contains(&self.nlos.probability) {
            return bad("nlos.probability", format!("must lie in [0, 1], got {}", self.nlos.probability));
        }
        let n = self.nlos.attenuation_db.len();
        if n != 0 && n != self.ru_count() {
            return bad("nlos.attenuation_db", format!("expected 0 or {} entries, got {n}", self.ru_count()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::nn::write_json(path, self)
    }

    pub fn reference_points(&self) -> Result<Vec<ReferencePoint>> {
        generate_grid(&self.area_bounds, self.grid_spacing)
    }

    /// NLoS attenuation for `ru` observed at `p`; zero when unobstructed.
    pub fn nlos_attenuation(&self, p: Point, ru: usize) -> f64 {
        let Some(&att) = self.nlos.attenuation_db.get(ru) else {
            return 0.0;
        };
        if self.nlos.probability <= 0.0 {
            return 0.0;
        }
        let q = |v: f64| (v * 1e6).round() as i64 as u64;
        let h = mix64(self.seed ^ mix64(q(p.x) ^ mix64(q(p.y) ^ mix64(ru as u64 + 1))));
        if unit_from_hash(h) < self.nlos.probability {
            att
        } else {
            0.0
        }
    }
}

/// `count` points equally spaced along the rectangle perimeter, offset by half a step.
pub fn perimeter_positions(area: &Rect, count: usize) -> Vec<Point> {
    let (w, h) = (area.width(), area.height());
    let perimeter = 2.0 * (w + h);
    (0..count)
        .map(|k| {
            let s = (k as f64 + 0.5) * perimeter / count as f64;
            let (x, y) = if s < w {
                (s, 0.0)
            } else if s < w + h {
                (w, s - w)
            } else if s < 2.0 * w + h {
                (w - (s - w - h), h)
            } else {
                (0.0, h - (s - 2.0 * w - h))
            };
            Point::new(area.min.x + x, area.min.y + y)
        })
        .collect()
}

/// Noise-free RSS (dB) of `ru_index` at `p`.
pub fn rss_mean(p: Point, ru_index: usize, scene: &Scene) -> Result<f64> {
    let ru = *scene
        .ru_positions
        .get(ru_index)
        .ok_or_else(|| Error::contract(format!("RU index {ru_index} out of range")))?;
    let d = p.distance(ru);
    if !(d > 0.0) {
        return Err(Error::Domain(format!("zero distance to RU {ru_index}: log singularity")));
    }
    Ok(scene.tx_offset - scene.alpha * d.ln())
}

/// One noisy RSS draw.
pub fn sample_rss<R: Rng + ?Sized>(p: Point, ru_index: usize, scene: &Scene, rng: &mut R) -> Result<f64> {
    let mean = rss_mean(p, ru_index, scene)?;
    let noise = if scene.noise_std > 0.0 {
        Normal::new(0.0, scene.noise_std)
            .map_err(|e| Error::Domain(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(mean + noise - scene.nlos_attenuation(p, ru_index))
}

/// Grid-cell centers of spacing `spacing` covering `bounds`, row-major (x fastest).
pub fn generate_grid(bounds: &Rect, spacing: f64) -> Result<Vec<ReferencePoint>> {
    if !(spacing > 0.0) || !(bounds.width() > 0.0 && bounds.height() > 0.0) {
        return Err(Error::Domain("degenerate grid bounds or spacing".into()));
    }
    let nx = (bounds.width() / spacing + 1e-9).floor() as usize;
    let ny = (bounds.height() / spacing + 1e-9).floor() as usize;
    if nx == 0 || ny == 0 {
        return Err(Error::Domain(format!(
            "grid spacing {spacing} exceeds a bound dimension ({} x {})",
            bounds.width(),
            bounds.height()
        )));
    }
    Ok((0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .enumerate()
        .map(|(index, (i, j))| ReferencePoint {
            index,
            coord: Point::new(
                bounds.min.x + (i as f64 + 0.5) * spacing,
                bounds.min.y + (j as f64 + 0.5) * spacing,
            ),
        })
        .collect())
}

/// `samples_per_rp` fully measured RSS vectors at every reference point.
pub fn build_database<R: Rng + ?Sized>(
    scene: &Scene,
    samples_per_rp: usize,
    rng: &mut R,
) -> Result<FingerprintDatabase> {
    if samples_per_rp == 0 {
        return Err(Error::contract("samples_per_rp must be at least 1"));
    }
    scene.validate()?;
    let rps = scene.reference_points()?;
    let l = scene.ru_count();
    let mut samples = Vec::with_capacity(rps.len() * samples_per_rp * l);
    let mut rp_index = Vec::with_capacity(rps.len() * samples_per_rp);
    for rp in &rps {
        for _ in 0..samples_per_rp {
            for ru in 0..l {
                samples.push(sample_rss(rp.coord, ru, scene, rng)?);
            }
            rp_index.push(rp.index);
        }
    }
    let coords: BTreeMap<usize, Point> = rps.iter().map(|rp| (rp.index, rp.coord)).collect();
    let mask = vec![true; samples.len()];
    FingerprintDatabase::new(l, samples, mask, rp_index, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scene(alpha: f64, beta: f64, sigma: f64) -> Scene {
        Scene {
            alpha,
            tx_offset: beta,
            noise_std: sigma,
            nlos: NlosConfig::default(),
            ru_positions: vec![Point::new(0.0, 0.0), Point::new(10.0, 4.0)],
            ..Scene::default_indoor(1)
        }
    }

    #[test]
    fn rss_mean_examples() {
        let s = scene(2.0, 0.0, 0.0);
        assert_eq!(rss_mean(Point::new(1.0, 0.0), 0, &s).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((rss_mean(Point::new(e, 0.0), 0, &s).unwrap() + 2.0).abs() < 1e-12);
        let s = scene(3.5, -30.0, 0.0);
        let v = rss_mean(Point::new(6.0, 8.0), 0, &s).unwrap();
        assert!((v - (-30.0 - 3.5 * 10f64.ln())).abs() < 1e-12, "{v}");
        assert!((v + 38.0585).abs() < 1e-3);
    }

    #[test]
    fn rss_mean_zero_distance_is_domain_error() {
        let s = scene(2.0, 0.0, 0.0);
        assert!(matches!(rss_mean(Point::new(0.0, 0.0), 0, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn rss_mean_decreases_with_distance() {
        let s = scene(3.0, -20.0, 0.0);
        let vals: Vec<f64> = (1..50)
            .map(|i| rss_mean(Point::new(0.1 * i as f64, 0.0), 0, &s).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn noiseless_sample_equals_mean() {
        let s = scene(3.0, -20.0, 0.0);
        let mut r = rng::stream(9, 0);
        for i in 0..20 {
            let p = Point::new(0.3 + 0.4 * i as f64, 1.7);
            for ru in 0..2 {
                assert_eq!(sample_rss(p, ru, &s, &mut r).unwrap(), rss_mean(p, ru, &s).unwrap());
            }
        }
    }

    #[test]
    fn sample_is_seed_reproducible() {
        let s = scene(3.0, -20.0, 4.0);
        let p = Point::new(2.0, 3.0);
        let a = sample_rss(p, 1, &s, &mut rng::stream(42, 0)).unwrap();
        let b = sample_rss(p, 1, &s, &mut rng::stream(42, 0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn sample_moments_match_noise_model() {
        let s = scene(3.0, -20.0, 4.0);
        let p = Point::new(2.0, 3.0);
        let mean = rss_mean(p, 0, &s).unwrap();
        let mut r = rng::stream(3, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_rss(p, 0, &s, &mut r).unwrap()).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((m - mean).abs() < 0.1, "{m} vs {mean}");
        assert!((sd - 4.0).abs() < 0.08, "{sd}");
    }

    #[test]
    fn nlos_is_a_fixed_pattern_per_pair() {
        let mut s = Scene::default_indoor(5);
        s.nlos.probability = 0.5;
        let rps = s.reference_points().unwrap();
        let hits: usize = rps
            .iter()
            .flat_map(|rp| (0..6).map(move |ru| (rp.coord, ru)))
            .filter(|&(p, ru)| s.nlos_attenuation(p, ru) > 0.0)
            .count();
        assert!(hits > 60 && hits < 180, "{hits}");
        let p = rps[7].coord;
        assert_eq!(s.nlos_attenuation(p, 2), s.nlos_attenuation(p, 2));
    }

    #[test]
    fn grid_examples() {
        let room = Rect::new(Point::new(0.0, 0.0), Point::new(10.0, 4.0));
        assert_eq!(generate_grid(&room, 1.0).unwrap().len(), 40);
        let sq = Rect::new(Point::new(0.0, 0.0), Point::new(2.0, 2.0));
        let g: Vec<_> = generate_grid(&sq, 1.0).unwrap().iter().map(|r| (r.coord.x, r.coord.y)).collect();
        assert_eq!(g, vec![(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)]);
        let unit = Rect::new(Point::new(0.0, 0.0), Point::new(1.0, 1.0));
        assert!(generate_grid(&unit, 2.0).is_err());
    }

    #[test]
    fn grid_centers_are_interior_and_spaced() {
        let room = Rect::new(Point::new(-1.0, 2.0), Point::new(6.5, 5.0));
        let g = generate_grid(&room, 0.75).unwrap();
        for (i, rp) in g.iter().enumerate() {
            assert_eq!(rp.index, i);
            assert!(rp.coord.x > room.min.x && rp.coord.x < room.max.x);
            assert!(rp.coord.y > room.min.y && rp.coord.y < room.max.y);
        }
        for a in &g {
            for b in &g {
                if a.index != b.index {
                    let dx = (a.coord.x - b.coord.x).abs();
                    let dy = (a.coord.y - b.coord.y).abs();
                    assert!(dx >= 0.75 - 1e-9 || dy >= 0.75 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn default_scene_database_shape() {
        let s = Scene::default_indoor(0);
        s.validate().unwrap();
        assert!(s.ru_positions.iter().all(|p| s.area_bounds.contains(*p)));
        let db = build_database(&s, 381, &mut rng::stream(0, 1)).unwrap();
        assert_eq!(db.len(), 15_240);
        assert_eq!(db.ru_count(), 6);
        assert!(db.rp_index().iter().all(|i| db.rp_coord(*i).is_some()));
    }

    #[test]
    fn database_is_deterministic_and_single_row_works() {
        let s = Scene::default_indoor(3);
        let a = build_database(&s, 4, &mut rng::stream(1, 1)).unwrap();
        let b = build_database(&s, 4, &mut rng::stream(1, 1)).unwrap();
        assert_eq!(a, b);
        let one = Scene {
            area_bounds: Rect::new(Point::new(0.0, 0.0), Point::new(1.0, 1.0)),
            ru_positions: vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0)],
            nlos: NlosConfig::default(),
            ..Scene::default_indoor(3)
        };
        assert_eq!(build_database(&one, 1, &mut rng::stream(0, 0)).unwrap().len(), 1);
    }

    #[test]
    fn scene_json_rejects_unknown_keys() {
        let s = Scene::default_indoor(2);
        let mut v = serde_json::to_value(&s).unwrap();
        let back: Scene = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, s);
        v["alhpa"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<Scene>(v).is_err());
    }

    #[test]
    fn validate_catches_bad_scene() {
        let mut s = Scene::default_indoor(0);
        s.ru_positions[0] = Point::new(20.0, 0.0);
        assert!(s.validate().is_err());
        let mut s = Scene::default_indoor(0);
        s.ru_positions.truncate(1);
        assert!(s.validate().is_err());
    }
}
