//! Seeded synthetic urban scenes: rectangular roofs, road ribbons and
//! smooth water bodies, each with an exact ground-truth mask.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::RasterSample;
use crate::error::{Error, Result};
use crate::nn::fnv1a;

/// Bounds on the foreground fraction of any scene with positive density.
pub const FG_MIN: f64 = 0.05;
pub const FG_MAX: f64 = 0.6;
const TARGET_LO: f64 = 0.08;
const TARGET_HI: f64 = 0.40;
const MAX_ATTEMPTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneClass {
    Building,
    Road,
    Water,
}

impl SceneClass {
    pub const ALL: [SceneClass; 3] = [SceneClass::Building, SceneClass::Road, SceneClass::Water];

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Building => "building",
            SceneClass::Road => "road",
            SceneClass::Water => "water",
        }
    }
}

impl fmt::Display for SceneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown class `{s}` (expected building, road or water)")))
    }
}

/// Scene parameters. Scales are in pixels: roof side length, road width,
/// or water blob radius. `density` in `[0, 1]` moves the target foreground
/// fraction between 0.08 and 0.40.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub size: usize,
    pub object_class: SceneClass,
    pub density: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// Class defaults for a `size × size` scene.
    pub fn new(object_class: SceneClass, size: usize, seed: u64) -> Self {
        let s = size as f64;
        let (min_scale, max_scale) = match object_class {
            SceneClass::Building => ((s / 10.0).max(4.0), (s / 4.0).max(6.0)),
            SceneClass::Road => (3.0, 8.0),
            SceneClass::Water => ((s / 8.0).max(3.0), (s / 4.0).max(5.0)),
        };
        Self {
            size,
            object_class,
            density: 0.5,
            min_scale,
            max_scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::config(format!("scene size {} is below 8", self.size)));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::config(format!("infeasible density {} (expected [0, 1])", self.density)));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(Error::config(format!(
                "object scale range [{}, {}] is empty",
                self.min_scale, self.max_scale
            )));
        }
        Ok(())
    }

    pub fn target_fraction(&self) -> f64 {
        TARGET_LO + (TARGET_HI - TARGET_LO) * self.density
    }
}

fn fraction(mask: &Array2<u8>) -> f64 {
    mask.iter().filter(|v| **v == 1).count() as f64 / mask.len() as f64
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, amp: f64) -> u8 {
    (base + rng.random_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8
}

struct Canvas {
    image: Array3<u8>,
    mask: Array2<u8>,
}

impl Canvas {
    fn background(size: usize, rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64) -> Self {
        let tint: Vec<f64> = base.iter().map(|b| b + rng.random_range(-12.0..=12.0)).collect();
        let mut image = Array3::zeros((3, size, size));
        for i in 0..size {
            for j in 0..size {
                for c in 0..3 {
                    image[[c, i, j]] = jitter(rng, tint[c], amp);
                }
            }
        }
        Self {
            image,
            mask: Array2::zeros((size, size)),
        }
    }

    fn paint(&mut self, rng: &mut ChaCha8Rng, pixels: &[(usize, usize)], color: [f64; 3], amp: f64) {
        for &(i, j) in pixels {
            for (c, &base) in color.iter().enumerate() {
                self.image[[c, i, j]] = jitter(rng, base, amp);
            }
            self.mask[[i, j]] = 1;
        }
    }
}

/// Adds objects drawn by `draw` until the target fraction is reached,
/// rejecting any that would push the scene past `FG_MAX`.
fn fill<F>(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng, mut draw: F) -> Result<Vec<Vec<(usize, usize)>>>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<(usize, usize)>,
{
    let n = spec.size;
    let mut occupied = Array2::<u8>::zeros((n, n));
    let mut objects = Vec::new();
    if spec.density == 0.0 {
        return Ok(objects);
    }
    let target = spec.target_fraction();
    let mut attempts = 0;
    while fraction(&occupied) < target {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::config(format!(
                "infeasible density {}: reached foreground {:.3} of target {target:.3} after {MAX_ATTEMPTS} objects",
                spec.density,
                fraction(&occupied)
            )));
        }
        let px = draw(rng);
        if px.is_empty() {
            continue;
        }
        let mut trial = occupied.clone();
        for &(i, j) in &px {
            trial[[i, j]] = 1;
        }
        if fraction(&trial) <= FG_MAX {
            occupied = trial;
            objects.push(px);
        }
    }
    Ok(objects)
}

fn rectangle(rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec) -> Vec<(usize, usize)> {
    let n = spec.size as f64;
    let a = rng.random_range(spec.min_scale..=spec.max_scale) / 2.0;
    let b = rng.random_range(spec.min_scale..=spec.max_scale) / 2.0;
    let ci = rng.random_range(0.0..n);
    let cj = rng.random_range(0.0..n);
    let theta = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..PI / 2.0) };
    let (s, c) = theta.sin_cos();
    let mut px = Vec::new();
    for i in 0..spec.size {
        for j in 0..spec.size {
            let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
            let u = c * di + s * dj;
            let v = -s * di + c * dj;
            if u.abs() <= a && v.abs() <= b {
                px.push((i, j));
            }
        }
    }
    px
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn border_point(rng: &mut ChaCha8Rng, n: f64) -> (f64, f64) {
    let t = rng.random_range(0.0..n);
    match rng.random_range(0..4) {
        0 => (0.0, t),
        1 => (n, t),
        2 => (t, 0.0),
        _ => (t, n),
    }
}

/// Border-to-border polyline through an interior bend point.
fn ribbon(rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec) -> Vec<(usize, usize)> {
    let n = spec.size as f64;
    let half = rng.random_range(spec.min_scale..=spec.max_scale) / 2.0;
    let a = border_point(rng, n);
    let b = border_point(rng, n);
    let mid = (rng.random_range(0.25 * n..0.75 * n), rng.random_range(0.25 * n..0.75 * n));
    let mut px = Vec::new();
    for i in 0..spec.size {
        for j in 0..spec.size {
            let p = (i as f64 + 0.5, j as f64 + 0.5);
            if segment_distance(p, a, mid).min(segment_distance(p, mid, b)) <= half {
                px.push((i, j));
            }
        }
    }
    px
}

/// Gaussian bump field; the water body is where the summed field exceeds 0.5.
struct Blobs {
    field: Array2<f64>,
}

impl Blobs {
    fn bump(&self, rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec) -> (Array2<f64>, Vec<(usize, usize)>) {
        let n = spec.size as f64;
        let r = rng.random_range(spec.min_scale..=spec.max_scale);
        let ci = rng.random_range(0.0..n);
        let cj = rng.random_range(0.0..n);
        let (ri, rj) = (r * rng.random_range(0.7..1.3), r * rng.random_range(0.7..1.3));
        let mut field = self.field.clone();
        // 0.5 crossing of a unit-height Gaussian at distance r
        let k = 2.0 * (2.0f64).ln();
        field.indexed_iter_mut().for_each(|((i, j), f)| {
            let di = (i as f64 + 0.5 - ci) / ri;
            let dj = (j as f64 + 0.5 - cj) / rj;
            *f += (-(di * di + dj * dj) * k / 2.0).exp();
        });
        let px = field
            .indexed_iter()
            .filter(|(_, f)| **f > 0.5)
            .map(|(ij, _)| ij)
            .collect();
        (field, px)
    }
}

/// Renders one scene; identical spec and seed give identical bytes.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<RasterSample> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(spec.object_class.name().as_bytes(), spec.seed));
    let id = format!("synthetic-{}-{}", spec.object_class, spec.seed);
    let canvas = match spec.object_class {
        SceneClass::Building => {
            let mut cv = Canvas::background(n, &mut rng, [92.0, 108.0, 78.0], 18.0);
            let objects = fill(spec, &mut rng, |r| rectangle(r, spec))?;
            for px in objects {
                let g = rng.random_range(175.0..225.0);
                let color = [g + rng.random_range(0.0..25.0), g - rng.random_range(0.0..30.0), g - rng.random_range(0.0..40.0)];
                cv.paint(&mut rng, &px, color, 12.0);
            }
            cv
        }
        SceneClass::Road => {
            let mut cv = Canvas::background(n, &mut rng, [80.0, 110.0, 70.0], 20.0);
            let objects = fill(spec, &mut rng, |r| ribbon(r, spec))?;
            let g = rng.random_range(125.0..150.0);
            for px in objects {
                cv.paint(&mut rng, &px, [g, g, g + 6.0], 8.0);
            }
            cv
        }
        SceneClass::Water => {
            let mut cv = Canvas::background(n, &mut rng, [88.0, 100.0, 76.0], 14.0);
            let mut blobs = Blobs {
                field: Array2::zeros((n, n)),
            };
            let _ = fill(spec, &mut rng, |r| {
                let (field, px) = blobs.bump(r, spec);
                // only commit the field if the trial is accepted below
                let frac = px.len() as f64 / (n * n) as f64;
                if frac <= FG_MAX {
                    blobs.field = field;
                }
                px
            })?;
            let water = [48.0, 70.0, 96.0];
            for i in 0..n {
                for j in 0..n {
                    let f = blobs.field[[i, j]];
                    // soft blend across the shoreline, exact mask at 0.5
                    let t = 1.0 / (1.0 + (-(f - 0.5) * 12.0).exp());
                    for (c, &w) in water.iter().enumerate() {
                        let bg = cv.image[[c, i, j]] as f64;
                        let v = (1.0 - t) * bg + t * (w + rng.random_range(-6.0..=6.0));
                        cv.image[[c, i, j]] = v.round().clamp(0.0, 255.0) as u8;
                    }
                    cv.mask[[i, j]] = (f > 0.5) as u8;
                }
            }
            cv
        }
    };
    let sample = RasterSample::new(canvas.image, Some(canvas.mask), id)?;
    Ok(sample)
}

/// `count` scenes with seeds `seed, seed + 1, ...`.
pub fn generate_batch(class: SceneClass, size: usize, count: usize, seed: u64) -> Result<Vec<RasterSample>> {
    (0..count as u64)
        .map(|i| generate_synthetic(&SyntheticSceneSpec::new(class, size, seed.wrapping_add(i))))
        .collect()
}
