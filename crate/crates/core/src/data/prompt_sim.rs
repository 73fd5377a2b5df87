//! Degraded mask, point and box prompts with a controlled overlap to the
//! ground truth.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Achieved overlap must land within this distance of the target.
pub const OVERLAP_TOLERANCE: f64 = 0.02;
const MAX_ITERS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Mask,
    Point,
    Box,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Mask, PromptKind::Point, PromptKind::Box];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Mask => "mask",
            PromptKind::Point => "point",
            PromptKind::Box => "box",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown prompt kind `{s}` (expected mask, point or box)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSimSpec {
    pub kind: PromptKind,
    /// Percent, in `(0, 100]`.
    pub target_overlap: u32,
    pub num_points: usize,
    pub seed: u64,
}

impl PromptSimSpec {
    pub fn new(kind: PromptKind, target_overlap: u32, seed: u64) -> Self {
        Self {
            kind,
            target_overlap,
            num_points: 20,
            seed,
        }
    }

    pub fn target(&self) -> f64 {
        self.target_overlap as f64 / 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCue {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
}

/// Continuous box `[r0, r1) × [c0, c1)` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub r0: f64,
    pub c0: f64,
    pub r1: f64,
    pub c1: f64,
}

impl BoxPrompt {
    pub fn area(&self) -> f64 {
        (self.r1 - self.r0).max(0.0) * (self.c1 - self.c0).max(0.0)
    }

    pub fn iou(&self, o: &BoxPrompt) -> f64 {
        let ih = (self.r1.min(o.r1) - self.r0.max(o.r0)).max(0.0);
        let iw = (self.c1.min(o.c1) - self.c0.max(o.c0)).max(0.0);
        let inter = ih * iw;
        let union = self.area() + o.area() - inter;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn shifted(&self, dr: f64, dc: f64) -> BoxPrompt {
        BoxPrompt {
            r0: self.r0 + dr,
            c0: self.c0 + dc,
            r1: self.r1 + dr,
            c1: self.c1 + dc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptData {
    Mask(Array2<u8>),
    Points(Vec<PointCue>),
    Box(BoxPrompt),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPrompt {
    pub data: PromptData,
    /// Mask IoU, box IoU or point match ratio, in `[0, 1]`.
    pub achieved: f64,
}

impl SimulatedPrompt {
    /// Binary raster of the prompt: the mask itself, pixels covered by the
    /// box, or the positive points.
    pub fn rasterize(&self, height: usize, width: usize) -> Array2<u8> {
        match &self.data {
            PromptData::Mask(m) => m.clone(),
            PromptData::Points(pts) => {
                let mut m = Array2::zeros((height, width));
                for p in pts.iter().filter(|p| p.positive) {
                    m[[p.row, p.col]] = 1;
                }
                m
            }
            PromptData::Box(b) => Array2::from_shape_fn((height, width), |(i, j)| {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                (y >= b.r0 && y < b.r1 && x >= b.c0 && x < b.c1) as u8
            }),
        }
    }
}

pub fn mask_iou(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x == 1 && *y == 1) as usize;
        union += (*x == 1 || *y == 1) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn has_neighbor(m: &Array2<u8>, i: usize, j: usize, value: u8) -> bool {
    let (h, w) = m.dim();
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            let (r, c) = (i as isize + di, j as isize + dj);
            if (di, dj) != (0, 0) && r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m[[r as usize, c as usize]] == value {
                return true;
            }
        }
    }
    false
}

/// Random partial erosion (of true-positive frontier pixels) and dilation
/// (into background next to the prompt) with a 3×3 neighbourhood. Each step
/// lowers the IoU; a step that overshoots is undone and the step size halved.
fn degrade_mask(gt: &Array2<u8>, target: f64, rng: &mut ChaCha8Rng) -> Result<(Array2<u8>, f64)> {
    let mut cur = gt.clone();
    let mut iou = 1.0;
    let mut step = 0.5;
    let mut best = (cur.clone(), iou);
    for _ in 0..MAX_ITERS {
        if (iou - target).abs() <= OVERLAP_TOLERANCE / 2.0 {
            return Ok((cur, iou));
        }
        let erode = rng.random_bool(0.5);
        let frontier: Vec<(usize, usize)> = cur
            .indexed_iter()
            .filter(|&((i, j), v)| {
                if erode {
                    *v == 1 && gt[[i, j]] == 1 && has_neighbor(&cur, i, j, 0)
                } else {
                    *v == 0 && gt[[i, j]] == 0 && has_neighbor(&cur, i, j, 1)
                }
            })
            .map(|(ij, _)| ij)
            .collect();
        if frontier.is_empty() {
            continue;
        }
        let k = ((frontier.len() as f64 * step).round() as usize).clamp(1, frontier.len());
        let mut trial = cur.clone();
        for &(i, j) in frontier.choose_multiple(rng, k) {
            trial[[i, j]] = if erode { 0 } else { 1 };
        }
        let t_iou = mask_iou(&trial, gt);
        if t_iou < target - OVERLAP_TOLERANCE / 2.0 {
            step /= 2.0;
            if k == 1 && t_iou >= target - OVERLAP_TOLERANCE {
                // single-pixel step still inside the tolerance band
                return Ok((trial, t_iou));
            }
            continue;
        }
        cur = trial;
        iou = t_iou;
        if (iou - target).abs() < (best.1 - target).abs() {
            best = (cur.clone(), iou);
        }
    }
    if (best.1 - target).abs() <= OVERLAP_TOLERANCE {
        return Ok(best);
    }
    Err(Error::data(format!(
        "mask prompt could not reach IoU {target:.2}; best achieved {:.4}",
        best.1
    )))
}

fn bounding_box(gt: &Array2<u8>) -> Option<BoxPrompt> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((i, j), v) in gt.indexed_iter() {
        if *v == 1 {
            b = Some(match b {
                None => (i, j, i, j),
                Some((r0, c0, r1, c1)) => (r0.min(i), c0.min(j), r1.max(i), c1.max(j)),
            });
        }
    }
    b.map(|(r0, c0, r1, c1)| BoxPrompt {
        r0: r0 as f64,
        c0: c0 as f64,
        r1: (r1 + 1) as f64,
        c1: (c1 + 1) as f64,
    })
}

/// Offsets the GT box along a random direction; box IoU falls monotonically
/// with the offset length, which is found by bisection.
fn offset_box(gt: &Array2<u8>, target: f64, rng: &mut ChaCha8Rng) -> Result<(BoxPrompt, f64)> {
    let b = bounding_box(gt).ok_or_else(|| Error::data("box prompt needs a non-empty ground truth"))?;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (ur, uc) = (theta.sin(), theta.cos());
    let at = |d: f64| b.shifted(d * ur, d * uc);
    let (mut lo, mut hi) = (0.0, (b.r1 - b.r0) + (b.c1 - b.c0));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if b.iou(&at(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let out = at(0.5 * (lo + hi));
    Ok((out, b.iou(&out)))
}

/// `round(N · target)` of the `N` cues carry the GT label at their pixel;
/// the rest carry the opposite label.
fn sample_points(gt: &Array2<u8>, target: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<PointCue>, f64)> {
    if n == 0 {
        return Err(Error::config("point prompts need num_points >= 1"));
    }
    let fg: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, v)| **v == 1).map(|(ij, _)| ij).collect();
    let bg: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, v)| **v == 0).map(|(ij, _)| ij).collect();
    if fg.is_empty() {
        return Err(Error::data("point prompt needs a non-empty ground truth"));
    }
    let matched = ((n as f64 * target).round() as usize).min(n);
    let mut correct: Vec<bool> = (0..n).map(|i| i < matched).collect();
    correct.shuffle(rng);
    let mut pts = Vec::with_capacity(n);
    for ok in correct {
        let from_fg = bg.is_empty() || rng.random_bool(0.5);
        let pool = if from_fg { &fg } else { &bg };
        let (row, col) = pool[rng.random_range(0..pool.len())];
        pts.push(PointCue {
            row,
            col,
            positive: from_fg == ok,
        });
    }
    Ok((pts, matched as f64 / n as f64))
}

/// Produces a prompt whose overlap with `gt` is within
/// [`OVERLAP_TOLERANCE`] of the target.
pub fn simulate_prompt(gt: &Array2<u8>, spec: &PromptSimSpec) -> Result<SimulatedPrompt> {
    if spec.target_overlap == 0 || spec.target_overlap > 100 {
        return Err(Error::config(format!(
            "target_overlap must lie in (0, 100], got {}",
            spec.target_overlap
        )));
    }
    if let Some(v) = gt.iter().find(|v| **v > 1) {
        return Err(Error::validation(format!("ground truth value {v} is not binary")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target = spec.target();
    let (data, achieved) = match spec.kind {
        PromptKind::Mask => {
            let (m, iou) = if target == 1.0 {
                (gt.clone(), 1.0)
            } else {
                if !gt.iter().any(|v| *v == 1) {
                    return Err(Error::data("mask prompt below 100% needs a non-empty ground truth"));
                }
                degrade_mask(gt, target, &mut rng)?
            };
            (PromptData::Mask(m), iou)
        }
        PromptKind::Box => {
            let (b, iou) = offset_box(gt, target, &mut rng)?;
            (PromptData::Box(b), iou)
        }
        PromptKind::Point => {
            let (p, r) = sample_points(gt, target, spec.num_points, &mut rng)?;
            (PromptData::Points(p), r)
        }
    };
    Ok(SimulatedPrompt { data, achieved })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, lo: usize, hi: usize) -> Array2<u8> {
        Array2::from_shape_fn((n, n), |(i, j)| (i >= lo && i < hi && j >= lo && j < hi) as u8)
    }

    #[test]
    fn perfect_mask_prompt() {
        let gt = square(32, 8, 24);
        let p = simulate_prompt(&gt, &PromptSimSpec::new(PromptKind::Mask, 100, 0)).unwrap();
        assert_eq!(p.achieved, 1.0);
        assert_eq!(p.data, PromptData::Mask(gt));
    }

    #[test]
    fn half_overlap_mask_prompt() {
        let gt = square(64, 16, 48);
        let p = simulate_prompt(&gt, &PromptSimSpec::new(PromptKind::Mask, 50, 3)).unwrap();
        let PromptData::Mask(m) = &p.data else { panic!() };
        let iou = mask_iou(m, &gt);
        assert_eq!(iou, p.achieved);
        assert!((0.48..=0.52).contains(&iou), "{iou}");
    }

    #[test]
    fn box_prompt_hits_target() {
        let gt = square(64, 10, 40);
        for t in [90, 70, 50] {
            let p = simulate_prompt(&gt, &PromptSimSpec::new(PromptKind::Box, t, 1)).unwrap();
            assert!((p.achieved - t as f64 / 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn point_prompt_ratio_and_empty_gt() {
        let gt = square(32, 4, 20);
        let p = simulate_prompt(&gt, &PromptSimSpec::new(PromptKind::Point, 70, 2)).unwrap();
        let PromptData::Points(pts) = &p.data else { panic!() };
        let ok = pts.iter().filter(|c| (gt[[c.row, c.col]] == 1) == c.positive).count();
        assert_eq!(ok, 14);
        assert_eq!(p.achieved, 0.7);
        let empty = Array2::zeros((8, 8));
        assert!(simulate_prompt(&empty, &PromptSimSpec::new(PromptKind::Point, 90, 0)).is_err());
    }
}
