//! Ground removal: a height threshold around the expected ground plane, or a
//! single RANSAC plane fit over the low points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointFrame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundParams {
    /// Expected ground height in the sensor frame (m).
    pub plane_z: f64,
    /// Half-width of the threshold band, also used to pick RANSAC candidates (m).
    pub tolerance: f64,
    /// 0 selects pure threshold mode.
    pub ransac_iters: usize,
    /// Point-to-plane distance for RANSAC inliers (m).
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            plane_z: -2.0,
            tolerance: 0.3,
            ransac_iters: 50,
            inlier_threshold: 0.15,
            seed: 0,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.inlier_threshold > 0.0) || !self.plane_z.is_finite() {
            return Err(Error::InvalidConfig(
                "ground tolerance and inlier threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Plane `n·p + d = 0` with unit normal.
#[derive(Clone, Copy, Debug)]
struct Plane {
    n: [f64; 3],
    d: f64,
}

impl Plane {
    fn through(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<Self> {
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len < 1e-9 {
            return None;
        }
        let n = [n[0] / len, n[1] / len, n[2] / len];
        Some(Self {
            n,
            d: -(n[0] * a[0] + n[1] * a[1] + n[2] * a[2]),
        })
    }

    fn distance(&self, p: [f64; 3]) -> f64 {
        (self.n[0] * p[0] + self.n[1] * p[1] + self.n[2] * p[2] + self.d).abs()
    }
}

// Reject walls and steep ramps as ground hypotheses.
const MIN_NORMAL_Z: f64 = 0.9;

/// Splits `frame` into non-ground points and the indices of ground points.
///
/// Every input point ends up in exactly one of the two outputs.
pub fn remove_ground(frame: &PointFrame, params: &GroundParams) -> (PointFrame, Vec<usize>) {
    let is_ground = classify(frame, params);
    let mut keep = Vec::with_capacity(frame.len());
    let mut ground = Vec::new();
    for (i, g) in is_ground.into_iter().enumerate() {
        if g {
            ground.push(i);
        } else {
            keep.push(i);
        }
    }
    (frame.select(&keep), ground)
}

/// Per-point ground flags.
pub fn classify(frame: &PointFrame, params: &GroundParams) -> Vec<bool> {
    let band = |p: &[f64; 3]| (p[2] - params.plane_z).abs() <= params.tolerance;
    let candidates: Vec<[f64; 3]> = frame.points.iter().copied().filter(|p| band(p)).collect();
    if params.ransac_iters == 0 || candidates.len() < 3 {
        return frame.points.iter().map(band).collect();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..params.ransac_iters {
        let a = candidates[rng.gen_range(0..candidates.len())];
        let b = candidates[rng.gen_range(0..candidates.len())];
        let c = candidates[rng.gen_range(0..candidates.len())];
        let Some(plane) = Plane::through(a, b, c) else {
            continue;
        };
        if plane.n[2].abs() < MIN_NORMAL_Z {
            continue;
        }
        let inliers = candidates
            .iter()
            .filter(|&&p| plane.distance(p) <= params.inlier_threshold)
            .count();
        if best.is_none_or(|(n, _)| inliers > n) {
            best = Some((inliers, plane));
        }
    }
    match best {
        Some((_, plane)) => frame
            .points
            .iter()
            .map(|&p| plane.distance(p) <= params.inlier_threshold)
            .collect(),
        None => frame.points.iter().map(band).collect(),
    }
}
