//! Pseudo motion and state labels from hardened transport plans.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{CellState, MotionField, StateMap};
use crate::geometry::PillarSet;
use crate::transport::{cost_matrix, prewarp, sinkhorn, TransportConfig, TransportPlan};

/// Speed below which a cell counts as static (m/s).
pub const STATIC_SPEED_THRESHOLD: f64 = 0.2;

fn match_to(
    src: &PillarSet,
    tgt: &PillarSet,
    predicted: Option<&MotionField>,
    warp_scale: f64,
    cfg: &TransportConfig,
    horizon: f64,
) -> Result<(MotionField, TransportPlan)> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyInput("pseudo labels need nonempty source and target pillars"));
    }
    if src.occupancy.dim() != tgt.occupancy.dim() {
        return Err(Error::Shape("source and target grids differ".into()));
    }
    let warped = match predicted {
        Some(pred) => {
            if pred.dim() != src.occupancy.dim() {
                return Err(Error::Shape("prediction grid differs from pillar grid".into()));
            }
            let motion: Vec<[f64; 2]> = src
                .cells
                .iter()
                .map(|&c| {
                    let m = pred.get(c);
                    [m[0] * warp_scale, m[1] * warp_scale]
                })
                .collect();
            prewarp(&src.centers, &motion)?
        }
        None => src.centers.clone(),
    };
    let cost = cost_matrix(&warped, &tgt.centers)?;
    let plan = sinkhorn(&cost, cfg)?;
    let mut field = MotionField::zeros(src.occupancy.clone(), horizon);
    for (k, &cell) in src.cells.iter().enumerate() {
        let to = tgt.centers[plan.hard[k]];
        let from = src.centers[k];
        field.set(cell, [to[0] - from[0], to[1] - from[1]]);
    }
    Ok((field, plan))
}

/// One-step labels: `tgt[T(i)] − src[i]`, measured from the unwarped source.
///
/// `predicted`, when given, pre-warps the source centers before matching.
pub fn generate_pseudo_motion(
    src: &PillarSet,
    tgt: &PillarSet,
    predicted: Option<&MotionField>,
    cfg: &TransportConfig,
    step_seconds: f64,
) -> Result<MotionField> {
    Ok(match_to(src, tgt, predicted, 1.0, cfg, step_seconds)?.0)
}

/// Like [`generate_pseudo_motion`] against frame `t+2`; pre-warps by twice the
/// one-step prediction.
pub fn generate_two_step(
    src: &PillarSet,
    tgt2: &PillarSet,
    predicted: Option<&MotionField>,
    cfg: &TransportConfig,
    step_seconds: f64,
) -> Result<MotionField> {
    Ok(match_to(src, tgt2, predicted, 2.0, cfg, 2.0 * step_seconds)?.0)
}

/// Same as [`generate_pseudo_motion`] but also returns the plan.
pub fn generate_with_plan(
    src: &PillarSet,
    tgt: &PillarSet,
    predicted: Option<&MotionField>,
    cfg: &TransportConfig,
    step_seconds: f64,
) -> Result<(MotionField, TransportPlan)> {
    match_to(src, tgt, predicted, 1.0, cfg, step_seconds)
}

/// Extends a label field to every occupied cell; cells that only held ground
/// points get zero motion.
pub fn with_ground_cells(labels: &MotionField, occupied: &Array2<bool>) -> Result<MotionField> {
    if labels.dim() != occupied.dim() {
        return Err(Error::Shape("occupancy grid differs from label grid".into()));
    }
    let mut out = labels.clone();
    out.valid.zip_mut_with(occupied, |v, &o| *v = *v || o);
    Ok(out)
}

/// Moving iff speed ≥ `threshold_mps`; cells outside the mask are invalid.
pub fn pseudo_state_labels(
    labels: &MotionField,
    step_seconds: f64,
    threshold_mps: f64,
) -> Result<StateMap> {
    if !(step_seconds > 0.0) {
        return Err(Error::InvalidConfig("step_seconds must be positive".into()));
    }
    let states = Array2::from_shape_fn(labels.dim(), |c| {
        if !labels.valid[c] {
            CellState::Invalid
        } else if labels.dx[c].hypot(labels.dy[c]) / step_seconds >= threshold_mps {
            CellState::Moving
        } else {
            CellState::Static
        }
    });
    Ok(StateMap { labels: states })
}
