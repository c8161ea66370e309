//! Speed-stratified evaluation over a 1 s horizon.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::MotionField;
use crate::model::{forward, PredictorParams};
use crate::pseudo::STATIC_SPEED_THRESHOLD;

use super::Sample;

/// Lower bound of the fast group (m/s), inclusive.
pub const FAST_SPEED: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeedGroup {
    Static,
    Slow,
    Fast,
}

pub const GROUP_ORDER: [SpeedGroup; 3] = [SpeedGroup::Static, SpeedGroup::Slow, SpeedGroup::Fast];

impl SpeedGroup {
    pub fn of(speed: f64) -> Self {
        if speed >= FAST_SPEED {
            SpeedGroup::Fast
        } else if speed >= STATIC_SPEED_THRESHOLD {
            SpeedGroup::Slow
        } else {
            SpeedGroup::Static
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SpeedGroup::Static => "static",
            SpeedGroup::Slow => "slow",
            SpeedGroup::Fast => "fast",
        }
    }
}

/// Mean of 5·d02 and 2.5·d04, each a linear extrapolation to 1 s.
pub fn interpolate_to_1s(d02: &MotionField, d04: &MotionField) -> Result<MotionField> {
    d02.check_aligned(d04)?;
    let mut out = MotionField::zeros(d02.valid.clone(), 1.0);
    for c in d02.valid_cells().collect::<Vec<_>>() {
        let a = d02.get(c);
        let b = d04.get(c);
        out.set(c, [0.5 * (5.0 * a[0] + 2.5 * b[0]), 0.5 * (5.0 * a[1] + 2.5 * b[1])]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

impl GroupStats {
    fn of(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
        Some(Self {
            count: n,
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

/// Per speed group errors; `None` marks a group with no cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub groups: [Option<GroupStats>; 3],
    /// Mean ‖m_fwd + m_bwd‖ per group, when measured.
    pub divergence: Option<[Option<f64>; 3]>,
}

impl EvalReport {
    pub fn group(&self, g: SpeedGroup) -> Option<&GroupStats> {
        self.groups[g.index()].as_ref()
    }

    pub fn count(&self, g: SpeedGroup) -> usize {
        self.group(g).map_or(0, |s| s.count)
    }

    pub fn mean_error(&self, g: SpeedGroup) -> Option<f64> {
        self.group(g).map(|s| s.mean)
    }

    pub fn divergence(&self, g: SpeedGroup) -> Option<f64> {
        self.divergence.and_then(|d| d[g.index()])
    }

    /// `key=value` lines; absent groups are written as `absent`.
    pub fn key_values(&self, prefix: &str) -> Vec<(String, String)> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:e}"));
        let mut out = Vec::new();
        for g in GROUP_ORDER {
            let s = self.group(g);
            let name = format!("{prefix}{}", g.name());
            out.push((format!("{name}.count"), self.count(g).to_string()));
            out.push((format!("{name}.mean_error"), fmt(s.map(|s| s.mean))));
            out.push((format!("{name}.median_error"), fmt(s.map(|s| s.median))));
            if self.divergence.is_some() {
                out.push((format!("{name}.mean_divergence"), fmt(self.divergence(g))));
            }
        }
        out
    }

    /// One line per group.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for g in GROUP_ORDER {
            let line = match self.group(g) {
                Some(s) => format!("{:<6} cells={:<7} mean={:.4} median={:.4}", g.name(), s.count, s.mean, s.median),
                None => format!("{:<6} cells=0       (absent)", g.name()),
            };
            out.push_str(&line);
            if let Some(d) = self.divergence(g) {
                out.push_str(&format!(" divergence={d:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Collects per-cell values by speed group, across any number of fields.
#[derive(Clone, Debug, Default)]
struct Buckets([Vec<f64>; 3]);

impl Buckets {
    fn add(&mut self, a: &MotionField, b: &MotionField, sign: f64, speed: &Array2<f64>) -> Result<()> {
        a.check_aligned(b)?;
        if speed.dim() != a.dim() {
            return Err(Error::Shape("speed map differs from motion grid".into()));
        }
        for c in a.valid_cells() {
            let (x, y) = (a.dx[c] + sign * b.dx[c], a.dy[c] + sign * b.dy[c]);
            self.0[SpeedGroup::of(speed[c]).index()].push(x.hypot(y));
        }
        Ok(())
    }

    fn stats(mut self) -> [Option<GroupStats>; 3] {
        let [a, b, c] = &mut self.0;
        [GroupStats::of(a), GroupStats::of(b), GroupStats::of(c)]
    }
}

/// Mean and median endpoint error of `pred_1s` per speed group of `gt_speed`.
pub fn evaluate(pred_1s: &MotionField, gt_1s: &MotionField, gt_speed: &Array2<f64>) -> Result<EvalReport> {
    evaluate_pooled([(pred_1s, gt_1s, gt_speed)])
}

/// Like [`evaluate`], pooling the cells of several `(pred, gt, speed)` triples.
pub fn evaluate_pooled<'a>(
    items: impl IntoIterator<Item = (&'a MotionField, &'a MotionField, &'a Array2<f64>)>,
) -> Result<EvalReport> {
    let mut b = Buckets::default();
    for (pred, gt, speed) in items {
        b.add(pred, gt, -1.0, speed)?;
    }
    Ok(EvalReport {
        groups: b.stats(),
        divergence: None,
    })
}

/// Per-group mean of ‖m_fwd + m_bwd‖.
pub fn divergence(m_fwd: &MotionField, m_bwd: &MotionField, gt_speed: &Array2<f64>) -> Result<[Option<f64>; 3]> {
    let mut b = Buckets::default();
    b.add(m_fwd, m_bwd, 1.0, gt_speed)?;
    Ok(b.stats().map(|s| s.map(|s| s.mean)))
}

/// Runs the model on every sample and pools errors and divergences.
pub fn evaluate_model(params: &PredictorParams, samples: &[Sample]) -> Result<EvalReport> {
    let per_sample = crate::par::map(samples, |s| -> Result<_> {
        let dt = s.step_seconds;
        let (fwd, _) = forward(&s.input_forward, params)?;
        let (bwd, _) = forward(&s.input_backward, params)?;
        let one = fwd.motion_field(0, &s.valid, dt);
        let pred = interpolate_to_1s(&one, &fwd.motion_field(1, &s.valid, 2.0 * dt))?;
        Ok((pred, one, bwd.motion_field(0, &s.valid, dt)))
    });
    let mut err = Buckets::default();
    let mut div = Buckets::default();
    for (s, r) in samples.iter().zip(per_sample) {
        let (pred, one, back) = r?;
        err.add(&pred, &s.gt(1.0 / s.step_seconds), -1.0, &s.gt_speed)?;
        div.add(&one, &back, 1.0, &s.gt_speed)?;
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(EvalReport {
        groups: err.stats(),
        divergence: Some(div.stats().map(|s| s.map(|s| s.mean))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(v: [f64; 2], horizon: f64) -> MotionField {
        let mut f = MotionField::zeros(Array2::from_elem((1, 1), true), horizon);
        f.set((0, 0), v);
        f
    }

    #[test]
    fn interpolation_examples() {
        let out = interpolate_to_1s(&single([0.2, 0.0], 0.2), &single([0.4, 0.0], 0.4)).unwrap();
        assert_abs_diff_eq!(out.dx[(0, 0)], 1.0, epsilon = 1e-15);
        let out = interpolate_to_1s(&single([0.0, 0.0], 0.2), &single([0.0, 0.0], 0.4)).unwrap();
        assert_eq!(out.get((0, 0)), [0.0, 0.0]);
        let out = interpolate_to_1s(&single([0.2, 0.0], 0.2), &single([0.2, 0.0], 0.4)).unwrap();
        assert_abs_diff_eq!(out.dx[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn interpolation_rejects_mask_mismatch() {
        let a = single([0.2, 0.0], 0.2);
        let b = MotionField::zeros(Array2::from_elem((1, 1), false), 0.4);
        assert!(matches!(interpolate_to_1s(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluate_examples() {
        let speed = Array2::from_elem((1, 1), 6.0);
        let gt = single([6.0, 0.0], 1.0);
        let r = evaluate(&gt, &gt, &speed).unwrap();
        assert_eq!(r.mean_error(SpeedGroup::Fast), Some(0.0));
        assert!(r.group(SpeedGroup::Static).is_none());

        let r = evaluate(&single([7.0, 0.0], 1.0), &gt, &speed).unwrap();
        let s = r.group(SpeedGroup::Fast).unwrap();
        assert_eq!((s.mean, s.median, s.count), (1.0, 1.0, 1));
    }

    #[test]
    fn speed_group_boundaries() {
        assert_eq!(SpeedGroup::of(5.0), SpeedGroup::Fast);
        assert_eq!(SpeedGroup::of(4.999), SpeedGroup::Slow);
        assert_eq!(SpeedGroup::of(0.2), SpeedGroup::Slow);
        assert_eq!(SpeedGroup::of(0.19), SpeedGroup::Static);
    }

    #[test]
    fn divergence_examples() {
        let valid = Array2::from_elem((2, 3), true);
        let speed = Array2::from_shape_fn((2, 3), |(_, j)| [0.0, 1.0, 9.0][j]);
        let mut f = MotionField::zeros(valid.clone(), 0.2);
        for (k, c) in f.valid_cells().collect::<Vec<_>>().into_iter().enumerate() {
            f.set(c, [k as f64, -0.5 * k as f64]);
        }
        let neg = f.scaled(-1.0, 0.2);
        assert_eq!(divergence(&f, &neg, &speed).unwrap(), [Some(0.0); 3]);
        let mut shifted = neg.clone();
        shifted.dx.mapv_inplace(|v| v + 1.0);
        assert_eq!(divergence(&f, &shifted, &speed).unwrap(), [Some(1.0); 3]);
    }

    #[test]
    fn median_of_even_count() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        let s = GroupStats::of(&mut v).unwrap();
        assert_eq!((s.median, s.mean), (2.5, 2.5));
    }
}
