//! Loss terms and their gradients with respect to the network outputs.
//!
//! Motion residuals use smooth-L1 summed over the two components and
//! averaged over the cells they are evaluated on.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::field::{CellState, MotionField, StateMap};

/// Gradient with respect to a [`MotionField`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl FieldGrad {
    pub fn zeros(dim: (usize, usize)) -> Self {
        Self {
            dx: Array2::zeros(dim),
            dy: Array2::zeros(dim),
        }
    }

    fn add(&mut self, cell: (usize, usize), g: [f64; 2]) {
        self.dx[cell] += g[0];
        self.dy[cell] += g[1];
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &FieldGrad, k: f64) {
        self.dx.scaled_add(k, &other.dx);
        self.dy.scaled_add(k, &other.dy);
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).all(|&v| v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// Transition point of the smooth-L1 penalty (m).
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            gamma: 0.1,
            sigma: 0.2,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn sup_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.sigma];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::InvalidConfig("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }
}

/// Per-term values of one total-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub sup: f64,
    pub cluster: f64,
    pub back: f64,
    pub forward: f64,
    pub state: f64,
    /// Cells that received motion supervision.
    pub masked_cells: usize,
}

impl LossReport {
    /// `sup + α·cluster + β·back + γ·forward + σ·state`.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.sup + w.alpha * self.cluster + w.beta * self.back + w.gamma * self.forward + w.sigma * self.state
    }
}

fn smooth_l1_scalar(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

fn check_dim(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Smooth-L1 of per-cell residual vectors, averaged over `mask`.
fn residual_penalty(
    residual: impl Fn((usize, usize)) -> [f64; 2],
    mask: &Array2<bool>,
    beta: f64,
) -> (f64, FieldGrad) {
    let mut grad = FieldGrad::zeros(mask.dim());
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        log::debug!("smooth-L1 over an empty mask");
        return (0.0, grad);
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for (cell, _) in mask.indexed_iter().filter(|(_, &m)| m) {
        let r = residual(cell);
        let (vx, gx) = smooth_l1_scalar(r[0], beta);
        let (vy, gy) = smooth_l1_scalar(r[1], beta);
        value += vx + vy;
        grad.add(cell, [gx * scale, gy * scale]);
    }
    (value * scale, grad)
}

/// Smooth-L1 between prediction and target on the cells of `mask`.
pub fn smooth_l1(
    pred: &MotionField,
    target: &MotionField,
    mask: &Array2<bool>,
    beta: f64,
) -> Result<(f64, FieldGrad)> {
    check_dim(pred.dim(), target.dim(), "smooth_l1 pred/target")?;
    check_dim(pred.dim(), mask.dim(), "smooth_l1 mask")?;
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig("smooth-L1 beta must be positive".into()));
    }
    Ok(residual_penalty(
        |c| [pred.dx[c] - target.dx[c], pred.dy[c] - target.dy[c]],
        mask,
        beta,
    ))
}

/// Adds the gradient of `w · ‖a − b‖` with respect to `a` and `b`.
fn pair_norm(
    pred: &MotionField,
    a: (usize, usize),
    b: (usize, usize),
    w: f64,
    grad: &mut FieldGrad,
) -> f64 {
    let ma = pred.get(a);
    let mb = pred.get(b);
    let d = [ma[0] - mb[0], ma[1] - mb[1]];
    let norm = d[0].hypot(d[1]);
    if norm > 0.0 {
        let g = [w * d[0] / norm, w * d[1] / norm];
        grad.add(a, g);
        grad.add(b, [-g[0], -g[1]]);
    }
    w * norm
}

/// Mean over clustered cells of the average motion distance to cluster mates.
pub fn cluster_consistency(pred: &MotionField, clusters: &ClusterMap) -> Result<(f64, FieldGrad)> {
    check_dim(pred.dim(), clusters.cluster_id.dim(), "cluster map")?;
    let mut grad = FieldGrad::zeros(pred.dim());
    let total = clusters.occupied();
    if total == 0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for members in &clusters.members {
        // Each unordered pair appears once in each member's inner sum.
        let w = 2.0 / (members.len() as f64 * total as f64);
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                value += pair_norm(pred, a, b, w, &mut grad);
            }
        }
    }
    Ok((value, grad))
}

/// k nearest occupied cells of every cell, by center distance.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub cells: Vec<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    /// Ties are broken by list order. Fewer than `k` other cells → all of them.
    pub fn build(cells: &[(usize, usize)], centers: &[[f64; 2]], k: usize) -> Self {
        let neighbors = (0..cells.len())
            .map(|i| {
                let mut d: Vec<(f64, usize)> = (0..cells.len())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let dx = centers[i][0] - centers[j][0];
                        let dy = centers[i][1] - centers[j][1];
                        (dx * dx + dy * dy, j)
                    })
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
                d.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        Self {
            cells: cells.to_vec(),
            neighbors,
        }
    }
}

/// KNN smoothness: like [`cluster_consistency`] with k-nearest neighbourhoods.
pub fn knn_consistency(pred: &MotionField, graph: &KnnGraph) -> Result<(f64, FieldGrad)> {
    let mut grad = FieldGrad::zeros(pred.dim());
    let n = graph.cells.len();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let w = 1.0 / (n as f64 * nbrs.len() as f64);
        for &j in nbrs {
            value += pair_norm(pred, graph.cells[i], graph.cells[j], w, &mut grad);
        }
    }
    Ok((value, grad))
}

/// Convenience wrapper building the neighbour graph on the fly.
pub fn knn_consistency_k(
    pred: &MotionField,
    cells: &[(usize, usize)],
    centers: &[[f64; 2]],
    k: usize,
) -> Result<(f64, FieldGrad)> {
    if k == 0 {
        return Err(Error::InvalidConfig("knn k must be at least 1".into()));
    }
    knn_consistency(pred, &KnnGraph::build(cells, centers, k))
}

/// Smooth-L1 of `m_fwd + m_bwd` toward zero; both inputs get the same gradient.
pub fn backward_consistency(
    m_fwd: &MotionField,
    m_bwd: &MotionField,
    beta: f64,
) -> Result<(f64, FieldGrad)> {
    m_fwd.check_aligned(m_bwd)?;
    Ok(residual_penalty(
        |c| [m_fwd.dx[c] + m_bwd.dx[c], m_fwd.dy[c] + m_bwd.dy[c]],
        &m_fwd.valid,
        beta,
    ))
}

/// Smooth-L1 of `m2 − 2·m1` toward zero. Returns `(value, ∂/∂m1, ∂/∂m2)`.
pub fn forward_consistency(
    m1: &MotionField,
    m2: &MotionField,
    beta: f64,
) -> Result<(f64, FieldGrad, FieldGrad)> {
    m1.check_aligned(m2)?;
    let (v, g2) = residual_penalty(
        |c| [m2.dx[c] - 2.0 * m1.dx[c], m2.dy[c] - 2.0 * m1.dy[c]],
        &m1.valid,
        beta,
    );
    let mut g1 = FieldGrad::zeros(m1.dim());
    g1.add_scaled(&g2, -2.0);
    Ok((v, g1, g2))
}

/// Logit channel of the static class.
pub const STATIC_CHANNEL: usize = 0;
/// Logit channel of the moving class.
pub const MOVING_CHANNEL: usize = 1;

/// Softmax cross-entropy averaged over cells whose label is not invalid.
pub fn state_cross_entropy(logits: &Array3<f64>, labels: &StateMap) -> Result<(f64, Array3<f64>)> {
    let (h, w, c) = logits.dim();
    if c != 2 || (h, w) != labels.labels.dim() {
        return Err(Error::Shape(format!(
            "state logits {:?} vs labels {:?}",
            logits.dim(),
            labels.labels.dim()
        )));
    }
    let mut grad = Array3::zeros(logits.dim());
    let n = labels.labels.iter().filter(|&&s| s != CellState::Invalid).count();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for ((i, j), &s) in labels.labels.indexed_iter() {
        let target = match s {
            CellState::Static => STATIC_CHANNEL,
            CellState::Moving => MOVING_CHANNEL,
            CellState::Invalid => continue,
        };
        let z = [logits[(i, j, 0)], logits[(i, j, 1)]];
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        value += lse - z[target];
        for k in 0..2 {
            let p = (z[k] - lse).exp();
            let onehot = if k == target { 1.0 } else { 0.0 };
            grad[(i, j, k)] = (p - onehot) * scale;
        }
    }
    Ok((value * scale, grad))
}

/// Cells of `valid` whose moving logit beats the static one.
pub fn moving_mask(logits: &Array3<f64>, valid: &Array2<bool>) -> Array2<bool> {
    Array2::from_shape_fn(valid.dim(), |(i, j)| {
        valid[(i, j)] && logits[(i, j, MOVING_CHANNEL)] > logits[(i, j, STATIC_CHANNEL)]
    })
}

/// Smoothness regularizer used for the α term.
#[derive(Clone, Debug)]
pub enum Smoothness<'a> {
    Cluster(&'a ClusterMap),
    Knn(&'a KnnGraph),
}

/// Everything one total-loss evaluation needs.
#[derive(Clone, Debug)]
pub struct LossInputs<'a> {
    /// Predicted one-step motion, masked like `pseudo_one`.
    pub pred_one: &'a MotionField,
    pub pred_two: &'a MotionField,
    pub state_logits: &'a Array3<f64>,
    /// One-step motion predicted from the time-reversed sequence.
    pub pred_backward: Option<&'a MotionField>,
    pub pseudo_one: &'a MotionField,
    pub pseudo_two: &'a MotionField,
    pub pseudo_state: &'a StateMap,
    pub smoothness: Option<Smoothness<'a>>,
    /// Overrides the moving mask derived from `state_logits` when MSM is on.
    pub fixed_motion_mask: Option<&'a Array2<bool>>,
}

/// Gradients of the total loss with respect to the four network outputs.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub one: FieldGrad,
    pub two: FieldGrad,
    pub state: Array3<f64>,
    pub backward: FieldGrad,
}

/// Weighted sum of all enabled terms. A zero weight skips the term entirely.
pub fn total_loss(
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    msm_enabled: bool,
) -> Result<(LossReport, LossGrads)> {
    weights.validate()?;
    let dim = inputs.pseudo_one.dim();
    let beta = weights.smooth_l1_beta;
    let mut grads = LossGrads {
        one: FieldGrad::zeros(dim),
        two: FieldGrad::zeros(dim),
        state: Array3::zeros(inputs.state_logits.dim()),
        backward: FieldGrad::zeros(dim),
    };
    let mut report = LossReport::default();

    let motion_mask = if msm_enabled {
        match inputs.fixed_motion_mask {
            Some(m) => m.clone(),
            None => moving_mask(inputs.state_logits, &inputs.pseudo_one.valid),
        }
    } else {
        inputs.pseudo_one.valid.clone()
    };
    report.masked_cells = motion_mask.iter().filter(|&&m| m).count();

    let (s1, g1) = smooth_l1(inputs.pred_one, inputs.pseudo_one, &motion_mask, beta)?;
    let (s2, g2) = smooth_l1(inputs.pred_two, inputs.pseudo_two, &motion_mask, beta)?;
    report.sup = s1 + s2;
    grads.one.add_scaled(&g1, 1.0);
    grads.two.add_scaled(&g2, 1.0);

    if weights.alpha > 0.0 {
        if let Some(smooth) = &inputs.smoothness {
            let (v, g) = match smooth {
                Smoothness::Cluster(c) => cluster_consistency(inputs.pred_one, c)?,
                Smoothness::Knn(k) => knn_consistency(inputs.pred_one, k)?,
            };
            report.cluster = v;
            grads.one.add_scaled(&g, weights.alpha);
        }
    }

    if weights.beta > 0.0 {
        if let Some(bwd) = inputs.pred_backward {
            let (v, g) = backward_consistency(inputs.pred_one, bwd, beta)?;
            report.back = v;
            grads.one.add_scaled(&g, weights.beta);
            grads.backward.add_scaled(&g, weights.beta);
        }
    }

    if weights.gamma > 0.0 {
        let (v, g1, g2) = forward_consistency(inputs.pred_one, inputs.pred_two, beta)?;
        report.forward = v;
        grads.one.add_scaled(&g1, weights.gamma);
        grads.two.add_scaled(&g2, weights.gamma);
    }

    if weights.sigma > 0.0 {
        let (v, g) = state_cross_entropy(inputs.state_logits, inputs.pseudo_state)?;
        report.state = v;
        grads.state.scaled_add(weights.sigma, &g);
    }

    report.total = report.recompose(weights);
    Ok((report, grads))
}

/// Fingerprint of every piecewise choice `total_loss` makes for `inputs`:
/// the motion mask, each smooth-L1 branch, and the scale of small pairwise
/// motion differences. Finite differences are only trustworthy when this
/// stays fixed between the two probes.
pub fn loss_regime(inputs: &LossInputs<'_>, weights: &LossWeights, msm_enabled: bool) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let beta = weights.smooth_l1_beta;
    let branch = |d: f64| d.abs() < beta;
    let mask = if msm_enabled {
        match inputs.fixed_motion_mask {
            Some(m) => m.clone(),
            None => moving_mask(inputs.state_logits, &inputs.pseudo_one.valid),
        }
    } else {
        inputs.pseudo_one.valid.clone()
    };
    for (c, &m) in mask.indexed_iter() {
        m.hash(&mut h);
        if m {
            for (p, t) in [(inputs.pred_one, inputs.pseudo_one), (inputs.pred_two, inputs.pseudo_two)] {
                branch(p.dx[c] - t.dx[c]).hash(&mut h);
                branch(p.dy[c] - t.dy[c]).hash(&mut h);
            }
        }
    }
    let one = inputs.pred_one;
    for (c, &v) in one.valid.indexed_iter() {
        if !v {
            continue;
        }
        if let (true, Some(b)) = (weights.beta > 0.0, inputs.pred_backward) {
            branch(one.dx[c] + b.dx[c]).hash(&mut h);
            branch(one.dy[c] + b.dy[c]).hash(&mut h);
        }
        if weights.gamma > 0.0 {
            let two = inputs.pred_two;
            branch(two.dx[c] - 2.0 * one.dx[c]).hash(&mut h);
            branch(two.dy[c] - 2.0 * one.dy[c]).hash(&mut h);
        }
    }
    let mut pair = |a: (usize, usize), b: (usize, usize)| {
        let (ma, mb) = (one.get(a), one.get(b));
        let n = (ma[0] - mb[0]).hypot(ma[1] - mb[1]);
        // The norm's curvature blows up near zero; bucket small distances.
        let bucket = if n < 1e-2 { n.log2().floor().max(-64.0) as i32 } else { 0 };
        bucket.hash(&mut h);
    };
    if weights.alpha > 0.0 {
        match &inputs.smoothness {
            Some(Smoothness::Cluster(cm)) => {
                for members in &cm.members {
                    for (k, &a) in members.iter().enumerate() {
                        for &b in &members[k + 1..] {
                            pair(a, b);
                        }
                    }
                }
            }
            Some(Smoothness::Knn(g)) => {
                for (i, nbrs) in g.neighbors.iter().enumerate() {
                    for &j in nbrs {
                        pair(g.cells[i], g.cells[j]);
                    }
                }
            }
            None => {}
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{bfs_clusters, Connectivity};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(values: &[[f64; 2]]) -> MotionField {
        let mut f = MotionField::zeros(Array2::from_elem((1, values.len()), true), 0.2);
        for (j, v) in values.iter().enumerate() {
            f.set((0, j), *v);
        }
        f
    }

    fn random_field(rng: &mut ChaCha8Rng, valid: &Array2<bool>) -> MotionField {
        let mut f = MotionField::zeros(valid.clone(), 0.2);
        for c in valid.indexed_iter().filter(|(_, &v)| v).map(|(c, _)| c).collect::<Vec<_>>() {
            f.set(c, [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        }
        f
    }

    /// Central differences of `loss` over every valid component of `f`.
    fn fd_check(f: &MotionField, analytic: &FieldGrad, loss: impl Fn(&MotionField) -> f64) {
        let h = 1e-6;
        for c in f.valid_cells().collect::<Vec<_>>() {
            for comp in 0..2 {
                let mut p = f.clone();
                let mut m = f.clone();
                if comp == 0 {
                    p.dx[c] += h;
                    m.dx[c] -= h;
                } else {
                    p.dy[c] += h;
                    m.dy[c] -= h;
                }
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let ana = if comp == 0 { analytic.dx[c] } else { analytic.dy[c] };
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-6, "cell {c:?} comp {comp}: numeric {num} analytic {ana}");
            }
        }
    }

    #[test]
    fn smooth_l1_values() {
        let mask = Array2::from_elem((1, 1), true);
        let t = field(&[[0.0, 0.0]]);
        assert_eq!(smooth_l1(&t, &t, &mask, 1.0).unwrap().0, 0.0);
        assert_abs_diff_eq!(smooth_l1(&field(&[[0.5, 0.0]]), &t, &mask, 1.0).unwrap().0, 0.125);
        assert_abs_diff_eq!(smooth_l1(&field(&[[2.0, 0.0]]), &t, &mask, 1.0).unwrap().0, 1.5);
        let empty = Array2::from_elem((1, 1), false);
        let (v, g) = smooth_l1(&field(&[[2.0, 0.0]]), &t, &empty, 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.is_zero());
        assert!(smooth_l1(&field(&[[0.0; 2]; 2]), &t, &mask, 1.0).is_err());
    }

    #[test]
    fn cluster_values() {
        let occ = Array2::from_elem((1, 2), true);
        let clusters = bfs_clusters(&occ, Connectivity::Eight);
        assert_eq!(cluster_consistency(&field(&[[1.0, 1.0], [1.0, 1.0]]), &clusters).unwrap().0, 0.0);
        assert_abs_diff_eq!(
            cluster_consistency(&field(&[[1.0, 0.0], [0.0, 0.0]]), &clusters).unwrap().0,
            0.5,
            epsilon = 1e-15
        );
        let mut sparse = Array2::from_elem((1, 3), false);
        sparse[(0, 0)] = true;
        sparse[(0, 2)] = true;
        let singles = bfs_clusters(&sparse, Connectivity::Eight);
        assert_eq!(cluster_consistency(&field(&[[1.0, 0.0], [0.0; 2], [5.0, 0.0]]), &singles).unwrap().0, 0.0);
    }

    /// Direct double sum, independent of the pair bookkeeping.
    fn cluster_reference(pred: &MotionField, clusters: &ClusterMap) -> f64 {
        let all: Vec<(usize, usize)> = clusters.members.iter().flatten().copied().collect();
        let mut total = 0.0;
        for &p in &all {
            let id = clusters.cluster_id[p] as usize;
            let mates = &clusters.members[id];
            let s: f64 = mates
                .iter()
                .map(|&q| {
                    let a = pred.get(p);
                    let b = pred.get(q);
                    (a[0] - b[0]).hypot(a[1] - b[1])
                })
                .sum();
            total += s / mates.len() as f64;
        }
        total / all.len() as f64
    }

    #[test]
    fn cluster_matches_reference_gradient_and_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let occ = Array2::from_shape_fn((6, 6), |_| rng.gen_bool(0.5));
        let clusters = bfs_clusters(&occ, Connectivity::Four);
        let pred = random_field(&mut rng, &Array2::from_elem((6, 6), true));
        let (v, g) = cluster_consistency(&pred, &clusters).unwrap();
        assert_abs_diff_eq!(v, cluster_reference(&pred, &clusters), epsilon = 1e-12);
        fd_check(&pred, &g, |f| cluster_consistency(f, &clusters).unwrap().0);

        let mut relabeled = clusters.clone();
        relabeled.members.reverse();
        let n = relabeled.members.len() as i32;
        relabeled.cluster_id.mapv_inplace(|id| if id < 0 { id } else { n - 1 - id });
        assert_abs_diff_eq!(cluster_consistency(&pred, &relabeled).unwrap().0, v, epsilon = 1e-12);
    }

    #[test]
    fn knn_values() {
        let cells = [(0, 0), (0, 1)];
        let centers = [[0.0, 0.0], [1.0, 0.0]];
        assert_eq!(knn_consistency_k(&field(&[[0.3, 0.1]; 2]), &cells, &centers, 1).unwrap().0, 0.0);
        let v = knn_consistency_k(&field(&[[1.0, 0.0], [0.0, 0.0]]), &cells, &centers, 1).unwrap().0;
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
        // k larger than available neighbours uses all of them.
        let v3 = knn_consistency_k(&field(&[[1.0, 0.0], [0.0, 0.0]]), &cells, &centers, 3).unwrap().0;
        assert_abs_diff_eq!(v3, 1.0, epsilon = 1e-15);
        assert!(knn_consistency_k(&field(&[[0.0; 2]; 2]), &cells, &centers, 0).is_err());
    }

    #[test]
    fn knn_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let valid = Array2::from_elem((1, 7), true);
        let pred = random_field(&mut rng, &valid);
        let cells: Vec<_> = (0..7).map(|j| (0, j)).collect();
        let centers: Vec<_> = (0..7).map(|j| [j as f64 * 0.25, 0.0]).collect();
        let graph = KnnGraph::build(&cells, &centers, 2);
        let (_, g) = knn_consistency(&pred, &graph).unwrap();
        fd_check(&pred, &g, |f| knn_consistency(f, &graph).unwrap().0);
    }

    #[test]
    fn knn_is_blind_to_far_side_disagreement() {
        let n = 20;
        let valid = Array2::from_elem((1, n), true);
        let mut pred = MotionField::zeros(valid.clone(), 0.2);
        for j in 0..n {
            pred.set((0, j), if j < n / 2 { [1.0, 0.0] } else { [0.0, 0.0] });
        }
        let cells: Vec<_> = (0..n).map(|j| (0, j)).collect();
        let centers: Vec<_> = (0..n).map(|j| [j as f64 * 0.25, 0.0]).collect();
        let knn = knn_consistency_k(&pred, &cells, &centers, 2).unwrap().0;
        let cluster = cluster_consistency(&pred, &bfs_clusters(&valid, Connectivity::Eight)).unwrap().0;
        assert!(cluster > knn, "cluster {cluster} knn {knn}");
    }

    #[test]
    fn backward_values_and_gradients() {
        let f = field(&[[1.0, 0.0]]);
        let (v, _) = backward_consistency(&f, &field(&[[-1.0, 0.0]]), 1.0).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = backward_consistency(&f, &field(&[[0.0, 0.0]]), 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let valid = Array2::from_elem((3, 3), true);
        let a = random_field(&mut rng, &valid);
        let b = random_field(&mut rng, &valid);
        let (_, g) = backward_consistency(&a, &b, 1.0).unwrap();
        fd_check(&a, &g, |x| backward_consistency(x, &b, 1.0).unwrap().0);
        fd_check(&b, &g, |x| backward_consistency(&a, x, 1.0).unwrap().0);

        let mut other = b.clone();
        other.valid[(0, 0)] = false;
        assert!(matches!(backward_consistency(&a, &other, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_values_and_gradients() {
        let m1 = field(&[[0.1, 0.0]]);
        assert_eq!(forward_consistency(&m1, &field(&[[0.2, 0.0]]), 1.0).unwrap().0, 0.0);
        let (v, _, _) = forward_consistency(&m1, &field(&[[0.1, 0.0]]), 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.005, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let valid = Array2::from_elem((3, 4), true);
        let a = random_field(&mut rng, &valid);
        let b = random_field(&mut rng, &valid);
        let (_, g1, g2) = forward_consistency(&a, &b, 1.0).unwrap();
        fd_check(&a, &g1, |x| forward_consistency(x, &b, 1.0).unwrap().0);
        fd_check(&b, &g2, |x| forward_consistency(&a, x, 1.0).unwrap().0);
    }

    #[test]
    fn cross_entropy_values() {
        let labels = StateMap {
            labels: Array2::from_elem((1, 1), CellState::Static),
        };
        let mut z = Array3::zeros((1, 1, 2));
        z[(0, 0, 0)] = 10.0;
        z[(0, 0, 1)] = -10.0;
        assert!(state_cross_entropy(&z, &labels).unwrap().0 < 1e-8);
        let zero = Array3::zeros((1, 1, 2));
        let (v, g) = state_cross_entropy(&zero, &labels).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 0, 0)], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 0, 1)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let labels = StateMap {
            labels: Array2::from_shape_fn((3, 3), |_| match rng.gen_range(0..3) {
                0 => CellState::Static,
                1 => CellState::Moving,
                _ => CellState::Invalid,
            }),
        };
        let z = Array3::from_shape_fn((3, 3, 2), |_| rng.gen_range(-3.0..3.0));
        let (_, g) = state_cross_entropy(&z, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut p = z.clone();
            let mut m = z.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (state_cross_entropy(&p, &labels).unwrap().0 - state_cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            let ana = g.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-8, "{idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn moving_mask_is_per_cell_argmax() {
        let valid = Array2::from_elem((1, 3), true);
        let all_static = Array3::from_shape_fn((1, 3, 2), |(_, _, k)| if k == 0 { 1.0 } else { -1.0 });
        assert_eq!(moving_mask(&all_static, &valid).iter().filter(|&&m| m).count(), 0);
        let mut mixed = all_static.clone();
        mixed[(0, 1, 1)] = 2.0;
        let m = moving_mask(&mixed, &valid);
        assert_eq!(m.iter().copied().collect::<Vec<_>>(), vec![false, true, false]);
    }

    struct Scene {
        one: MotionField,
        two: MotionField,
        back: MotionField,
        logits: Array3<f64>,
        p1: MotionField,
        p2: MotionField,
        states: StateMap,
        clusters: ClusterMap,
    }

    fn scene(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let valid = Array2::from_shape_fn((5, 5), |_| rng.gen_bool(0.7));
        let p1 = random_field(&mut rng, &valid);
        let p2 = random_field(&mut rng, &valid);
        Scene {
            one: random_field(&mut rng, &valid),
            two: random_field(&mut rng, &valid),
            back: random_field(&mut rng, &valid),
            logits: Array3::from_shape_fn((5, 5, 2), |_| rng.gen_range(-2.0..2.0)),
            states: crate::pseudo::pseudo_state_labels(&p1, 0.2, 0.2).unwrap(),
            clusters: bfs_clusters(&valid, Connectivity::Eight),
            p1,
            p2,
        }
    }

    fn inputs(s: &Scene) -> LossInputs<'_> {
        LossInputs {
            pred_one: &s.one,
            pred_two: &s.two,
            state_logits: &s.logits,
            pred_backward: Some(&s.back),
            pseudo_one: &s.p1,
            pseudo_two: &s.p2,
            pseudo_state: &s.states,
            smoothness: Some(Smoothness::Cluster(&s.clusters)),
            fixed_motion_mask: None,
        }
    }

    #[test]
    fn total_recomposes_and_zero_weights_match_omission() {
        let s = scene(1);
        let w = LossWeights::default();
        let (r, _) = total_loss(&inputs(&s), &w, true).unwrap();
        assert!((r.total - r.recompose(&w)).abs() < 1e-9);
        assert!(r.sup > 0.0 && r.cluster > 0.0 && r.back > 0.0 && r.forward > 0.0 && r.state > 0.0);

        let off = LossWeights { alpha: 0.0, beta: 0.0, ..w };
        let mut omitted = inputs(&s);
        omitted.smoothness = None;
        omitted.pred_backward = None;
        let (a, ga) = total_loss(&inputs(&s), &off, false).unwrap();
        let (b, gb) = total_loss(&omitted, &off, false).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(ga.one, gb.one);
        assert!(ga.backward.is_zero());
    }

    #[test]
    fn sup_only_is_zero_at_the_pseudo_labels() {
        let s = scene(2);
        let mut inp = inputs(&s);
        inp.pred_one = &s.p1;
        inp.pred_two = &s.p2;
        let (r, _) = total_loss(&inp, &LossWeights::sup_only(), false).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn msm_only_changes_the_mask() {
        let s = scene(3);
        let w = LossWeights::sup_only();
        let mask = moving_mask(&s.logits, &s.p1.valid);
        let (with, _) = total_loss(&inputs(&s), &w, true).unwrap();
        let (manual1, _) = smooth_l1(&s.one, &s.p1, &mask, 1.0).unwrap();
        let (manual2, _) = smooth_l1(&s.two, &s.p2, &mask, 1.0).unwrap();
        assert_abs_diff_eq!(with.sup, manual1 + manual2, epsilon = 1e-15);
        assert_eq!(with.masked_cells, mask.iter().filter(|&&m| m).count());

        let all_static = Array3::from_shape_fn(s.logits.dim(), |(_, _, k)| if k == 0 { 1.0 } else { 0.0 });
        let mut inp = inputs(&s);
        inp.state_logits = &all_static;
        let (r, _) = total_loss(&inp, &w, true).unwrap();
        assert_eq!(r.sup, 0.0);
    }

    #[test]
    fn total_gradients_match_differences() {
        let s = scene(4);
        let w = LossWeights { smooth_l1_beta: 0.7, ..LossWeights::default() };
        let mask = moving_mask(&s.logits, &s.p1.valid);
        let mut inp = inputs(&s);
        inp.fixed_motion_mask = Some(&mask);
        let (_, g) = total_loss(&inp, &w, true).unwrap();
        fd_check(&s.one, &g.one, |f| {
            let mut i = inputs(&s);
            i.fixed_motion_mask = Some(&mask);
            i.pred_one = f;
            total_loss(&i, &w, true).unwrap().0.total
        });
        fd_check(&s.two, &g.two, |f| {
            let mut i = inputs(&s);
            i.fixed_motion_mask = Some(&mask);
            i.pred_two = f;
            total_loss(&i, &w, true).unwrap().0.total
        });
        fd_check(&s.back, &g.backward, |f| {
            let mut i = inputs(&s);
            i.fixed_motion_mask = Some(&mask);
            i.pred_backward = Some(f);
            total_loss(&i, &w, true).unwrap().0.total
        });
    }

    proptest::proptest! {
        #[test]
        fn losses_are_nonnegative(seed in 0u64..1000) {
            let s = scene(seed);
            let (r, _) = total_loss(&inputs(&s), &LossWeights::default(), true).unwrap();
            proptest::prop_assert!(r.sup >= 0.0 && r.cluster >= 0.0 && r.back >= 0.0);
            proptest::prop_assert!(r.forward >= 0.0 && r.state >= 0.0 && r.total >= 0.0);
        }
    }
}
