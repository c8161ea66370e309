//! Entropic optimal transport between two 2D point sets.
//!
//! The solver keeps log-potentials `f, g` (cost units) and runs plain
//! Sinkhorn scaling on the stabilized kernel
//! `K_ij = exp((f_i + g_j − C_ij) / ε)`. When the scalings drift too far
//! from 1 they are absorbed back into the potentials and the kernel is
//! rebuilt; rows or columns that underflow completely get an exact
//! log-sum-exp update instead. This keeps the inner loop to two
//! matrix-vector products per iteration while still handling very small ε.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Pairwise Euclidean distances, `values[i][j] = ‖src_i − tgt_j‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
}

impl CostMatrix {
    /// Wraps an existing matrix, checking that it is nonempty, finite and nonnegative.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("cost matrix"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::SolverFailure(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn src_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn tgt_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.values.iter().copied().collect();
        let mid = v.len() / 2;
        let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
        let upper = *m;
        if v.len() % 2 == 1 {
            upper
        } else {
            let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lower + upper)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// `epsilon` is used as is.
    Absolute,
    /// `epsilon` multiplies the median of the cost matrix.
    MedianScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub epsilon: f64,
    pub epsilon_mode: EpsilonMode,
    pub max_iters: usize,
    /// Stop once the largest row/column marginal violation drops below this.
    pub marginal_tol: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            epsilon_mode: EpsilonMode::MedianScaled,
            max_iters: 1000,
            marginal_tol: 1e-6,
        }
    }
}

// Floor for a median-scaled ε when the median cost is zero.
const MIN_EPSILON: f64 = 1e-9;
// Absorb scalings into the potentials once |ln u| or |ln v| exceeds this.
const ABSORB_LOG: f64 = 30.0;
// Below this many entries the matrix-vector products stay on one thread.
const PAR_MIN_ENTRIES: usize = 1 << 16;

impl TransportConfig {
    pub fn absolute(epsilon: f64) -> Self {
        Self {
            epsilon,
            epsilon_mode: EpsilonMode::Absolute,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.marginal_tol > 0.0) {
            return Err(Error::InvalidConfig("marginal_tol must be positive".into()));
        }
        Ok(())
    }

    /// The ε actually used for `cost`.
    pub fn effective_epsilon(&self, cost: &CostMatrix) -> f64 {
        match self.epsilon_mode {
            EpsilonMode::Absolute => self.epsilon,
            EpsilonMode::MedianScaled => (self.epsilon * cost.median()).max(MIN_EPSILON),
        }
    }
}

/// Soft coupling plus its row-argmax hardening.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// Rows sum to `1/N_src`, columns to `1/N_tgt`.
    pub soft: Array2<f64>,
    pub hard: Vec<usize>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Largest marginal violation of `soft`.
    pub residual: f64,
    pub epsilon: f64,
}

impl TransportPlan {
    /// `Σ C_ij π_ij`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.soft
            .iter()
            .zip(cost.values.iter())
            .map(|(p, c)| p * c)
            .sum()
    }
}

pub fn cost_matrix(src: &[[f64; 2]], tgt: &[[f64; 2]]) -> Result<CostMatrix> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyInput("matching needs nonempty point sets"));
    }
    let values = Array2::from_shape_fn((src.len(), tgt.len()), |(i, j)| {
        let dx = src[i][0] - tgt[j][0];
        let dy = src[i][1] - tgt[j][1];
        (dx * dx + dy * dy).sqrt()
    });
    CostMatrix::from_values(values)
}

/// Moves each source point by its predicted displacement.
pub fn prewarp(src: &[[f64; 2]], motion: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if src.len() != motion.len() {
        return Err(Error::Shape(format!(
            "prewarp: {} points but {} displacements",
            src.len(),
            motion.len()
        )));
    }
    Ok(src
        .iter()
        .zip(motion)
        .map(|(p, m)| [p[0] + m[0], p[1] + m[1]])
        .collect())
}

/// Row-wise argmax; ties go to the lowest column, NaN entries are skipped.
pub fn harden(soft: &Array2<f64>) -> Vec<usize> {
    soft.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Solver<'a> {
    c: &'a Array2<f64>,
    eps: f64,
    log_a: f64,
    log_b: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    kernel: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    parallel: bool,
}

impl<'a> Solver<'a> {
    fn new(c: &'a Array2<f64>, eps: f64) -> Self {
        let (n, m) = c.dim();
        Self {
            c,
            eps,
            log_a: -(n as f64).ln(),
            log_b: -(m as f64).ln(),
            f: vec![0.0; n],
            g: vec![0.0; m],
            kernel: vec![0.0; n * m],
            u: vec![1.0; n],
            v: vec![1.0; m],
            parallel: par::enabled() && n * m >= PAR_MIN_ENTRIES,
        }
    }

    fn dims(&self) -> (usize, usize) {
        self.c.dim()
    }

    /// Folds the scalings into the potentials.
    fn absorb(&mut self) {
        for (f, u) in self.f.iter_mut().zip(&mut self.u) {
            *f += self.eps * u.ln();
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(&mut self.v) {
            *g += self.eps * v.ln();
            *v = 1.0;
        }
    }

    /// Exact log-domain row update, `f_i = ε ln a − ε LSE_j((g_j − C_ij)/ε)`.
    fn exact_f(&mut self) {
        let (_, m) = self.dims();
        let (c, g, eps, log_a) = (self.c, &self.g, self.eps, self.log_a);
        for (i, f) in self.f.iter_mut().enumerate() {
            let row = c.row(i);
            let lse = log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps));
            *f = eps * (log_a - lse);
        }
    }

    fn exact_g(&mut self) {
        let (n, _) = self.dims();
        let (c, f, eps, log_b) = (self.c, &self.f, self.eps, self.log_b);
        for (j, g) in self.g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - c[(i, j)]) / eps));
            *g = eps * (log_b - lse);
        }
    }

    fn rebuild_kernel(&mut self) {
        let (_, m) = self.dims();
        let (c, f, g, eps) = (self.c, &self.f, &self.g, self.eps);
        par::for_each_chunk(&mut self.kernel, m, self.parallel, |start, row| {
            let i = start / m;
            let crow = c.row(i);
            for (j, k) in row.iter_mut().enumerate() {
                *k = ((f[i] + g[j] - crow[j]) / eps).exp();
            }
        });
    }

    /// `(K v)_i`.
    fn kernel_times_v(&self) -> Vec<f64> {
        let (n, m) = self.dims();
        let mut out = vec![0.0; n];
        let (kernel, v) = (&self.kernel, &self.v);
        par::for_each_chunk(&mut out, 64, self.parallel, |start, chunk| {
            for (o, slot) in chunk.iter_mut().enumerate() {
                let i = start + o;
                let row = &kernel[i * m..(i + 1) * m];
                *slot = row.iter().zip(v).map(|(k, v)| k * v).sum();
            }
        });
        out
    }

    /// `(Kᵀ u)_j`.
    fn kernel_t_times_u(&self) -> Vec<f64> {
        let (n, m) = self.dims();
        let mut out = vec![0.0; m];
        for i in 0..n {
            let ui = self.u[i];
            if ui == 0.0 {
                continue;
            }
            let row = &self.kernel[i * m..(i + 1) * m];
            for (o, k) in out.iter_mut().zip(row) {
                *o += k * ui;
            }
        }
        out
    }

    fn drifted(&self) -> bool {
        self.u
            .iter()
            .chain(&self.v)
            .any(|s| s.ln().abs() > ABSORB_LOG)
    }

    fn restart_with_exact_f(&mut self) {
        self.absorb();
        self.exact_f();
        self.rebuild_kernel();
    }

    fn restart_with_exact_g(&mut self) {
        self.absorb();
        self.exact_g();
        self.rebuild_kernel();
    }

    fn plan(&self) -> Array2<f64> {
        let (n, m) = self.dims();
        Array2::from_shape_fn((n, m), |(i, j)| self.u[i] * self.kernel[i * m + j] * self.v[j])
    }
}

fn marginal_residual(soft: &Array2<f64>) -> f64 {
    let (n, m) = soft.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let rows = soft
        .rows()
        .into_iter()
        .map(|r| (r.sum() - a).abs())
        .fold(0.0, f64::max);
    let cols = soft
        .columns()
        .into_iter()
        .map(|c| (c.sum() - b).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// Entropic OT with uniform marginals `1/N_src` (rows) and `1/N_tgt` (columns).
pub fn sinkhorn(cost: &CostMatrix, cfg: &TransportConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let eps = cfg.effective_epsilon(cost);
    let (n, m) = cost.values.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;

    let mut s = Solver::new(&cost.values, eps);
    s.exact_f();
    s.exact_g();
    s.rebuild_kernel();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let mut kv = s.kernel_times_v();
        // Columns are exact after each v update, so the row violation is the residual.
        let row_res = s
            .u
            .iter()
            .zip(&kv)
            .map(|(u, k)| (u * k - a).abs())
            .fold(0.0, f64::max);
        if iterations > 0 && row_res < cfg.marginal_tol {
            converged = true;
            break;
        }
        iterations += 1;

        if kv.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            s.restart_with_exact_f();
        } else {
            for (u, k) in s.u.iter_mut().zip(&kv) {
                *u = a / k;
            }
        }

        let ktu = s.kernel_t_times_u();
        if ktu.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            s.restart_with_exact_g();
        } else {
            for (v, k) in s.v.iter_mut().zip(&ktu) {
                *v = b / k;
            }
        }

        if s.drifted() {
            s.absorb();
            s.rebuild_kernel();
        }
        kv.clear();
    }

    let soft = s.plan();
    if soft.iter().any(|p| !p.is_finite()) {
        return Err(Error::SolverFailure(format!(
            "non-finite plan entries at epsilon {eps}"
        )));
    }
    let residual = marginal_residual(&soft);
    let converged = converged || residual < cfg.marginal_tol;
    let hard = harden(&soft);
    Ok(TransportPlan {
        soft,
        hard,
        converged,
        iterations_used: iterations,
        residual,
        epsilon: eps,
    })
}

/// Largest square instance the brute-force oracle accepts.
pub const ORACLE_MAX_N: usize = 10;

/// Minimum-cost permutation by exhaustive enumeration (square, N ≤ 10).
///
/// Among equal-cost permutations the lexicographically first wins.
pub fn exact_assignment_oracle(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n, m) = cost.values.dim();
    if n != m || n > ORACLE_MAX_N {
        return Err(Error::Unsupported(format!(
            "exact oracle needs a square matrix with N <= {ORACLE_MAX_N}, got {n}x{m}"
        )));
    }
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut best = (f64::INFINITY, Vec::new());
    enumerate(&cost.values, &mut perm, &mut used, 0.0, &mut best);
    Ok(best.1)
}

fn enumerate(
    c: &Array2<f64>,
    perm: &mut Vec<usize>,
    used: &mut [bool],
    partial: f64,
    best: &mut (f64, Vec<usize>),
) {
    let row = perm.len();
    if row == used.len() {
        if partial < best.0 {
            *best = (partial, perm.clone());
        }
        return;
    }
    for j in 0..used.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        perm.push(j);
        enumerate(c, perm, used, partial + c[(row, j)], best);
        perm.pop();
        used[j] = false;
    }
}

/// Total cost of a row → column assignment.
pub fn assignment_cost(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.values[(i, j)])
        .sum()
}
