//! The loss-term on/off grid: cluster × backward × forward, supervision always on.

use crate::error::Result;
use crate::model::PredictorParams;
use crate::transport::TransportConfig;

use super::{evaluate_model, train, EpochStats, EvalReport, Sample, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub label: char,
    pub cluster: bool,
    pub backward: bool,
    pub forward: bool,
}

impl AblationRow {
    /// `cfg` with this row's terms switched off. Terms the row keeps stay as
    /// configured, so a row can never re-enable something `cfg` disabled.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        if !self.cluster {
            c.weights.alpha = 0.0;
        }
        if !self.backward {
            c.backward_enabled = false;
        }
        if !self.forward {
            c.weights.gamma = 0.0;
        }
        c
    }

    pub fn name(&self) -> String {
        let mut parts = vec!["sup"];
        if self.cluster {
            parts.push("cluster");
        }
        if self.backward {
            parts.push("back");
        }
        if self.forward {
            parts.push("forward");
        }
        parts.join("+")
    }
}

/// Rows (a) to (h) in table order.
pub fn ablation_rows() -> [AblationRow; 8] {
    let row = |label, cluster, backward, forward| AblationRow {
        label,
        cluster,
        backward,
        forward,
    };
    [
        row('a', false, false, false),
        row('b', true, false, false),
        row('c', false, true, false),
        row('d', true, true, false),
        row('e', true, false, true),
        row('f', false, false, true),
        row('g', false, true, true),
        row('h', true, true, true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: EvalReport,
    pub curve: Vec<EpochStats>,
    pub params: PredictorParams,
}

impl AblationResult {
    /// Worst `|total − Σ weighted terms|` over all epochs.
    pub fn max_decomposition_error(&self) -> f64 {
        self.curve.iter().map(|e| e.max_decomposition_error).fold(0.0, f64::max)
    }
}

/// Trains one model per row from the same initialization.
pub fn run_ablation(
    samples: &[Sample],
    init: &PredictorParams,
    cfg: &TrainConfig,
    transport: &TransportConfig,
) -> Result<Vec<AblationResult>> {
    let rows = ablation_rows();
    crate::par::map(&rows, |row| -> Result<AblationResult> {
        let out = train(samples, init.clone(), &row.apply(cfg), transport)?;
        Ok(AblationResult {
            row: *row,
            report: evaluate_model(&out.params, samples)?,
            curve: out.curve,
            params: out.params,
        })
    })
    .into_iter()
    .collect()
}
