//! Training loop, sample construction and evaluation.

mod ablation;
mod eval;

pub use ablation::{ablation_rows, run_ablation, AblationResult, AblationRow};
pub use eval::{
    divergence, evaluate, evaluate_model, evaluate_pooled, interpolate_to_1s, EvalReport, GroupStats, SpeedGroup, FAST_SPEED,
    GROUP_ORDER,
};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{bfs_clusters, ClusterMap, Connectivity};
use crate::error::{Error, Result};
use crate::field::{MotionField, StateMap};
use crate::geometry::{crop, pillars_of, sync_to_frame, PillarSet};
use crate::ground::{remove_ground, GroundParams};
use crate::losses::{loss_regime, total_loss, KnnGraph, LossInputs, LossReport, LossWeights, Smoothness};
use crate::model::{
    adam_step, backward, forward, AdamConfig, ForwardOutput, LossEval, OptimizerState, OutputGrads, PredictorParams,
};
use crate::pseudo::{generate_pseudo_motion, generate_two_step, pseudo_state_labels, with_ground_cells, STATIC_SPEED_THRESHOLD};
use crate::synth::LabeledSequence;
use crate::transport::TransportConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothnessKind {
    #[default]
    Cluster,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub msm_enabled: bool,
    pub msm_warmup_epochs: usize,
    pub two_step_enabled: bool,
    pub backward_enabled: bool,
    pub smoothness: SmoothnessKind,
    pub knn_k: usize,
    pub batch_size: usize,
    /// Input frames per sequence (T_in).
    pub frames: usize,
    pub hidden: usize,
    pub connectivity: Connectivity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            msm_enabled: true,
            msm_warmup_epochs: 2,
            two_step_enabled: true,
            backward_enabled: true,
            smoothness: SmoothnessKind::Cluster,
            knn_k: 8,
            batch_size: 1,
            frames: crate::model::DEFAULT_FRAMES,
            hidden: crate::model::DEFAULT_HIDDEN,
            connectivity: Connectivity::Eight,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if self.knn_k == 0 {
            return bad("knn_k must be at least 1");
        }
        self.adam.validate()?;
        self.weights.validate()
    }

    /// Weights with disabled terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.backward_enabled {
            w.beta = 0.0;
        }
        w
    }

    pub fn msm_active(&self, epoch: usize) -> bool {
        self.msm_enabled && epoch >= self.msm_warmup_epochs
    }

    /// Future frames a sample needs: two for the pseudo labels and
    /// `frames − 1` for the time-reversed input.
    pub fn future_frames(&self) -> usize {
        (self.frames - 1).max(2)
    }
}

/// Everything about one training example that does not depend on the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sequence: usize,
    pub frame: usize,
    /// `(T, H, W)` ground-free occupancy, oldest frame first, synced to `frame`.
    pub input_forward: Array3<f64>,
    /// Future frames `t+T−1 .. t`, synced to `frame`.
    pub input_backward: Array3<f64>,
    /// Ground-free pillars of `t`, `t+1`, `t+2` in frame `t` coordinates.
    pub src: PillarSet,
    pub tgt_one: PillarSet,
    pub tgt_two: PillarSet,
    /// Every occupied cell of frame `t`, ground included.
    pub valid: Array2<bool>,
    pub clusters: ClusterMap,
    pub knn: KnnGraph,
    /// Ground-truth one-step displacement on `valid`.
    pub gt_step: MotionField,
    pub gt_speed: Array2<f64>,
    pub step_seconds: f64,
}

impl Sample {
    pub fn dim(&self) -> (usize, usize) {
        self.valid.dim()
    }

    /// Ground truth over `steps` frame periods.
    pub fn gt(&self, steps: f64) -> MotionField {
        self.gt_step.scaled(steps, steps * self.step_seconds)
    }
}

fn occupancy_stack<'a>(pillars: impl Iterator<Item = &'a PillarSet>, t: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((t, h, w));
    for (k, p) in pillars.enumerate() {
        for &(i, j) in &p.cells {
            out[(k, i, j)] = 1.0;
        }
    }
    out
}

/// Builds every sample with enough history and future; others are skipped.
pub fn build_samples(seqs: &[LabeledSequence], cfg: &TrainConfig, ground: &GroundParams) -> Result<Vec<Sample>> {
    cfg.validate()?;
    ground.validate()?;
    let past = cfg.frames - 1;
    let future = cfg.future_frames();
    let mut jobs = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let n = seq.frames.len();
        for t in 0..n {
            if t < past || t + future >= n {
                log::debug!("sequence {s} frame {t}: not enough surrounding frames, skipped");
                continue;
            }
            jobs.push((s, t));
        }
    }
    if jobs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // Ground-free copies of every frame, shared by all samples.
    let cleaned: Vec<Vec<_>> = seqs
        .iter()
        .map(|seq| crate::par::map(&seq.frames, |f| remove_ground(f, ground).0))
        .collect();
    crate::par::map(&jobs, |&(s, t)| build_one(&seqs[s], &cleaned[s], s, t, cfg))
        .into_iter()
        .collect()
}

fn build_one(
    seq: &LabeledSequence,
    cleaned: &[crate::geometry::PointFrame],
    s: usize,
    t: usize,
    cfg: &TrainConfig,
) -> Result<Sample> {
    let grid = &seq.grid;
    let (h, w) = grid.bev_dims();
    let pose = seq.frames[t].pose;
    let pillars = |k: usize| -> Result<PillarSet> { Ok(pillars_of(&sync_to_frame(&cleaned[k], &pose)?, grid)) };
    let past: Vec<PillarSet> = (t + 1 - cfg.frames..=t).map(&pillars).collect::<Result<_>>()?;
    let future: Vec<PillarSet> = (t..t + cfg.frames).rev().map(&pillars).collect::<Result<_>>()?;
    let src = past[cfg.frames - 1].clone();
    let tgt_one = pillars(t + 1)?;
    let tgt_two = pillars(t + 2)?;

    let valid = pillars_of(&crop(&seq.frames[t], grid), grid).occupancy;
    let truth = &seq.truth[t];
    let mut gt_step = MotionField::zeros(valid.clone(), seq.scene.frame_period);
    // Synthetic poses carry no roll or pitch; rotate world displacement into frame t.
    let r = pose.inverse().rotation;
    for (c, &v) in valid.indexed_iter() {
        if v {
            let (dx, dy) = (truth.step_dx[c], truth.step_dy[c]);
            gt_step.set(c, [r[0][0] * dx + r[0][1] * dy, r[1][0] * dx + r[1][1] * dy]);
        }
    }
    let gt_speed = Array2::from_shape_fn((h, w), |c| if valid[c] { gt_step.dx[c].hypot(gt_step.dy[c]) / seq.scene.frame_period } else { 0.0 });

    let clusters = bfs_clusters(&src.occupancy, cfg.connectivity);
    let knn = KnnGraph::build(&src.cells, &src.centers, cfg.knn_k);
    Ok(Sample {
        sequence: s,
        frame: t,
        input_forward: occupancy_stack(past.iter(), cfg.frames, h, w),
        input_backward: occupancy_stack(future.iter(), cfg.frames, h, w),
        src,
        tgt_one,
        tgt_two,
        valid,
        clusters,
        knn,
        gt_step,
        gt_speed,
        step_seconds: seq.scene.frame_period,
    })
}

/// Pseudo supervision of one sample for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLabels {
    pub one: MotionField,
    pub two: MotionField,
    pub state: StateMap,
}

fn match_or_zero(
    src: &PillarSet,
    tgt: &PillarSet,
    run: impl FnOnce() -> Result<MotionField>,
    horizon: f64,
) -> Result<MotionField> {
    if src.is_empty() || tgt.is_empty() {
        return Ok(MotionField::zeros(src.occupancy.clone(), horizon));
    }
    run()
}

/// Pseudo labels for `sample`, pre-warped by `predicted` when given.
pub fn sample_labels(
    sample: &Sample,
    predicted: Option<&MotionField>,
    transport: &TransportConfig,
    two_step: bool,
) -> Result<SampleLabels> {
    let dt = sample.step_seconds;
    let one = match_or_zero(&sample.src, &sample.tgt_one, || generate_pseudo_motion(&sample.src, &sample.tgt_one, predicted, transport, dt), dt)?;
    let one = with_ground_cells(&one, &sample.valid)?;
    let two = if two_step {
        let m = match_or_zero(
            &sample.src,
            &sample.tgt_two,
            || generate_two_step(&sample.src, &sample.tgt_two, predicted, transport, dt),
            2.0 * dt,
        )?;
        with_ground_cells(&m, &sample.valid)?
    } else {
        one.scaled(2.0, 2.0 * dt)
    };
    let state = pseudo_state_labels(&one, dt, STATIC_SPEED_THRESHOLD)?;
    Ok(SampleLabels { one, two, state })
}

/// Labels for every sample, computed in parallel and returned in sample order.
pub fn label_all(
    samples: &[Sample],
    params: Option<&PredictorParams>,
    transport: &TransportConfig,
    two_step: bool,
) -> Result<Vec<SampleLabels>> {
    crate::par::map(samples, |s| {
        let predicted = match params {
            Some(p) => Some(forward(&s.input_forward, p)?.0.motion_field(0, &s.src.occupancy, s.step_seconds)),
            None => None,
        };
        sample_labels(s, predicted.as_ref(), transport, two_step)
    })
    .into_iter()
    .collect()
}

/// Loss of one sample from its network outputs (`outs[0]` forward, optional
/// `outs[1]` backward), with gradients for each output and the regime
/// fingerprint used by gradient checks.
pub fn sample_loss(
    sample: &Sample,
    labels: &SampleLabels,
    outs: &[ForwardOutput],
    cfg: &TrainConfig,
    msm: bool,
    fixed_motion_mask: Option<&Array2<bool>>,
) -> Result<(LossReport, LossEval)> {
    let weights = cfg.effective_weights();
    let dt = sample.step_seconds;
    let fwd = outs.first().ok_or(Error::EmptyInput("sample_loss needs a forward output"))?;
    let pred_one = fwd.motion_field(0, &sample.valid, dt);
    let pred_two = fwd.motion_field(1, &sample.valid, 2.0 * dt);
    let pred_back = if weights.beta > 0.0 {
        let b = outs.get(1).ok_or(Error::EmptyInput("backward loss needs the backward output"))?;
        Some(b.motion_field(0, &sample.valid, dt))
    } else {
        None
    };
    let smoothness = match cfg.smoothness {
        SmoothnessKind::Cluster => Smoothness::Cluster(&sample.clusters),
        SmoothnessKind::Knn => Smoothness::Knn(&sample.knn),
    };
    let inputs = LossInputs {
        pred_one: &pred_one,
        pred_two: &pred_two,
        state_logits: &fwd.state_logits,
        pred_backward: pred_back.as_ref(),
        pseudo_one: &labels.one,
        pseudo_two: &labels.two,
        pseudo_state: &labels.state,
        smoothness: Some(smoothness),
        fixed_motion_mask,
    };
    let (report, grads) = total_loss(&inputs, &weights, msm)?;
    let regime = loss_regime(&inputs, &weights, msm);
    let (h, w) = sample.dim();
    let mut g_fwd = OutputGrads::zeros(h, w);
    g_fwd.add_motion(0, &grads.one);
    g_fwd.add_motion(1, &grads.two);
    g_fwd.state_logits = grads.state;
    let mut out_grads = vec![g_fwd];
    if pred_back.is_some() {
        let mut g = OutputGrads::zeros(h, w);
        g.add_motion(0, &grads.backward);
        out_grads.push(g);
    }
    Ok((
        report,
        LossEval {
            value: report.total,
            grads: out_grads,
            regime,
        },
    ))
}

/// Mean loss components of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub msm_active: bool,
    pub mean: LossReport,
    /// Largest `|total − Σ weighted terms|` seen over the epoch's samples.
    pub max_decomposition_error: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PredictorParams,
    pub curve: Vec<EpochStats>,
}

fn accumulate(acc: &mut LossReport, r: &LossReport) {
    acc.total += r.total;
    acc.sup += r.sup;
    acc.cluster += r.cluster;
    acc.back += r.back;
    acc.forward += r.forward;
    acc.state += r.state;
    acc.masked_cells += r.masked_cells;
}

/// Loss, output gradients and parameter gradient of one sample.
fn sample_step(
    sample: &Sample,
    labels: &SampleLabels,
    params: &PredictorParams,
    cfg: &TrainConfig,
    msm: bool,
) -> Result<(LossReport, PredictorParams)> {
    let (fwd, fwd_cache) = forward(&sample.input_forward, params)?;
    let mut outs = vec![fwd];
    let mut caches = vec![fwd_cache];
    if cfg.effective_weights().beta > 0.0 {
        let (b, c) = forward(&sample.input_backward, params)?;
        outs.push(b);
        caches.push(c);
    }
    let (report, eval) = sample_loss(sample, labels, &outs, cfg, msm, None)?;
    let mut grad = params.zeros_like();
    for (cache, g) in caches.iter().zip(&eval.grads) {
        grad.add_assign(&backward(cache, params, g, false)?.0);
    }
    Ok((report, grad))
}

/// Trains `params` on `samples`. Deterministic for a fixed config.
pub fn train(
    samples: &[Sample],
    params: PredictorParams,
    cfg: &TrainConfig,
    transport: &TransportConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    transport.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if params.frames != cfg.frames {
        return Err(Error::Shape(format!("model takes {} frames, config {}", params.frames, cfg.frames)));
    }
    let weights = cfg.effective_weights();
    let mut params = params;
    let mut opt = OptimizerState::new(&params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        let msm = cfg.msm_active(epoch);
        let current = (epoch > 0).then_some(&params);
        let labels = label_all(samples, current, transport, cfg.two_step_enabled)?;

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch,
            learning_rate: opt.learning_rate,
            msm_active: msm,
            ..Default::default()
        };
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            for &k in batch {
                let (report, g) = sample_step(&samples[k], &labels[k], &params, cfg, msm)?;
                stats.max_decomposition_error =
                    stats.max_decomposition_error.max((report.total - report.recompose(&weights)).abs());
                accumulate(&mut stats.mean, &report);
                grad.add_assign(&g);
            }
            grad.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &grad, &mut opt)?;
        }
        let n = samples.len() as f64;
        let m = &mut stats.mean;
        m.total /= n;
        m.sup /= n;
        m.cluster /= n;
        m.back /= n;
        m.forward /= n;
        m.state /= n;
        m.masked_cells /= samples.len();
        if !m.total.is_finite() || !params.is_finite() {
            return Err(Error::SolverFailure(format!("training diverged in epoch {epoch}")));
        }
        log::info!("epoch {epoch}: loss {:.6} (sup {:.6})", m.total, m.sup);
        curve.push(stats);
    }
    Ok(TrainOutcome { params, curve })
}
