//! Named desk-scale setups shared by the CLI, tests and benches.

use crate::geometry::GridSpec;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;
use crate::transport::TransportConfig;

/// Sequences in the standard toy dataset; 12 frames each gives 4 samples per sequence.
pub const TOY_SEQUENCES: usize = 6;

/// The standard toy world: three movers, three static boxes, one artifact
/// cluster per frame on the 64×64 desk grid.
pub fn toy_scene() -> SceneSpec {
    SceneSpec::default()
}

pub fn toy_grid() -> GridSpec {
    GridSpec::desk()
}

/// Single large fast mover (≈ 4 m × 2 m, well over 20 cells).
pub fn large_mover_scene() -> SceneSpec {
    SceneSpec {
        n_movers: 1,
        mover_length: (4.0, 4.5),
        mover_width: (1.8, 2.0),
        speed_range: (5.5, 8.0),
        ..SceneSpec::default()
    }
}

/// Artifact-free scene whose objects sit on cell centers and move by whole
/// cells, so pseudo labels can match cell-quantized ground truth exactly.
pub fn aligned_scene(artifact_rate: f64) -> SceneSpec {
    SceneSpec {
        grid_aligned: true,
        artifact_rate,
        speed_range: (1.25, 2.5),
        ..SceneSpec::default()
    }
}

/// Matching settings used while training. Hardened assignments settle long
/// before the marginals reach 1e-6, so the iteration cap is low.
pub fn training_transport() -> TransportConfig {
    TransportConfig {
        max_iters: 100,
        ..TransportConfig::default()
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig::default()
}
