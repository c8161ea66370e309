//! Run configuration: one TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use bevmotion::geometry::GridSpec;
use bevmotion::ground::GroundParams;
use bevmotion::presets;
use bevmotion::synth::SceneSpec;
use bevmotion::train::TrainConfig;
use bevmotion::transport::TransportConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root under which run directories are created.
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            data: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Sequences generated when no dataset is given.
    pub sequences: usize,
    pub grid: GridSpec,
    pub ground: GroundParams,
    pub transport: TransportConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sequences: presets::TOY_SEQUENCES,
            grid: presets::toy_grid(),
            ground: GroundParams::default(),
            transport: presets::training_transport(),
            train: presets::toy_train_config(),
            scene: presets::toy_scene(),
            paths: Paths::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub weights: Option<String>,
    pub no_msm: bool,
    pub no_backward: bool,
    pub no_forward: bool,
    pub no_cluster: bool,
    pub epsilon: Option<f64>,
    pub epochs: Option<usize>,
}

fn parse_weights(spec: &str, cfg: &mut TrainConfig) -> Result<(), CliError> {
    let w = &mut cfg.weights;
    match spec {
        "full" => {
            let d = bevmotion::losses::LossWeights::default();
            (w.alpha, w.beta, w.gamma, w.sigma) = (d.alpha, d.beta, d.gamma, d.sigma);
        }
        "sup-only" => (w.alpha, w.beta, w.gamma) = (0.0, 0.0, 0.0),
        _ => {
            let parts: Vec<f64> = spec
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Config(format!("--weights expects a,b,g,s numbers, got {spec:?}")))?;
            let [a, b, g, s] = parts[..] else {
                return Err(CliError::Config(format!("--weights expects four values, got {}", parts.len())));
            };
            (w.alpha, w.beta, w.gamma, w.sigma) = (a, b, g, s);
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.scene.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(data) = &o.data {
            self.paths.data = Some(data.clone());
        }
        if let Some(ck) = &o.checkpoint {
            self.paths.checkpoint = Some(ck.clone());
        }
        if let Some(w) = &o.weights {
            parse_weights(w, &mut self.train)?;
        }
        if o.no_msm {
            self.train.msm_enabled = false;
        }
        if o.no_backward {
            self.train.backward_enabled = false;
        }
        if o.no_forward {
            self.train.weights.gamma = 0.0;
        }
        if o.no_cluster {
            self.train.weights.alpha = 0.0;
        }
        if let Some(e) = o.epsilon {
            self.transport.epsilon = e;
        }
        if let Some(n) = o.epochs {
            self.train.epochs = n;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.sequences == 0 {
            return Err(CliError::Config("sequences must be at least 1".into()));
        }
        self.grid.validate()?;
        self.ground.validate()?;
        self.transport.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// SHA-256 over the command name and the resolved configuration.
    /// Output locations are excluded so moving a run does not change it.
    pub fn hash(&self, command: &str) -> String {
        let mut canonical = self.clone();
        canonical.paths.out = PathBuf::new();
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(canonical.to_toml().as_bytes());
        hex::encode(h.finalize())
    }
}
