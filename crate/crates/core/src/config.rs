//! Run configuration. The file syntax is JSON, same as the clip manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::DType;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the initial rate down to `lr_floor` times it over
    /// `steps` updates.
    Cosine,
}

/// How the ROI mask biases the memory attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiBias {
    /// `α·mask_k` added to the score column of every memory key token,
    /// using the mask stored with that key's entry.
    KeyBroadcast,
    /// `α·m_t[q]` added to every score of query row `q`. The row-wise
    /// softmax cancels it, so this is the same as `Off`.
    QueryBroadcastLiteral,
    Off,
}

impl std::str::FromStr for RoiBias {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "key" | "key_broadcast" => Ok(Self::KeyBroadcast),
            "literal" | "query_broadcast_literal" => Ok(Self::QueryBroadcastLiteral),
            "off" => Ok(Self::Off),
            other => Err(format!("unknown roi bias mode {other:?} (key|literal|off)")),
        }
    }
}

/// Input channels fed to the model. Disabling `hand` turns the forecaster
/// into a plain regressor of the next state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modalities {
    pub text: bool,
    pub video: bool,
    pub hand: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self { text: true, video: true, hand: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_layers: usize,
    pub visual_layers: usize,
    pub hand_layers: usize,
    pub decoder_layers: usize,
    pub text_context: usize,
    pub pose_dim: usize,
    /// Memory capacity N.
    pub memory_capacity: usize,
    pub memory_enabled: bool,
    pub roi_bias: RoiBias,
    pub queries: usize,
    pub raster: usize,
    pub patch: usize,
    pub modalities: Modalities,

    pub lambda_type: f64,
    pub lambda_box: f64,
    pub lambda_pose: f64,
    pub lambda_traj: f64,
    pub background_weight: f64,

    // Large-scale reference: lr 2e-4, batch 256 per GPU on 8 GPUs.
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub batch: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Probability of feeding the model's own forecast instead of the
    /// ground truth during training.
    pub scheduled_sampling: f64,
    /// Half-width in cm of uniform noise added to the teacher-forced
    /// wrist positions fed back as the next step's hand input.
    pub input_jitter: f64,
    pub seed: u64,
    pub precision: DType,
    pub confidence_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            mlp_ratio: 4,
            text_layers: 2,
            visual_layers: 2,
            hand_layers: 2,
            decoder_layers: 4,
            text_context: 16,
            pose_dim: 48,
            memory_capacity: 15,
            memory_enabled: true,
            roi_bias: RoiBias::KeyBroadcast,
            queries: 6,
            raster: 64,
            patch: 8,
            modalities: Modalities::default(),
            lambda_type: 5.0,
            lambda_box: 2.0,
            lambda_pose: 2.0,
            lambda_traj: 2.0,
            background_weight: 0.1,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            lr_floor: 0.01,
            batch: 8,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            scheduled_sampling: 0.0,
            input_jitter: 0.0,
            seed: 0,
            precision: DType::F32,
            confidence_threshold: 0.5,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("text_context", self.text_context),
            ("pose_dim", self.pose_dim),
            ("memory_capacity", self.memory_capacity),
            ("raster", self.raster),
            ("patch", self.patch),
            ("batch", self.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.queries < 2 {
            return Err(Error::Config("queries must be at least 2".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide d {}", self.heads, self.d)));
        }
        if self.raster % self.patch != 0 {
            return Err(Error::Config(format!("patch {} must divide raster {}", self.patch, self.raster)));
        }
        let lambdas = [self.lambda_type, self.lambda_box, self.lambda_pose, self.lambda_traj, self.background_weight];
        if lambdas.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("lr_floor must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling) {
            return Err(Error::Config("scheduled_sampling must be a probability".into()));
        }
        if !(self.input_jitter >= 0.0 && self.input_jitter.is_finite()) {
            return Err(Error::Config("input_jitter must be finite and non-negative".into()));
        }
        let m = self.modalities;
        if !m.video && !m.hand {
            return Err(Error::Config("at least one of video/hand inputs must be enabled".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.raster / self.patch
    }

    pub fn visual_tokens(&self) -> usize {
        if self.modalities.video {
            self.grid() * self.grid()
        } else {
            0
        }
    }

    pub fn hand_tokens(&self) -> usize {
        if self.modalities.hand {
            2
        } else {
            0
        }
    }

    pub fn text_tokens(&self) -> usize {
        if self.modalities.text {
            self.text_context
        } else {
            0
        }
    }

    /// Tokens per memory entry (`e_t`).
    pub fn step_tokens(&self) -> usize {
        self.visual_tokens() + self.hand_tokens()
    }

    /// Tokens fed to the decoder (`f_me`).
    pub fn fused_tokens(&self) -> usize {
        self.text_tokens() + self.step_tokens()
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Small model used by tests and the quick experiment harness.
    pub fn desk() -> Self {
        Self {
            d: 32,
            heads: 4,
            mlp_ratio: 2,
            text_layers: 1,
            visual_layers: 1,
            hand_layers: 1,
            decoder_layers: 2,
            raster: 32,
            patch: 8,
            ..Self::default()
        }
    }

    /// Learning rate for update `step` (0-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = if self.steps <= 1 { 0.0 } else { (step as f64 / (self.steps - 1) as f64).min(1.0) };
                let shape = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.learning_rate * (self.lr_floor + (1.0 - self.lr_floor) * shape)
            }
        }
    }

    /// Parameters whose tensor shapes differ make checkpoints incompatible.
    pub fn same_architecture(&self, other: &Config) -> bool {
        (self.d, self.heads, self.mlp_ratio, self.text_layers, self.visual_layers)
            == (other.d, other.heads, other.mlp_ratio, other.text_layers, other.visual_layers)
            && (self.hand_layers, self.decoder_layers, self.text_context, self.pose_dim)
                == (other.hand_layers, other.decoder_layers, other.text_context, other.pose_dim)
            && (self.queries, self.raster, self.patch) == (other.queries, other.raster, other.patch)
    }
}
