use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::kv;
use crate::losses::LossWeights;
use crate::metrics::EvalRange;
use crate::nets::{OutputHead, UNetConfig};
use crate::tensor::AdamConfig;

/// Which stages of the pipeline run and which losses are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// DepNet alone, depth loss on the first view.
    DepnetOnly,
    /// DepNet, warp and SynNet; no second-view depth loss.
    DepnetSynnet,
    /// Full pipeline including DepNet on the synthesized view.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::DepnetOnly, Mode::DepnetSynnet, Mode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DepnetOnly => "depnet_only",
            Mode::DepnetSynnet => "depnet_synnet",
            Mode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s} (depnet_only, depnet_synnet, full)")))
    }

    pub fn uses_synnet(self) -> bool {
        self != Mode::DepnetOnly
    }
}

/// Size-independent U-Net settings; the input size comes from the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetSpec {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            channel_cap: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub depnet: NetSpec,
    pub synnet: NetSpec,
    /// Upper bound of the depth head in meters.
    pub max_depth: f64,
    pub eval_range: EvalRange,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write `epoch_XXX.ckpt` after every this many epochs; `final.ckpt`
    /// is always written.
    pub checkpoint_every: usize,
    pub log_dir: Option<PathBuf>,
    /// Stop the image loss from reaching DepNet through the warp.
    pub detach_warp_for_l2: bool,
    /// Also train on every pair with its views swapped.
    pub symmetric_pairs: bool,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            depnet: NetSpec::default(),
            synnet: NetSpec::default(),
            max_depth: 10.0,
            eval_range: EvalRange::nyu(),
            seed: 1,
            checkpoint_dir: None,
            checkpoint_every: 1,
            log_dir: None,
            detach_warp_for_l2: false,
            symmetric_pairs: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Parses a key=value file. Keys under `scene.` belong to the data
    /// generator and are skipped.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text)? {
            if e.key.starts_with("scene.") {
                continue;
            }
            match e.key.as_str() {
                "mode" => cfg.mode = Mode::parse(&e.value).map_err(|_| e.invalid())?,
                "epochs" => cfg.epochs = e.parse()?,
                "batch_size" => cfg.batch_size = e.parse()?,
                "learning_rate" => cfg.learning_rate = e.parse()?,
                "alpha" => cfg.weights.alpha = e.parse()?,
                "beta" => cfg.weights.beta = e.parse()?,
                "levels" => {
                    cfg.depnet.levels = e.parse()?;
                    cfg.synnet.levels = cfg.depnet.levels;
                }
                "base_channels" => {
                    cfg.depnet.base_channels = e.parse()?;
                    cfg.synnet.base_channels = cfg.depnet.base_channels;
                }
                "channel_cap" => {
                    cfg.depnet.channel_cap = e.parse()?;
                    cfg.synnet.channel_cap = cfg.depnet.channel_cap;
                }
                "depnet.levels" => cfg.depnet.levels = e.parse()?,
                "depnet.base_channels" => cfg.depnet.base_channels = e.parse()?,
                "depnet.channel_cap" => cfg.depnet.channel_cap = e.parse()?,
                "synnet.levels" => cfg.synnet.levels = e.parse()?,
                "synnet.base_channels" => cfg.synnet.base_channels = e.parse()?,
                "synnet.channel_cap" => cfg.synnet.channel_cap = e.parse()?,
                "max_depth" => cfg.max_depth = e.parse()?,
                "eval_min_depth" => cfg.eval_range.min_depth = e.parse()?,
                "eval_max_depth" => cfg.eval_range.max_depth = e.parse()?,
                "seed" => cfg.seed = e.parse()?,
                "checkpoint_dir" => cfg.checkpoint_dir = Some(PathBuf::from(&e.value)),
                "checkpoint_every" => cfg.checkpoint_every = e.parse()?,
                "log_dir" => cfg.log_dir = Some(PathBuf::from(&e.value)),
                "detach_warp_for_l2" => cfg.detach_warp_for_l2 = e.flag()?,
                "symmetric_pairs" => cfg.symmetric_pairs = e.flag()?,
                "max_steps" => cfg.max_steps = Some(e.parse()?),
                _ => return Err(e.unknown()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::config(
                "epochs, batch_size and checkpoint_every must be positive",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!("bad learning rate {}", self.learning_rate)));
        }
        self.weights.validate()?;
        self.eval_range.validate()?;
        if !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(Error::config("max_depth must be positive"));
        }
        for spec in [self.depnet, self.synnet] {
            if spec.levels == 0 || spec.base_channels == 0 || spec.channel_cap == 0 {
                return Err(Error::config("network levels and channels must be positive"));
            }
        }
        Ok(())
    }

    /// Loss weights after the mode's cut: β is zeroed without SynNet.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::DepnetOnly => LossWeights {
                alpha: self.weights.alpha,
                beta: 0.0,
            },
            _ => self.weights,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn depnet_config(&self, height: usize, width: usize) -> UNetConfig {
        let s = self.depnet;
        UNetConfig::with_schedule(
            s.levels,
            s.base_channels,
            s.channel_cap,
            3,
            OutputHead::Depth,
            self.max_depth,
            height,
            width,
        )
    }

    pub fn synnet_config(&self, height: usize, width: usize) -> UNetConfig {
        let s = self.synnet;
        UNetConfig::with_schedule(
            s.levels,
            s.base_channels,
            s.channel_cap,
            3,
            OutputHead::Rgb,
            1.0,
            height,
            width,
        )
    }
}
