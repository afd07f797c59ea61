//! Backbone configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token mixer of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixer {
    /// Non-causal SSD, fused form.
    Ncssd,
    /// Non-causal SSD with `m ≡ 1`.
    NcssdNoM,
    /// Causal SSD scan with `A = m`.
    Ssd,
    /// Causal scans over split channel halves in opposite directions.
    BiSsd,
    /// Multi-head softmax self-attention.
    Msa,
}

impl Mixer {
    pub const ALL: [Mixer; 5] = [
        Mixer::Ncssd,
        Mixer::NcssdNoM,
        Mixer::Ssd,
        Mixer::BiSsd,
        Mixer::Msa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mixer::Ncssd => "ncssd",
            Mixer::NcssdNoM => "ncssd-no-m",
            Mixer::Ssd => "ssd",
            Mixer::BiSsd => "bi-ssd",
            Mixer::Msa => "msa",
        }
    }

    pub fn is_ssd_family(self) -> bool {
        self != Mixer::Msa
    }
}

impl fmt::Display for Mixer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mixer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mixer::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mixer {s:?}")))
    }
}

/// One stage of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub mixer: Mixer,
    pub state_dim: usize,
}

fn default_expand() -> usize {
    2
}
fn default_ffn_ratio() -> usize {
    4
}
fn default_state_dim() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_in_chans() -> usize {
    3
}
fn default_eps() -> f64 {
    1e-5
}

/// Full backbone description; serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    /// Mixer per stage; defaults to NC-SSD everywhere except MSA last.
    #[serde(default)]
    pub mixers: Vec<Mixer>,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    /// Inner width of the SSD mixers as a multiple of the channels.
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    /// Maximum stochastic-depth rate, reached by the last block.
    #[serde(default)]
    pub drop_path: f64,
    pub num_classes: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    /// Multiplies the NC-SSD output by `SiLU(z)`.
    #[serde(default = "default_true")]
    pub gate: bool,
    /// Residual depthwise convolutions before the mixer and the FFN.
    #[serde(default = "default_true")]
    pub lpu: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Permits MSA before the last stage.
    #[serde(default)]
    pub allow_inner_msa: bool,
}

impl ModelConfig {
    fn named(
        name: &str,
        blocks: [usize; 4],
        channels: [usize; 4],
        heads: [usize; 4],
        drop_path: f64,
    ) -> Self {
        Self {
            name: name.into(),
            blocks: blocks.to_vec(),
            channels: channels.to_vec(),
            heads: heads.to_vec(),
            mixers: vec![Mixer::Ncssd, Mixer::Ncssd, Mixer::Ncssd, Mixer::Msa],
            state_dim: 64,
            expand: 2,
            ffn_ratio: 4,
            drop_path,
            num_classes: 1000,
            in_chans: 3,
            gate: true,
            lpu: true,
            norm_eps: 1e-5,
            allow_inner_msa: false,
        }
    }

    pub fn micro() -> Self {
        Self::named(
            "vssd-micro",
            [2, 2, 8, 4],
            [48, 96, 192, 384],
            [2, 4, 8, 16],
            0.2,
        )
    }

    pub fn tiny() -> Self {
        Self::named(
            "vssd-tiny",
            [2, 4, 8, 4],
            [64, 128, 256, 512],
            [2, 4, 8, 16],
            0.2,
        )
    }

    pub fn small() -> Self {
        Self::named(
            "vssd-small",
            [3, 4, 18, 5],
            [64, 128, 256, 512],
            [2, 4, 8, 16],
            0.4,
        )
    }

    pub fn base() -> Self {
        Self::named(
            "vssd-base",
            [3, 4, 18, 5],
            [96, 192, 384, 768],
            [3, 6, 12, 24],
            0.6,
        )
    }

    /// Two-stage desk configuration for 32×32 inputs.
    pub fn reduced(num_classes: usize) -> Self {
        Self {
            name: "vssd-reduced".into(),
            blocks: vec![2, 2],
            channels: vec![32, 64],
            heads: vec![2, 4],
            mixers: vec![Mixer::Ncssd, Mixer::Msa],
            state_dim: 16,
            drop_path: 0.0,
            num_classes,
            ..Self::micro()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "micro" | "vssd-micro" => Ok(Self::micro()),
            "tiny" | "vssd-tiny" => Ok(Self::tiny()),
            "small" | "vssd-small" => Ok(Self::small()),
            "base" | "vssd-base" => Ok(Self::base()),
            "reduced" | "vssd-reduced" => Ok(Self::reduced(10)),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn mixer(&self, stage: usize) -> Mixer {
        match self.mixers.get(stage) {
            Some(&m) => m,
            None if stage + 1 == self.num_stages() && self.num_stages() > 1 => Mixer::Msa,
            None => Mixer::Ncssd,
        }
    }

    pub fn stage(&self, i: usize) -> StageSpec {
        StageSpec {
            blocks: self.blocks[i],
            channels: self.channels[i],
            heads: self.heads[i],
            mixer: self.mixer(i),
            state_dim: self.state_dim,
        }
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        (0..self.num_stages()).map(|i| self.stage(i)).collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Uses `mixer` in every stage.
    pub fn with_uniform_mixer(mut self, mixer: Mixer) -> Self {
        self.mixers = vec![mixer; self.num_stages()];
        self.allow_inner_msa = mixer == Mixer::Msa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.blocks.len();
        if k == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.channels.len() != k || self.heads.len() != k {
            return Err(Error::Config(format!(
                "blocks, channels and heads must have equal length, got {}, {}, {}",
                k,
                self.channels.len(),
                self.heads.len()
            )));
        }
        if !self.mixers.is_empty() && self.mixers.len() != k {
            return Err(Error::Config(format!(
                "mixers lists {} stages, expected {k}",
                self.mixers.len()
            )));
        }
        if self.state_dim == 0 || self.expand == 0 || self.ffn_ratio == 0 || self.in_chans == 0 {
            return Err(Error::Config(
                "state_dim, expand, ffn_ratio and in_chans must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!(
                "drop_path must be in [0, 1), got {}",
                self.drop_path
            )));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        for (i, s) in self.stages().into_iter().enumerate() {
            if s.channels == 0 || s.heads == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels and heads must be positive"
                )));
            }
            if s.channels % 2 != 0 && i == 0 {
                return Err(Error::Config(format!(
                    "stage 0 channels {} must be even for the stem",
                    s.channels
                )));
            }
            if s.channels % s.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels {} not divisible by heads {}",
                    s.channels, s.heads
                )));
            }
            if s.mixer == Mixer::BiSsd && !(self.expand * s.channels / s.heads).is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "stage {i}: Bi-SSD needs an even head width"
                )));
            }
            if s.mixer == Mixer::Msa && i + 1 != k && !self.allow_inner_msa {
                return Err(Error::Config(format!(
                    "stage {i}: MSA is only permitted in the last stage"
                )));
            }
            if i > 0 && s.channels != 2 * self.channels[i - 1] {
                return Err(Error::Config(format!(
                    "stage {i}: channels {} must double the previous {}",
                    s.channels,
                    self.channels[i - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Downsampling factor from input to the last stage.
    pub fn total_stride(&self) -> usize {
        4 << (self.num_stages() - 1)
    }
}
