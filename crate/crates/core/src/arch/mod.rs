//! The latent operator: lifting, latent encoder/decoder, latent SSM blocks
//! and projection.

mod checkpoint;
mod coder;
mod model;

use std::fmt::Write as _;

use crate::config::{self, ConfigError};
use crate::ssm::ZohMode;
use crate::tensor::ltns::FormatError;
use crate::tensor::{Scalar, Tensor, TensorError};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use coder::{direction_order, invert_permutation, square_factor, PatchGeom};
pub use model::{BlockOutput, LamoModel, LATENT_MASS_EPS, LN_EPS};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Format(#[from] FormatError),
    #[error("checkpoint parameter {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Directions {
    Uni,
    Bi,
    Multi4,
}

impl Directions {
    pub fn count(self) -> usize {
        match self {
            Directions::Uni => 1,
            Directions::Bi => 2,
            Directions::Multi4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Directions::Uni => "uni",
            Directions::Bi => "bi",
            Directions::Multi4 => "multi4",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoderMode {
    Learned,
    Patchify,
}

impl CoderMode {
    pub fn name(self) -> &'static str {
        match self {
            CoderMode::Learned => "learned",
            CoderMode::Patchify => "patchify",
        }
    }
}

/// Hyperparameters of a [`LamoModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub latent_tokens: usize,
    pub state_dim: usize,
    pub heads: usize,
    pub expand: usize,
    pub directions: Directions,
    /// 0 disables the token-axis convolution.
    pub conv_width: usize,
    pub coder: CoderMode,
    /// `None` picks the default: shared for point clouds, not for grids.
    pub share_coders: Option<bool>,
    pub normalize_latents: bool,
    pub grid: Option<(usize, usize)>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub coord_channels: usize,
    /// Physical point count; 0 means `h·w` of the grid.
    pub fixed_points: usize,
    pub zoh: ZohMode,
    /// Direct term inside every scan.
    pub skip: bool,
    /// Adds the lifted input back onto the decoded field before projection.
    pub phys_skip: bool,
    /// Hidden width of the projection MLP; 0 means `embed_dim`.
    pub proj_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            embed_dim: 32,
            latent_tokens: 64,
            state_dim: 16,
            heads: 1,
            expand: 2,
            directions: Directions::Bi,
            conv_width: 3,
            coder: CoderMode::Learned,
            share_coders: None,
            normalize_latents: true,
            grid: None,
            in_channels: 1,
            out_channels: 1,
            coord_channels: 2,
            fixed_points: 0,
            zoh: ZohMode::Exact,
            skip: true,
            phys_skip: true,
            proj_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 20] = [
        "n_layers",
        "embed_dim",
        "latent_tokens",
        "state_dim",
        "heads",
        "expand",
        "directions",
        "conv_width",
        "coder",
        "share_coders",
        "normalize_latents",
        "grid",
        "in_channels",
        "out_channels",
        "coord_channels",
        "fixed_points",
        "zoh",
        "skip",
        "phys_skip",
        "proj_hidden",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: &str| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            msg: msg.into(),
        };
        match key {
            "n_layers" => self.n_layers = config::parse_value(key, value)?,
            "embed_dim" => self.embed_dim = config::parse_value(key, value)?,
            "latent_tokens" => self.latent_tokens = config::parse_value(key, value)?,
            "state_dim" => self.state_dim = config::parse_value(key, value)?,
            "heads" => self.heads = config::parse_value(key, value)?,
            "expand" => self.expand = config::parse_value(key, value)?,
            "directions" => {
                self.directions = match value {
                    "uni" => Directions::Uni,
                    "bi" => Directions::Bi,
                    "multi4" => Directions::Multi4,
                    _ => return Err(bad("expected uni, bi or multi4")),
                }
            }
            "conv_width" => self.conv_width = config::parse_value(key, value)?,
            "coder" => {
                self.coder = match value {
                    "learned" => CoderMode::Learned,
                    "patchify" => CoderMode::Patchify,
                    _ => return Err(bad("expected learned or patchify")),
                }
            }
            "share_coders" => {
                self.share_coders = match value {
                    "auto" => None,
                    v => Some(config::parse_bool(key, v)?),
                }
            }
            "normalize_latents" => self.normalize_latents = config::parse_bool(key, value)?,
            "grid" => {
                self.grid = match value {
                    "none" => None,
                    v => Some(config::parse_grid(v).ok_or_else(|| bad("expected HxW or none"))?),
                }
            }
            "in_channels" => self.in_channels = config::parse_value(key, value)?,
            "out_channels" => self.out_channels = config::parse_value(key, value)?,
            "coord_channels" => self.coord_channels = config::parse_value(key, value)?,
            "fixed_points" => self.fixed_points = config::parse_value(key, value)?,
            "zoh" => self.zoh = config::parse_value(key, value).map_err(|_| bad("expected exact or simplified"))?,
            "skip" => self.skip = config::parse_bool(key, value)?,
            "phys_skip" => self.phys_skip = config::parse_bool(key, value)?,
            "proj_hidden" => self.proj_hidden = config::parse_value(key, value)?,
            _ => return Err(config::unknown(key, &Self::KEYS)),
        }
        Ok(())
    }

    /// `key = value` lines, readable back with [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let share = match self.share_coders {
            None => "auto".to_string(),
            Some(b) => b.to_string(),
        };
        let grid = match self.grid {
            None => "none".to_string(),
            Some((h, w)) => format!("{h}x{w}"),
        };
        let values: [String; 20] = [
            self.n_layers.to_string(),
            self.embed_dim.to_string(),
            self.latent_tokens.to_string(),
            self.state_dim.to_string(),
            self.heads.to_string(),
            self.expand.to_string(),
            self.directions.name().into(),
            self.conv_width.to_string(),
            self.coder.name().into(),
            share,
            self.normalize_latents.to_string(),
            grid,
            self.in_channels.to_string(),
            self.out_channels.to_string(),
            self.coord_channels.to_string(),
            self.fixed_points.to_string(),
            self.zoh.name().into(),
            self.skip.to_string(),
            self.phys_skip.to_string(),
            self.proj_hidden.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = ModelConfig::default();
        for (k, v) in config::parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn points(&self) -> usize {
        match (self.fixed_points, self.grid) {
            (0, Some((h, w))) => h * w,
            (n, _) => n,
        }
    }

    pub fn shares_coders(&self) -> bool {
        self.share_coders.unwrap_or(self.grid.is_none())
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.inner_dim() / self.heads.max(1)
    }

    pub fn patch_geom(&self) -> Result<Option<PatchGeom>, ModelError> {
        match self.coder {
            CoderMode::Learned => Ok(None),
            CoderMode::Patchify => {
                let grid = self.grid.ok_or_else(|| ModelError::Config("patchify requires a grid".into()))?;
                PatchGeom::for_tokens(grid, self.latent_tokens).map(Some)
            }
        }
    }

    /// Layout of the latent tokens used by the scan directions.
    pub fn latent_grid(&self) -> Result<(usize, usize), ModelError> {
        Ok(match (self.patch_geom()?, self.directions) {
            (Some(g), _) => g.token_grid(),
            (None, Directions::Multi4) => square_factor(self.latent_tokens),
            (None, _) => (1, self.latent_tokens),
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.latent_tokens == 0 || self.state_dim == 0 {
            return err("embed_dim, latent_tokens and state_dim must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.expand == 0 {
            return err("expand must be at least 1".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return err("in_channels and out_channels must be positive".into());
        }
        if self.directions == Directions::Multi4 && self.grid.is_none() {
            return err("multi4 directions require a grid".into());
        }
        if let Some((h, w)) = self.grid {
            if self.fixed_points != 0 && self.fixed_points != h * w {
                return err(format!("fixed_points {} disagrees with grid {h}x{w}", self.fixed_points));
            }
        }
        if self.coder == CoderMode::Learned && self.points() == 0 {
            return err("the learned decoder needs fixed_points or a grid".into());
        }
        self.patch_geom()?;
        Ok(())
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let c = ModelConfig {
            grid: Some((32, 32)),
            coder: CoderMode::Patchify,
            directions: Directions::Multi4,
            share_coders: Some(false),
            zoh: ZohMode::Simplified,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(matches!(ModelConfig::default().set("width", "3"), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn validation() {
        let ok = ModelConfig {
            grid: Some((8, 8)),
            ..ModelConfig::default()
        };
        ok.validate().unwrap();
        assert!(!ok.shares_coders());
        assert!(ModelConfig {
            fixed_points: 100,
            ..ModelConfig::default()
        }
        .shares_coders());
        for bad in [
            ModelConfig { heads: 3, ..ok.clone() },
            ModelConfig { directions: Directions::Multi4, grid: None, fixed_points: 64, ..ok.clone() },
            ModelConfig { coder: CoderMode::Patchify, latent_tokens: 7, ..ok.clone() },
            ModelConfig { grid: None, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let four = ModelConfig { embed_dim: 128, heads: 4, ..ok };
        assert_eq!(four.head_dim(), 64);
    }
}
