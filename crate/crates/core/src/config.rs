use std::str::FromStr;

use crate::error::{config, Error, Result};

/// Attention logit scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttnScale {
    /// `q·k / sqrt(d_head)`
    #[default]
    SqrtDh,
    /// `q·k / d_head`
    Dh,
}

impl AttnScale {
    pub fn factor(self, d_head: usize) -> f64 {
        match self {
            AttnScale::SqrtDh => 1.0 / (d_head as f64).sqrt(),
            AttnScale::Dh => 1.0 / d_head as f64,
        }
    }
}

impl FromStr for AttnScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_dh" => Ok(AttnScale::SqrtDh),
            "dh" => Ok(AttnScale::Dh),
            other => config(format!("attn_scale must be sqrt_dh or dh, got `{other}`")),
        }
    }
}

/// Architecture dimensions shared by every module of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Backbone token width `F`.
    pub enc_dim: usize,
    /// Visual tokens per study after projection, `S'`.
    pub tokens: usize,
    /// Model width `F'`.
    pub d_model: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub decoder_layers: usize,
    pub text_layers: usize,
    /// Longest token sequence (BOS and EOS included), `L_txt`.
    pub max_text_len: usize,
    pub max_studies: usize,
    pub attn_scale: AttnScale,
    pub init_std: f64,
    /// Adds the relative-date table to visual tokens; off for the ablation.
    pub date_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch: 4,
            enc_dim: 32,
            tokens: 8,
            d_model: 64,
            heads: 4,
            temporal_layers: 2,
            decoder_layers: 2,
            text_layers: 2,
            max_text_len: 32,
            max_studies: 5,
            attn_scale: AttnScale::SqrtDh,
            init_std: 0.02,
            date_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("enc_dim", self.enc_dim),
            ("tokens", self.tokens),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("temporal_layers", self.temporal_layers),
            ("decoder_layers", self.decoder_layers),
            ("text_layers", self.text_layers),
            ("max_studies", self.max_studies),
        ];
        for (name, v) in positive {
            if v == 0 {
                return config(format!("{name} must be positive"));
            }
        }
        if self.image_size % self.patch != 0 {
            return config(format!(
                "patch {} does not divide image size {}",
                self.patch, self.image_size
            ));
        }
        if self.d_model % self.heads != 0 {
            return config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.max_text_len < 2 {
            return config("max_text_len must be at least 2");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return config("init_std must be finite and non-negative");
        }
        Ok(())
    }

    /// Backbone token count `S`.
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Numeric encoding used in checkpoints.
    pub fn to_values(&self) -> Vec<f64> {
        vec![
            self.image_size as f64,
            self.channels as f64,
            self.patch as f64,
            self.enc_dim as f64,
            self.tokens as f64,
            self.d_model as f64,
            self.heads as f64,
            self.temporal_layers as f64,
            self.decoder_layers as f64,
            self.text_layers as f64,
            self.max_text_len as f64,
            self.max_studies as f64,
            match self.attn_scale {
                AttnScale::SqrtDh => 0.0,
                AttnScale::Dh => 1.0,
            },
            self.init_std,
            self.date_embedding as u8 as f64,
        ]
    }

    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 15 {
            return Err(Error::Format(format!("model config needs 15 values, got {}", v.len())));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            image_size: u(0),
            channels: u(1),
            patch: u(2),
            enc_dim: u(3),
            tokens: u(4),
            d_model: u(5),
            heads: u(6),
            temporal_layers: u(7),
            decoder_layers: u(8),
            text_layers: u(9),
            max_text_len: u(10),
            max_studies: u(11),
            attn_scale: if v[12] == 0.0 { AttnScale::SqrtDh } else { AttnScale::Dh },
            init_std: v[13],
            date_embedding: v[14] != 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.patches(), 16);
        assert_eq!(c.d_head(), 16);
        assert_eq!(ModelConfig::from_values(&c.to_values()).unwrap(), c);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { patch: 5, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scale_switch() {
        assert_eq!(AttnScale::SqrtDh.factor(16), 0.25);
        assert_eq!(AttnScale::Dh.factor(16), 1.0 / 16.0);
        assert_eq!("dh".parse::<AttnScale>().unwrap(), AttnScale::Dh);
        assert!("nope".parse::<AttnScale>().is_err());
    }
}
