use crate::error::{Error, Result};

/// Architecture hyper-parameters of a C-Mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct CMixerConfig {
    pub num_layers: usize,
    /// hidden size C
    pub hidden: usize,
    /// sequence length S, always `(image_side / patch)^2`
    pub seq_len: usize,
    /// patch side P in pixels
    pub patch: usize,
    /// token-mixing MLP width D_S
    pub token_hidden: usize,
    /// channel-mixing MLP width D_C
    pub channel_hidden: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_side: usize,
    /// width of the incentive network's hidden layer
    pub incentive_hidden: usize,
    /// output width of the self-supervised projection head
    pub ssl_dim: usize,
    pub ln_eps: f64,
}

impl CMixerConfig {
    /// Builds a config for `image_side`-pixel square inputs; `token_hidden` and
    /// `channel_hidden` of 0 select the defaults `2S` and `4C`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_layers: usize,
        hidden: usize,
        patch: usize,
        token_hidden: usize,
        channel_hidden: usize,
        num_classes: usize,
        in_channels: usize,
        image_side: usize,
    ) -> Result<Self> {
        if patch == 0 || !image_side.is_multiple_of(patch) {
            return Err(Error::dim(
                "config",
                format!("image side {image_side} is not divisible by patch {patch}"),
            ));
        }
        let side = image_side / patch;
        let seq_len = side * side;
        let cfg = Self {
            num_layers,
            hidden,
            seq_len,
            patch,
            token_hidden: if token_hidden == 0 {
                2 * seq_len
            } else {
                token_hidden
            },
            channel_hidden: if channel_hidden == 0 {
                4 * hidden
            } else {
                channel_hidden
            },
            num_classes,
            in_channels,
            image_side,
            incentive_hidden: 64,
            ssl_dim: 128,
            ln_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The reference architecture for 28x28 MedMNIST images: 8 layers,
    /// C = 218, P = 4 (S = 49), D_S = 2S, D_C = 4C.
    pub fn medmnist(num_classes: usize, in_channels: usize) -> Self {
        Self::new(8, 218, 4, 0, 0, num_classes, in_channels, 28)
            .expect("reference constants are consistent")
    }

    pub fn with_incentive_hidden(mut self, width: usize) -> Self {
        self.incentive_hidden = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.layers", self.num_layers),
            ("model.hidden", self.hidden),
            ("model.patch", self.patch),
            ("model.token_hidden", self.token_hidden),
            ("model.channel_hidden", self.channel_hidden),
            ("model.num_classes", self.num_classes),
            ("model.in_channels", self.in_channels),
            ("model.image_side", self.image_side),
            ("model.incentive_hidden", self.incentive_hidden),
            ("model.ssl_dim", self.ssl_dim),
        ];
        // zero layers is a legitimate degenerate network (embed -> head)
        for (key, v) in counts.into_iter().skip(1) {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    detail: "must be >= 1".into(),
                });
            }
        }
        if !self.image_side.is_multiple_of(self.patch)
            || (self.image_side / self.patch).pow(2) != self.seq_len
        {
            return Err(Error::dim(
                "config",
                format!(
                    "(side {} / patch {})^2 != S {}",
                    self.image_side, self.patch, self.seq_len
                ),
            ));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config {
                key: "model.ln_eps".into(),
                detail: "must be > 0".into(),
            });
        }
        Ok(())
    }

    /// Values per flattened patch, `P^2 * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_side * self.image_side
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("model.layers".into(), self.num_layers.to_string()),
            ("model.hidden".into(), self.hidden.to_string()),
            ("model.patch".into(), self.patch.to_string()),
            ("model.token_hidden".into(), self.token_hidden.to_string()),
            (
                "model.channel_hidden".into(),
                self.channel_hidden.to_string(),
            ),
            ("model.num_classes".into(), self.num_classes.to_string()),
            ("model.in_channels".into(), self.in_channels.to_string()),
            ("model.image_side".into(), self.image_side.to_string()),
            (
                "model.incentive_hidden".into(),
                self.incentive_hidden.to_string(),
            ),
            ("model.ssl_dim".into(), self.ssl_dim.to_string()),
            ("model.ln_eps".into(), self.ln_eps.to_string()),
        ]
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::new(1, 1, 1, 1, 1, 1, 1, 1)?;
        let mut seen_side = false;
        for (key, value) in pairs {
            let parse_count = || -> Result<usize> {
                value.trim().parse().map_err(|_| Error::Config {
                    key: key.into(),
                    detail: format!("expected a count, got `{value}`"),
                })
            };
            match key {
                "model.layers" => cfg.num_layers = parse_count()?,
                "model.hidden" => cfg.hidden = parse_count()?,
                "model.patch" => cfg.patch = parse_count()?,
                "model.token_hidden" => cfg.token_hidden = parse_count()?,
                "model.channel_hidden" => cfg.channel_hidden = parse_count()?,
                "model.num_classes" => cfg.num_classes = parse_count()?,
                "model.in_channels" => cfg.in_channels = parse_count()?,
                "model.image_side" => {
                    cfg.image_side = parse_count()?;
                    seen_side = true;
                }
                "model.incentive_hidden" => cfg.incentive_hidden = parse_count()?,
                "model.ssl_dim" => cfg.ssl_dim = parse_count()?,
                "model.ln_eps" => {
                    cfg.ln_eps = value.trim().parse().map_err(|_| Error::Config {
                        key: key.into(),
                        detail: format!("expected a number, got `{value}`"),
                    })?
                }
                other => {
                    return Err(Error::Config {
                        key: other.into(),
                        detail: "unknown model key".into(),
                    })
                }
            }
        }
        if !seen_side {
            return Err(Error::Config {
                key: "model.image_side".into(),
                detail: "missing".into(),
            });
        }
        if cfg.patch == 0 || cfg.image_side % cfg.patch != 0 {
            return Err(Error::Config {
                key: "model.patch".into(),
                detail: format!("does not divide image side {}", cfg.image_side),
            });
        }
        cfg.seq_len = (cfg.image_side / cfg.patch).pow(2);
        cfg.validate()?;
        Ok(cfg)
    }
}
