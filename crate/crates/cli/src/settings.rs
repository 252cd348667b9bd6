//! Run settings: a flat `key=value` map with defaults, file loading,
//! command-line overrides and the manifest written after every run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cmixer::data::DatasetBundle;
use cmixer::model::CMixerConfig;
use cmixer::train::{Ablation, TrainConfig};
use cmixer::{Error, Result};

/// Keys under this prefix describe a finished run; they are ignored on load so
/// a manifest can be fed back as a config file.
pub const MANIFEST_PREFIX: &str = "manifest.";

/// Value of a model key that is filled in from the dataset.
pub const AUTO: &str = "auto";

const EXTRA_DEFAULTS: &[(&str, &str)] = &[
    ("data.path", ""),
    ("run.checkpoint", ""),
    ("eval.split", "test"),
    ("splits.semi_frac", "1"),
    ("splits.corrupt_rate", "0"),
    ("noise.samples", "16"),
    ("synth.classes", "2"),
    ("synth.per_class", "100"),
    ("synth.side", "28"),
    ("model.layers", "8"),
    ("model.hidden", "218"),
    ("model.patch", "4"),
    ("model.token_hidden", "0"),
    ("model.channel_hidden", "0"),
    ("model.incentive_hidden", "64"),
    ("model.ssl_dim", "128"),
    ("model.ln_eps", "0.00001"),
    ("model.num_classes", AUTO),
    ("model.in_channels", AUTO),
    ("model.image_side", AUTO),
];

fn config_err(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> =
            TrainConfig::default().to_kv().into_iter().collect();
        for (k, v) in EXTRA_DEFAULTS {
            values.insert(k.to_string(), v.to_string());
        }
        Self { values }
    }
}

impl Settings {
    /// Sets a known key; unknown keys are config errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(config_err(key, "unknown key")),
        }
    }

    /// Parses a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| config_err(pair, "expected KEY=VALUE"))?;
        self.set(k, v)
    }

    /// Applies a `key=value` file: blank lines and `#` comments are skipped,
    /// `manifest.*` keys ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                config_err(
                    &format!("line {}", n + 1),
                    format!("expected key=value, got `{line}`"),
                )
            })?;
            if k.trim().starts_with(MANIFEST_PREFIX) {
                continue;
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| config_err(key, format!("cannot parse `{v}`")))
    }

    /// A path-valued key, `None` when empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key))
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| config_err(key, "required"))
    }

    pub fn apply_toggle(&mut self, toggle: &str) -> Result<()> {
        let mut ablation = self.train_config()?.ablation;
        ablation.apply(toggle)?;
        self.write_ablation(&ablation);
        Ok(())
    }

    fn write_ablation(&mut self, a: &Ablation) {
        for (k, v) in [
            ("ssl", a.ssl),
            ("rm", a.rm),
            ("il", a.il),
            ("p_r", a.p_r),
            ("p_i", a.p_i),
        ] {
            self.values.insert(format!("ablation.{k}"), v.to_string());
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.values {
            if k.starts_with("train.") || k.starts_with("ablation.") {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The architecture, with `auto` keys taken from `bundle`.
    pub fn model_config(&self, bundle: &DatasetBundle) -> Result<CMixerConfig> {
        if bundle.height != bundle.width {
            return Err(Error::Contract(format!(
                "images are {}x{}, the model needs square inputs",
                bundle.height, bundle.width
            )));
        }
        let count = |key: &str, auto: usize| -> Result<usize> {
            if self.get(key) == AUTO {
                Ok(auto)
            } else {
                self.parse(key)
            }
        };
        let classes = count("model.num_classes", bundle.num_classes)?;
        let channels = count("model.in_channels", bundle.channels)?;
        let side = count("model.image_side", bundle.height)?;
        let patch = count("model.patch", 0)?;
        if patch == 0 || side % patch != 0 {
            return Err(config_err(
                "model.patch",
                format!("{patch} does not divide image side {side}"),
            ));
        }
        let mut cfg = CMixerConfig::new(
            self.parse("model.layers")?,
            self.parse("model.hidden")?,
            patch,
            self.parse("model.token_hidden")?,
            self.parse("model.channel_hidden")?,
            classes,
            channels,
            side,
        )
        .map_err(|e| config_err("model", e.to_string()))?
        .with_incentive_hidden(self.parse("model.incentive_hidden")?);
        cfg.ssl_dim = self.parse("model.ssl_dim")?;
        cfg.ln_eps = self.parse("model.ln_eps")?;
        cfg.validate()
            .map_err(|e| config_err("model", e.to_string()))?;
        Ok(cfg)
    }

    /// Records the architecture actually used, so the manifest reproduces it.
    pub fn record_model(&mut self, cfg: &CMixerConfig) {
        for (k, v) in cfg.to_kv() {
            self.values.insert(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Everything needed to describe a finished run.
#[derive(Clone, Debug)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub toggles: &'a [String],
    pub settings: &'a Settings,
    /// artifact file name and its SHA-256 in hex
    pub checksums: Vec<(String, String)>,
}

impl Manifest<'_> {
    pub fn render(&self) -> String {
        let mut s = String::from("# cmixer run manifest\n");
        let _ = writeln!(s, "{MANIFEST_PREFIX}command={}", self.command);
        let config = self
            .config
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let _ = writeln!(s, "{MANIFEST_PREFIX}config={config}");
        let _ = writeln!(s, "{MANIFEST_PREFIX}out={}", self.out.display());
        let _ = writeln!(s, "{MANIFEST_PREFIX}toggles={}", self.toggles.join(","));
        for (name, sum) in &self.checksums {
            let _ = writeln!(s, "{MANIFEST_PREFIX}sha256.{name}={sum}");
        }
        for (k, v) in self.settings.iter() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
