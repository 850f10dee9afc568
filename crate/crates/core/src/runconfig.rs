//! Line-oriented `key = value` run configuration with per-value provenance.
//!
//! Values are resolved in order: preset defaults, config file, `CAVIT_SEED`, then
//! command-line settings in the order given. `#` starts a comment.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::model::{ClsProjection, ModelConfig, Variant};
use crate::train::{EarlyStop, Precision, TrainConfig};

pub const SEED_ENV: &str = "CAVIT_SEED";

/// Named starting points for every key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Gradcheck,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Gradcheck => "gradcheck",
            Preset::Paper => "paper",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Gradcheck => ModelConfig::gradcheck(),
            Preset::Paper => ModelConfig::paper(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "gradcheck" => Ok(Preset::Gradcheck),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::config(format!("unknown preset {s:?} (expected desk, gradcheck or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File { path: PathBuf, line: usize },
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::File { path, line } => write!(f, "file {}:{line}", path.display()),
            Source::Env => write!(f, "env {SEED_ENV}"),
            Source::Flag => f.write_str("flag"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Variant,
    ClsProjection,
    Precision,
    DataKind,
    Count,
    NonNegative,
    Real,
    Seed,
    Fraction,
    OptionalFraction,
    OptionalPath,
}

const KEYS: &[(&str, Kind)] = &[
    ("variant", Kind::Variant),
    ("image_size", Kind::Count),
    ("patch_size", Kind::Count),
    ("embed_dim", Kind::Count),
    ("depth", Kind::NonNegative),
    ("spatial_heads", Kind::Count),
    ("channel_heads", Kind::Count),
    ("mlp_ratio", Kind::Real),
    ("n_classes", Kind::Count),
    ("in_channels", Kind::Count),
    ("cls_projection", Kind::ClsProjection),
    ("learning_rate", Kind::Real),
    ("epochs", Kind::Count),
    ("batch_size", Kind::Count),
    ("seed", Kind::Seed),
    ("precision", Kind::Precision),
    ("val_fraction", Kind::Fraction),
    ("stop_train_acc", Kind::OptionalFraction),
    ("stop_val_acc", Kind::OptionalFraction),
    ("data", Kind::OptionalPath),
    ("data_kind", Kind::DataKind),
    ("data_count", Kind::Count),
];

pub const NONE: &str = "none";

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::config(format!("{key}: expected {what}, got {value:?}")));
    let ok = match kind {
        Kind::Variant => return value.parse::<Variant>().map(|_| ()),
        Kind::ClsProjection => return value.parse::<ClsProjection>().map(|_| ()),
        Kind::Precision => return value.parse::<Precision>().map(|_| ()),
        Kind::DataKind => return value.parse::<SyntheticKind>().map(|_| ()),
        Kind::Count => matches!(value.parse::<usize>(), Ok(n) if n > 0),
        Kind::NonNegative => value.parse::<usize>().is_ok(),
        Kind::Real => matches!(value.parse::<f64>(), Ok(x) if x.is_finite() && x >= 0.0),
        Kind::Seed => value.parse::<u64>().is_ok(),
        Kind::Fraction => matches!(value.parse::<f64>(), Ok(x) if x > 0.0 && x < 1.0),
        Kind::OptionalFraction => value == NONE || matches!(value.parse::<f64>(), Ok(x) if (0.0..=1.0).contains(&x)),
        Kind::OptionalPath => !value.is_empty(),
    };
    if ok {
        return Ok(());
    }
    match kind {
        Kind::Count => bad("a positive integer"),
        Kind::NonNegative => bad("a non-negative integer"),
        Kind::Real => bad("a finite non-negative number"),
        Kind::Seed => bad("an unsigned 64-bit integer"),
        Kind::Fraction => bad("a number strictly between 0 and 1"),
        Kind::OptionalFraction => bad("a number in [0, 1] or none"),
        _ => bad("a path or none"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    entries: IndexMap<&'static str, Entry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let m = preset.model();
        let t = TrainConfig::default();
        let values: Vec<String> = vec![
            m.variant.to_string(),
            m.image_size.to_string(),
            m.patch_size.to_string(),
            m.embed_dim.to_string(),
            m.depth.to_string(),
            m.spatial_heads.to_string(),
            m.channel_heads.to_string(),
            m.mlp_ratio.to_string(),
            m.n_classes.to_string(),
            m.in_channels.to_string(),
            m.cls_projection.to_string(),
            t.learning_rate.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.precision.to_string(),
            "0.2".into(),
            NONE.into(),
            NONE.into(),
            NONE.into(),
            SyntheticKind::Bars.to_string(),
            "640".into(),
        ];
        let entries = KEYS
            .iter()
            .zip(values)
            .map(|(&(k, _), value)| {
                (
                    k,
                    Entry {
                        value,
                        source: Source::Default,
                    },
                )
            })
            .collect();
        RunConfig { entries }
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    /// Set `key`, checking that it exists and the value parses.
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let &(k, kind) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::config(format!("unknown key {key:?}")))?;
        check_value(k, kind, value)?;
        self.entries.insert(
            k,
            Entry {
                value: value.to_string(),
                source,
            },
        );
        Ok(())
    }

    /// Apply a `KEY=VALUE` command-line setting.
    pub fn set_flag(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected KEY=VALUE, got {assignment:?}")))?;
        self.set(k.trim(), v.trim(), Source::Flag)
    }

    /// Apply config file text; errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(msg) => Error::config(format!("{}:{line}: {msg}", path.display())),
                e => e,
            };
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| at(Error::config(format!("expected key = value, got {content:?}"))))?;
            let source = Source::File {
                path: path.to_path_buf(),
                line,
            };
            self.set(k.trim(), v.trim(), source).map_err(at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Apply a `CAVIT_SEED` value if one is set.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        match value {
            Some(v) => self
                .set("seed", v.trim(), Source::Env)
                .map_err(|e| Error::config(format!("{SEED_ENV}: {e}"))),
            None => Ok(()),
        }
    }

    /// Every key as `key = value  # source`; reparsing the text reproduces the values.
    pub fn render(&self) -> String {
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, e) in &self.entries {
            s.push_str(&format!("{k:<width$} = {}  # {}\n", e.value, e.source));
        }
        s
    }

    fn parsed<T: FromStr>(&self, key: &str) -> T {
        self.get(key)
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("{key} was validated on set"))
    }

    fn optional_fraction(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            Some(NONE) | None => None,
            Some(v) => v.parse().ok(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            variant: self.parsed::<Variant>("variant"),
            image_size: self.parsed("image_size"),
            patch_size: self.parsed("patch_size"),
            embed_dim: self.parsed("embed_dim"),
            depth: self.parsed("depth"),
            spatial_heads: self.parsed("spatial_heads"),
            channel_heads: self.parsed("channel_heads"),
            mlp_ratio: self.parsed("mlp_ratio"),
            n_classes: self.parsed("n_classes"),
            in_channels: self.parsed("in_channels"),
            cls_projection: self.parsed::<ClsProjection>("cls_projection"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let early_stop = match (self.optional_fraction("stop_train_acc"), self.optional_fraction("stop_val_acc")) {
            (None, None) => None,
            (t, v) => Some(EarlyStop {
                train_acc: t.unwrap_or(0.0),
                val_acc: v.unwrap_or(0.0),
            }),
        };
        let tc = TrainConfig {
            learning_rate: self.parsed("learning_rate"),
            epochs: self.parsed("epochs"),
            batch_size: self.parsed("batch_size"),
            seed: self.parsed("seed"),
            precision: self.parsed::<Precision>("precision"),
            early_stop,
            checkpoint: None,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed")
    }

    pub fn val_fraction(&self) -> f64 {
        self.parsed("val_fraction")
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        match self.get("data") {
            Some(NONE) | None => None,
            Some(p) => Some(PathBuf::from(p)),
        }
    }

    pub fn data_kind(&self) -> SyntheticKind {
        self.parsed::<SyntheticKind>("data_kind")
    }

    pub fn data_count(&self) -> usize {
        self.parsed("data_count")
    }

    /// Values only, for comparing configurations regardless of provenance.
    pub fn values(&self) -> Vec<(&'static str, &str)> {
        self.entries.iter().map(|(k, e)| (*k, e.value.as_str())).collect()
    }
}
