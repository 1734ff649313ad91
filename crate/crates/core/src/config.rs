//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 10
//! variant = w/o-haf
//!
//! [protocol]
//! kind = few_shot
//! shots = 5
//! ```
//!
//! A key inside `[section]` is looked up as `section.key`; a dotted key
//! outside any section is taken as written. Later lines win, and
//! command-line overrides are applied after the whole file.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::protocol::{ProtocolConfig, ProtocolKind, ThresholdPolicy};
use crate::text::EncoderKind;
use crate::trainer::{TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSettings {
    pub kind: String,
    /// Empty means every available domain.
    pub targets: Vec<String>,
    pub sources: Option<Vec<String>>,
    /// Explicit seed list; otherwise `num_seeds` consecutive seeds starting
    /// at the master seed.
    pub seeds: Option<Vec<u64>>,
    pub num_seeds: usize,
    pub shots: usize,
    pub variants: Vec<Variant>,
    pub prompt_counts: Vec<usize>,
    pub threshold: ThresholdPolicy,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        ProtocolSettings {
            kind: "loo".into(),
            targets: Vec::new(),
            sources: None,
            seeds: None,
            num_seeds: 5,
            shots: 5,
            variants: Variant::ABLATIONS.to_vec(),
            prompt_counts: vec![1, 4, 16, 64],
            threshold: ThresholdPolicy::Eer,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Image directory `<root>/<domain>/<type>/*`; synthetic domains when
    /// unset.
    pub data_root: Option<PathBuf>,
    /// Per-type count of live samples in each synthetic domain is scaled by
    /// this factor.
    pub data_scale: f64,
    /// Added to every synthetic domain seed.
    pub data_seed: u64,
    pub library: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub table: Option<PathBuf>,
    pub protocol: ProtocolSettings,
    pub grad_epsilon: f64,
    pub grad_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_root: None,
            data_scale: 1.0,
            data_seed: 0,
            library: None,
            encoder: EncoderKind::Hash,
            table: None,
            protocol: ProtocolSettings::default(),
            grad_epsilon: 1e-5,
            grad_tolerance: 1e-4,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::invalid(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string(), path.parent())?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>", None)?;
        Ok(cfg)
    }

    /// Relative paths are resolved against `base` when given.
    pub fn apply_text(&mut self, text: &str, origin: &str, base: Option<&Path>) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let at = || format!("{origin}:{}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(at(), "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(at(), format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            let v = match (base, key.as_str()) {
                (Some(b), "data.root" | "text.library" | "text.table") if Path::new(v).is_relative() => {
                    b.join(v).display().to_string()
                }
                _ => v.to_string(),
            };
            self.set(&key, &v).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::parse(at(), m),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let p = &mut self.protocol;
        match key {
            "data.root" => self.data_root = Some(PathBuf::from(value)),
            "data.scale" => self.data_scale = number(key, value)?,
            "data.seed" => self.data_seed = number(key, value)?,
            "text.library" => self.library = Some(PathBuf::from(value)),
            "text.encoder" => self.encoder = value.parse()?,
            "text.table" => self.table = Some(PathBuf::from(value)),
            "protocol.kind" => p.kind = value.to_string(),
            "protocol.targets" => p.targets = list(key, value)?,
            "protocol.sources" => p.sources = Some(list(key, value)?),
            "protocol.seeds" => p.seeds = Some(list(key, value)?),
            "protocol.num_seeds" => p.num_seeds = number(key, value)?,
            "protocol.shots" => p.shots = number(key, value)?,
            "protocol.variants" => p.variants = list(key, value)?,
            "protocol.prompt_counts" => p.prompt_counts = list(key, value)?,
            "protocol.threshold" => p.threshold = value.parse()?,
            "gradcheck.epsilon" => self.grad_epsilon = number(key, value)?,
            "gradcheck.tolerance" => self.grad_tolerance = number(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.data_scale > 0.0) || !self.data_scale.is_finite() {
            return Err(Error::invalid("data.scale must be positive"));
        }
        if self.encoder == EncoderKind::Table && self.table.is_none() {
            return Err(Error::invalid("text.encoder = table needs text.table"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.protocol.seeds {
            Some(s) => s.clone(),
            None => (0..self.protocol.num_seeds as u64)
                .map(|i| self.train.seed.wrapping_add(i))
                .collect(),
        }
    }

    /// Protocol over `available` domains; an empty target list means all of
    /// them.
    pub fn protocol_config(&self, available: &[String]) -> Result<ProtocolConfig> {
        let p = &self.protocol;
        let kind = match p.kind.as_str() {
            "loo" => ProtocolKind::Loo,
            "limited_source" => ProtocolKind::LimitedSource,
            "few_shot" => ProtocolKind::FewShot(p.shots),
            "zero_shot" => ProtocolKind::ZeroShot,
            "ablation" => ProtocolKind::Ablation(p.variants.clone()),
            "prompt_sweep" => ProtocolKind::PromptSweep(p.prompt_counts.clone()),
            other => return Err(Error::invalid(format!("unknown protocol kind {other:?}"))),
        };
        let targets = if p.targets.is_empty() {
            available.to_vec()
        } else {
            p.targets.clone()
        };
        let cfg = ProtocolConfig {
            kind,
            targets,
            sources: p.sources.clone(),
            seeds: self.seeds(),
            policy: p.threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its effective value, in a form [`RunConfig::parse`]
    /// accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let p = &self.protocol;
        let join = |xs: Vec<String>| xs.join(",");
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        if let Some(r) = &self.data_root {
            kv("data.root", r.display().to_string());
        }
        kv("data.scale", self.data_scale.to_string());
        kv("data.seed", self.data_seed.to_string());
        if let Some(l) = &self.library {
            kv("text.library", l.display().to_string());
        }
        kv("text.encoder", self.encoder.to_string());
        if let Some(t) = &self.table {
            kv("text.table", t.display().to_string());
        }
        kv("protocol.kind", p.kind.clone());
        if !p.targets.is_empty() {
            kv("protocol.targets", p.targets.join(","));
        }
        if let Some(s) = &p.sources {
            kv("protocol.sources", s.join(","));
        }
        if let Some(s) = &p.seeds {
            kv("protocol.seeds", join(s.iter().map(u64::to_string).collect()));
        }
        kv("protocol.num_seeds", p.num_seeds.to_string());
        kv("protocol.shots", p.shots.to_string());
        kv("protocol.variants", join(p.variants.iter().map(Variant::to_string).collect()));
        kv(
            "protocol.prompt_counts",
            join(p.prompt_counts.iter().map(usize::to_string).collect()),
        );
        kv("protocol.threshold", p.threshold.to_string());
        kv("gradcheck.epsilon", self.grad_epsilon.to_string());
        kv("gradcheck.tolerance", self.grad_tolerance.to_string());
        out
    }
}
