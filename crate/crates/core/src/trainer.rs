//! Training loop, language-free evaluation and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{cls_graph, patchify_batch, BackboneConfig, FreezePolicy};
use crate::data::{balanced_batches, Sample};
use crate::error::{Error, Result};
use crate::haf::{fuse_graph, head_averaged, project_graph, HafConfig, HafParams};
use crate::numerics::{finite_diff_gradcheck, GradReport, NamedParam, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::protocol::{EvalRun, ThresholdPolicy};
use crate::tevd::{
    contrastive_graph, cross_entropy_graph, infer_score, multimodal_graph, normalize_graph,
    triplet_graph, Classifier, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_TEMPERATURE,
};
use crate::text::{sample_batch_pairs, ImageType, NonMatchingPolicy, PromptLibrary, TextEncoder};

/// Model and objective variants compared in the ablation protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    #[default]
    Full,
    /// Last-layer `[CLS]` through the output norm and projection only.
    NoHaf,
    /// `λ = 0`.
    NoTriplet,
    /// Plain cross-entropy on the visual feature; no prompt is encoded.
    NoText,
    /// Symmetric InfoNCE against matching prompts in place of the triplet.
    Contrastive,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::Full,
        Variant::NoHaf,
        Variant::NoTriplet,
        Variant::NoText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHaf => "w/o-haf",
            Variant::NoTriplet => "w/o-triplet",
            Variant::NoText => "w/o-text",
            Variant::Contrastive => "contrastive",
        }
    }

    pub fn uses_haf(self) -> bool {
        self != Variant::NoHaf
    }

    pub fn uses_text(self) -> bool {
        self != Variant::NoText
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Variant::Full,
            Variant::NoHaf,
            Variant::NoTriplet,
            Variant::NoText,
            Variant::Contrastive,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub out_dim: usize,
    pub haf_heads: usize,
    pub haf_mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            out_dim: 16,
            haf_heads: 4,
            haf_mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn haf(&self) -> HafConfig {
        HafConfig {
            dim: self.backbone.dim,
            out_dim: self.out_dim,
            heads: self.haf_heads,
            mlp_ratio: self.haf_mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.haf().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub variant: Variant,
    pub zero_shot: bool,
    pub non_matching: NonMatchingPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            variant: Variant::Full,
            zero_shot: false,
            non_matching: NonMatchingPolicy::OppositeLabel,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid("batch size must be even and positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::invalid("lambda and alpha must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }

    /// Keys accepted by [`TrainConfig::set`], with their current values.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let b = &self.model.backbone;
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("model.channels", b.channels.to_string()),
            kv("model.height", b.height.to_string()),
            kv("model.width", b.width.to_string()),
            kv("model.patch", b.patch.to_string()),
            kv("model.layers", b.layers.to_string()),
            kv("model.dim", b.dim.to_string()),
            kv("model.heads", b.heads.to_string()),
            kv("model.mlp_ratio", b.mlp_ratio.to_string()),
            kv("model.freeze", b.freeze.to_string()),
            kv("model.out_dim", self.model.out_dim.to_string()),
            kv("model.haf_heads", self.model.haf_heads.to_string()),
            kv("model.haf_mlp_ratio", self.model.haf_mlp_ratio.to_string()),
            kv("train.epochs", self.epochs.to_string()),
            kv("train.batch_size", self.batch_size.to_string()),
            kv("train.optimizer", self.optimizer.to_string()),
            kv("train.lr", self.lr.to_string()),
            kv("train.beta1", self.beta1.to_string()),
            kv("train.beta2", self.beta2.to_string()),
            kv("train.weight_decay", self.weight_decay.to_string()),
            kv("train.lambda", self.lambda.to_string()),
            kv("train.alpha", self.alpha.to_string()),
            kv("train.temperature", self.temperature.to_string()),
            kv("train.seed", self.seed.to_string()),
            kv("train.variant", self.variant.to_string()),
            kv("train.zero_shot", self.zero_shot.to_string()),
            kv("train.non_matching", self.non_matching.to_string()),
        ]
    }

    /// Returns `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let b = &mut self.model.backbone;
        match key {
            "model.channels" => b.channels = parse(key, value)?,
            "model.height" => b.height = parse(key, value)?,
            "model.width" => b.width = parse(key, value)?,
            "model.patch" => b.patch = parse(key, value)?,
            "model.layers" => b.layers = parse(key, value)?,
            "model.dim" => b.dim = parse(key, value)?,
            "model.heads" => b.heads = parse(key, value)?,
            "model.mlp_ratio" => b.mlp_ratio = parse(key, value)?,
            "model.freeze" => b.freeze = value.parse::<FreezePolicy>()?,
            "model.out_dim" => self.model.out_dim = parse(key, value)?,
            "model.haf_heads" => self.model.haf_heads = parse(key, value)?,
            "model.haf_mlp_ratio" => self.model.haf_mlp_ratio = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.optimizer" => self.optimizer = value.parse()?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.lambda" => self.lambda = parse(key, value)?,
            "train.alpha" => self.alpha = parse(key, value)?,
            "train.temperature" => self.temperature = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.variant" => self.variant = value.parse()?,
            "train.zero_shot" => self.zero_shot = parse(key, value)?,
            "train.non_matching" => self.non_matching = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Two-layer, width-8 model on 16×16 images, small enough for
    /// finite-difference checks.
    pub fn micro() -> Self {
        TrainConfig {
            model: ModelConfig {
                backbone: BackboneConfig {
                    height: 16,
                    width: 16,
                    patch: 8,
                    layers: 2,
                    dim: 8,
                    heads: 2,
                    mlp_ratio: 2,
                    ..BackboneConfig::default()
                },
                out_dim: 4,
                haf_heads: 2,
                haf_mlp_ratio: 2,
            },
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    /// `λ` actually applied: the no-triplet ablation forces it to zero.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::NoTriplet {
            0.0
        } else {
            self.lambda
        }
    }

    fn trainable(&self, name: &str) -> bool {
        !name.starts_with("backbone.") || self.model.backbone.is_trainable(name)
    }

    fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("checkpoint config", format!("bad line {line:?}")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::parse("checkpoint config", format!("unknown key {}", k.trim())));
            }
        }
        Ok(cfg)
    }
}

/// Initial parameters for every module, drawn in a fixed order.
pub fn init_params(cfg: &TrainConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = cfg.model.backbone.init_params(&mut rng)?;
    store.extend(HafParams::init(cfg.model.haf(), &mut rng)?.into_store());
    store.extend(Classifier::init(cfg.model.out_dim, &mut rng).to_store());
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_cls: f64,
    pub mean_tri: f64,
}

pub fn write_training_log<W: Write>(log: &[EpochLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,mean_loss,mean_cls,mean_tri")?;
    for e in log {
        writeln!(w, "{},{:.9},{:.9},{:.9}", e.epoch, e.mean_loss, e.mean_cls, e.mean_tri)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub final_loss: f64,
    pub params: ParamStore,
}

const MAGIC: &[u8; 8] = b"FASDGCK1";

impl Checkpoint {
    pub fn classifier(&self) -> Result<Classifier> {
        Classifier::from_store(&self.params, self.config.model.out_dim)
    }

    /// Little-endian container: magic, config text, epoch, final loss, then
    /// every parameter as name, shape and `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.final_loss.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::parse("checkpoint", "bad magic"));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::parse("checkpoint", "config is not UTF-8"))?;
        let config = TrainConfig::from_text(text)?;
        let epoch = r.u64()? as usize;
        let final_loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::parse("checkpoint", "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::parse("checkpoint", "size overflow"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(&shape, values)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::parse("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            epoch,
            final_loss,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse("checkpoint", "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    b1: f64,
    b2: f64,
    wd: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            b1: cfg.beta1,
            b2: cfg.beta2,
            wd: cfg.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?.values_mut();
            if self.wd > 0.0 {
                for x in p.iter_mut() {
                    *x -= self.lr * self.wd * *x;
                }
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in p.iter_mut().zip(g) {
                        *x -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - self.b1.powi(self.t);
                    let c2 = 1.0 - self.b2.powi(self.t);
                    for i in 0..g.len() {
                        m[i] = self.b1 * m[i] + (1.0 - self.b1) * g[i];
                        v[i] = self.b2 * v[i] + (1.0 - self.b2) * g[i] * g[i];
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Inputs of one training step. Text rows are unit embeddings of the
/// matching and non-matching prompt of every sample.
pub(crate) struct BatchInput {
    pub patches: Tensor,
    pub labels: Vec<u8>,
    pub text: Option<(Tensor, Tensor)>,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub tri: Option<Var>,
}

/// Raw `B × D_out` fused features.
pub(crate) fn visual_graph(
    tape: &mut Tape,
    p: &Bound,
    model: &ModelConfig,
    variant: Variant,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let layers = cls_graph(tape, p, &model.backbone, patches, batch)?;
    let l = layers.len();
    if !variant.uses_haf() {
        return project_graph(tape, p, layers[l - 1]);
    }
    let x_in = sample_major(tape, &layers, batch)?;
    Ok(fuse_graph(tape, p, x_in, l, model.haf_heads)?.0)
}

/// Stack per-layer `B × D` features into `(B·L) × D`, one block per sample.
fn sample_major(tape: &mut Tape, layers: &[Var], batch: usize) -> Result<Var> {
    let l = layers.len();
    let stacked = tape.concat_rows(layers)?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| (0..l).map(move |k| k * batch + b))
        .collect();
    tape.select_rows(stacked, &order)
}

pub(crate) fn loss_graph(
    tape: &mut Tape,
    p: &Bound,
    cfg: &TrainConfig,
    input: &BatchInput,
) -> Result<LossVars> {
    let batch = input.labels.len();
    if cfg.zero_shot {
        let (tm, tn) = input
            .text
            .as_ref()
            .ok_or_else(|| Error::invalid("zero-shot training needs prompts"))?;
        let a = tape.constant(tm);
        let b = tape.constant(tn);
        let both = tape.concat_rows(&[a, b])?;
        let mut labels = input.labels.clone();
        labels.extend(input.labels.iter().map(|y| 1 - y));
        let cls = cross_entropy_graph(tape, p, both, &labels, batch)?;
        return Ok(LossVars {
            total: cls,
            cls,
            tri: None,
        });
    }
    let pv = tape.constant(&input.patches);
    let raw = visual_graph(tape, p, &cfg.model, cfg.variant, pv, batch)?;
    let v = normalize_graph(tape, raw)?;
    if !cfg.variant.uses_text() {
        let cls = cross_entropy_graph(tape, p, v, &input.labels, batch)?;
        return Ok(LossVars {
            total: cls,
            cls,
            tri: None,
        });
    }
    let (tm, tn) = input
        .text
        .as_ref()
        .ok_or_else(|| Error::invalid("text variants need prompts"))?;
    let a = tape.constant(tm);
    let b = tape.constant(tn);
    let cls = multimodal_graph(tape, p, v, a, b, &input.labels)?;
    let aux = if cfg.variant == Variant::Contrastive {
        contrastive_graph(tape, v, a, cfg.temperature)?
    } else {
        triplet_graph(tape, v, a, b, cfg.alpha)?
    };
    let scaled = tape.scale(aux, cfg.effective_lambda());
    let total = tape.add(cls, scaled)?;
    Ok(LossVars {
        total,
        cls,
        tri: Some(aux),
    })
}

/// Frozen prompt embeddings, computed once per distinct prompt.
struct EmbeddingCache<'a> {
    encoder: &'a TextEncoder,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    fn get(&mut self, prompt: &str) -> Result<&[f64]> {
        if !self.cache.contains_key(prompt) {
            let v = self.encoder.encode(prompt)?;
            self.cache.insert(prompt.to_string(), v);
        }
        Ok(&self.cache[prompt])
    }

    fn rows(&mut self, prompts: impl Iterator<Item = String>, dim: usize) -> Result<Tensor> {
        let mut values = Vec::new();
        let mut n = 0;
        for p in prompts {
            let e = self.get(&p)?;
            if e.len() != dim {
                return Err(Error::shape(format!(
                    "text embeddings have width {}, model expects {dim}",
                    e.len()
                )));
            }
            values.extend_from_slice(e);
            n += 1;
        }
        Tensor::matrix(n, dim, values)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub diverged: Option<String>,
}

fn check_extents(cfg: &ModelConfig, data: &[Sample]) -> Result<()> {
    let want = cfg.backbone.image_shape();
    if let Some(s) = data.iter().find(|s| s.image.shape() != want) {
        return Err(Error::shape(format!(
            "sample {} has shape {:?}, model expects {:?}",
            s.id,
            s.image.shape(),
            want
        )));
    }
    Ok(())
}

/// Zero-shot epochs cycle over this many prompt pairs per type.
fn zero_shot_pool(lib: &PromptLibrary, batch: usize) -> Vec<Sample> {
    let n = ImageType::ALL
        .iter()
        .map(|&t| lib.active(t).len())
        .sum::<usize>()
        .max(batch);
    let img = Tensor::zeros(&[1, 1, 1]);
    (0..n)
        .map(|i| {
            let kind = ImageType::ALL[i % 3];
            Sample::new(img.clone(), kind, "", &format!("prompt-{i}")).expect("3-d image")
        })
        .collect()
}

pub fn train(
    cfg: &TrainConfig,
    data: &[Sample],
    lib: &PromptLibrary,
    encoder: &TextEncoder,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let uses_text = cfg.zero_shot || cfg.variant.uses_text();
    if uses_text && encoder.dim() != cfg.model.out_dim {
        return Err(Error::shape(format!(
            "encoder width {} differs from model width {}",
            encoder.dim(),
            cfg.model.out_dim
        )));
    }
    let pool;
    let data = if cfg.zero_shot {
        pool = zero_shot_pool(lib, cfg.batch_size);
        &pool[..]
    } else {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        check_extents(&cfg.model, data)?;
        data
    };
    let mut params = init_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Optimizer::new(cfg);
    let mut cache = EmbeddingCache {
        encoder,
        cache: HashMap::new(),
    };
    let dim = cfg.model.out_dim;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let batches = balanced_batches(data, cfg.batch_size, &mut rng)?;
        let (mut sum, mut sum_cls, mut sum_tri) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
            let text = if uses_text {
                let kinds: Vec<ImageType> = samples.iter().map(|s| s.kind).collect();
                let pairs = sample_batch_pairs(lib, &kinds, cfg.non_matching, &mut rng)?;
                let tm = cache.rows(pairs.iter().map(|p| p.matching.clone()), dim)?;
                let tn = cache.rows(pairs.iter().map(|p| p.non_matching.clone()), dim)?;
                Some((tm, tn))
            } else {
                None
            };
            let patches = if cfg.zero_shot {
                Tensor::zeros(&[0, 0])
            } else {
                patchify_batch(samples.iter().map(|s| &s.image), &cfg.model.backbone)?.0
            };
            let input = BatchInput {
                patches,
                labels,
                text,
            };
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, &|n| cfg.trainable(n));
            let loss = loss_graph(&mut tape, &bound, cfg, &input)?;
            let total = tape.scalar(loss.total);
            if !total.is_finite() {
                let message = format!("loss became {total}");
                log::error!("epoch {epoch}: {message}");
                return Ok(TrainOutcome {
                    checkpoint: Checkpoint {
                        config: cfg.clone(),
                        epoch: epoch - 1,
                        final_loss: last_loss,
                        params,
                    },
                    log,
                    diverged: Some(message),
                });
            }
            sum += total;
            sum_cls += tape.scalar(loss.cls);
            sum_tri += loss.tri.map_or(0.0, |t| tape.scalar(t));
            tape.backward(loss.total)?;
            let grads: Vec<(String, Vec<f64>)> = bound
                .iter()
                .filter_map(|(n, v)| tape.grad(v).map(|g| (n.to_string(), g.to_vec())))
                .collect();
            opt.step(&mut params, &grads)?;
        }
        let nb = batches.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_loss: sum / nb,
            mean_cls: sum_cls / nb,
            mean_tri: sum_tri / nb,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} cls {:.5} tri {:.5}",
            entry.mean_loss,
            entry.mean_cls,
            entry.mean_tri
        );
        last_loss = entry.mean_loss;
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            epoch: cfg.epochs,
            final_loss: last_loss,
            params,
        },
        log,
        diverged: None,
    })
}

const EVAL_BATCH: usize = 32;

/// Raw fused features of every sample, in order.
pub fn fused_features(ckpt: &Checkpoint, data: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    check_extents(&cfg.model, data)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let (patches, n) = patchify_batch(chunk.iter().map(|s| &s.image), &cfg.model.backbone)?;
        let mut tape = Tape::new();
        let bound = ckpt.params.bind(&mut tape, &|_| false);
        let pv = tape.constant(&patches);
        let raw = visual_graph(&mut tape, &bound, &cfg.model, cfg.variant, pv, n)?;
        let t = tape.value(raw);
        out.extend((0..n).map(|i| t.row(i).to_vec()));
    }
    Ok(out)
}

/// Head-averaged `L × L` fusion attention of every sample.
pub fn fusion_attention(ckpt: &Checkpoint, data: &[Sample]) -> Result<Vec<(String, Tensor)>> {
    let cfg = &ckpt.config;
    if !cfg.variant.uses_haf() {
        return Err(Error::invalid(format!(
            "variant {} has no fusion block",
            cfg.variant
        )));
    }
    check_extents(&cfg.model, data)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let (patches, n) = patchify_batch(chunk.iter().map(|s| &s.image), &cfg.model.backbone)?;
        let mut tape = Tape::new();
        let bound = ckpt.params.bind(&mut tape, &|_| false);
        let pv = tape.constant(&patches);
        let layers = cls_graph(&mut tape, &bound, &cfg.model.backbone, pv, n)?;
        let l = layers.len();
        let x_in = sample_major(&mut tape, &layers, n)?;
        let (_, attn) = fuse_graph(&mut tape, &bound, x_in, l, cfg.model.haf_heads)?;
        let probs = tape
            .attention_probs(attn)
            .ok_or_else(|| Error::invalid("fusion attention was not recorded"))?;
        for (b, s) in chunk.iter().enumerate() {
            out.push((s.id.clone(), head_averaged(probs, b, cfg.model.haf_heads, l)));
        }
    }
    Ok(out)
}

/// Score every sample through the visual path and the classifier only.
pub fn evaluate(ckpt: &Checkpoint, data: &[Sample]) -> Result<EvalRun> {
    let g = ckpt.classifier()?;
    let scores = fused_features(ckpt, data)?
        .iter()
        .map(|v| infer_score(&g, v))
        .collect::<Result<Vec<f64>>>()?;
    EvalRun::with_meta(
        scores,
        data.iter().map(|s| s.label).collect(),
        data.iter().map(|s| s.domain.clone()).collect(),
        data.iter().map(|s| s.id.clone()).collect(),
        format!("variant={}", ckpt.config.variant),
        ThresholdPolicy::Eer,
    )
}

/// `sample_id,domain,type,y,v1..vD` with unit-norm fused features.
pub fn dump_embeddings(ckpt: &Checkpoint, data: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let feats = fused_features(ckpt, data)?;
    let mut buf = String::from("sample_id,domain,type,y");
    for i in 1..=ckpt.config.model.out_dim {
        buf.push_str(&format!(",v{i}"));
    }
    buf.push('\n');
    for (s, f) in data.iter().zip(&feats) {
        let unit = crate::numerics::l2_normalize(f)?;
        buf.push_str(&format!("{},{},{},{}", s.id, s.domain, s.kind, s.label));
        for v in unit {
            buf.push_str(&format!(",{v:.9}"));
        }
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Central-difference check of the full objective on one balanced batch.
pub fn end_to_end_gradcheck(
    cfg: &TrainConfig,
    samples: &[Sample],
    lib: &PromptLibrary,
    encoder: &TextEncoder,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport> {
    cfg.validate()?;
    check_extents(&cfg.model, samples)?;
    let b = &cfg.model.backbone;
    if b.layers > 4 || b.dim > 16 {
        return Err(Error::invalid(
            "gradient checks run on micro configurations (L <= 4, D <= 16)",
        ));
    }
    let params = init_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let kinds: Vec<ImageType> = samples.iter().map(|s| s.kind).collect();
    let pairs = sample_batch_pairs(lib, &kinds, cfg.non_matching, &mut rng)?;
    let mut cache = EmbeddingCache {
        encoder,
        cache: HashMap::new(),
    };
    let dim = cfg.model.out_dim;
    let text = if cfg.variant.uses_text() {
        Some((
            cache.rows(pairs.iter().map(|p| p.matching.clone()), dim)?,
            cache.rows(pairs.iter().map(|p| p.non_matching.clone()), dim)?,
        ))
    } else {
        None
    };
    let input = BatchInput {
        patches: patchify_batch(samples.iter().map(|s| &s.image), b)?.0,
        labels: samples.iter().map(|s| s.label).collect(),
        text,
    };
    let named: Vec<NamedParam> = params
        .iter()
        .map(|(n, t)| NamedParam {
            name: n.to_string(),
            tensor: t.clone(),
            trainable: cfg.trainable(n),
        })
        .collect();
    let names: Vec<String> = named.iter().map(|p| p.name.clone()).collect();
    finite_diff_gradcheck(
        |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            Ok(loss_graph(tape, &bound, cfg, &input)?.total)
        },
        &named,
        epsilon,
        tolerance,
    )
}
