//! Micro vision transformer emitting one token matrix per layer.
//!
//! Images are `C × H × W` in `[0, 1]`, standardized with mean 0.5 and std
//! 0.5 per channel, cut into `P × P` patches and embedded. A learned
//! `[CLS]` token is prepended and learned positional embeddings are added
//! before `ln_pre`. Every block output is passed through `ln_post` to form
//! the per-layer features `z^1 … z^L`; `ln_post` never feeds back into the
//! residual stream.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{block, check_block, init_block, linear, norm};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{check_shape, fan_in_matrix, insert_norm, normal_tensor, Bound, ParamStore};

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

/// Which backbone parameters receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Nothing in the backbone trains.
    All,
    /// Only `ln_pre` and `ln_post` train.
    AllButPrePostNorm,
    #[default]
    None,
}

impl FreezePolicy {
    pub fn is_trainable(self, name: &str) -> bool {
        match self {
            FreezePolicy::All => false,
            FreezePolicy::None => true,
            FreezePolicy::AllButPrePostNorm => {
                name.starts_with("backbone.ln_pre.") || name.starts_with("backbone.ln_post.")
            }
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FreezePolicy::All),
            "all-but-pre-post-norm" => Ok(FreezePolicy::AllButPrePostNorm),
            "none" => Ok(FreezePolicy::None),
            other => Err(Error::invalid(format!("unknown freeze policy {other:?}"))),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::All => "all",
            FreezePolicy::AllButPrePostNorm => "all-but-pre-post-norm",
            FreezePolicy::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub freeze: FreezePolicy,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 3,
            height: 32,
            width: 32,
            patch: 8,
            layers: 4,
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            freeze: FreezePolicy::None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patch == 0 || self.layers == 0 || self.dim == 0 {
            return Err(Error::invalid("backbone extents must be positive"));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.num_patches() == 0 {
            return Err(Error::invalid("image yields no patches"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp ratio must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.freeze.is_trainable(name)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let d = self.dim;
        let mut store = ParamStore::new();
        store.insert("backbone.patch.weight", fan_in_matrix(rng, self.patch_dim(), d));
        store.insert("backbone.patch.bias", Tensor::zeros(&[1, d]));
        store.insert("backbone.cls", normal_tensor(rng, &[1, d], 0.02));
        store.insert("backbone.pos", normal_tensor(rng, &[self.tokens(), d], 0.02));
        insert_norm(&mut store, "backbone.ln_pre", d);
        for l in 0..self.layers {
            init_block(&mut store, &block_prefix(l), d, self.mlp_ratio, rng);
        }
        insert_norm(&mut store, "backbone.ln_post", d);
        Ok(store)
    }

    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let d = self.dim;
        check_shape(store, "backbone.patch.weight", &[self.patch_dim(), d])?;
        check_shape(store, "backbone.patch.bias", &[1, d])?;
        check_shape(store, "backbone.cls", &[1, d])?;
        check_shape(store, "backbone.pos", &[self.tokens(), d])?;
        for n in ["ln_pre", "ln_post"] {
            check_shape(store, &format!("backbone.{n}.gain"), &[d])?;
            check_shape(store, &format!("backbone.{n}.bias"), &[d])?;
        }
        for l in 0..self.layers {
            check_block(store, &block_prefix(l), d, self.mlp_ratio)?;
        }
        Ok(())
    }
}

fn block_prefix(layer: usize) -> String {
    format!("backbone.blocks.{layer}")
}

/// Per-layer token matrices, each `(N+1) × D` with `[CLS]` at row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseFeatures {
    layers: Vec<Tensor>,
}

impl LayerwiseFeatures {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("layerwise features need at least one layer"))?;
        if first.shape().len() != 2 || first.rows() == 0 {
            return Err(Error::shape("layer features must be non-empty matrices"));
        }
        if layers.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::shape("layer features differ in shape"));
        }
        Ok(LayerwiseFeatures { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter()
    }
}

/// Cut a standardized image into `N × (C·P·P)` patch rows, row-major over
/// the patch grid.
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::shape(format!(
            "image shape {:?}, backbone expects {:?}",
            image.shape(),
            cfg.image_shape()
        )));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("image contains non-finite pixels".into()));
    }
    let (c, h, w, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    let px = image.values();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..h / p {
        for gx in 0..w / p {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + gy * p + y) * w + gx * p;
                    for &v in &px[row..row + p] {
                        out.push((v - PIXEL_MEAN) / PIXEL_STD);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![cfg.num_patches(), cfg.patch_dim()], out))
}

/// Stack patch matrices of a batch of images.
pub fn patchify_batch<'a, I>(images: I, cfg: &BackboneConfig) -> Result<(Tensor, usize)>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut values = Vec::new();
    let mut count = 0;
    for img in images {
        values.extend(patchify(img, cfg)?.into_values());
        count += 1;
    }
    Ok((
        Tensor::from_raw(vec![count * cfg.num_patches(), cfg.patch_dim()], values),
        count,
    ))
}

/// Residual-stream outputs of every block for a batch; each is
/// `(B·(N+1)) × D`.
pub(crate) fn residual_graph(
    tape: &mut Tape,
    p: &Bound,
    cfg: &BackboneConfig,
    patches: Var,
) -> Result<Vec<Var>> {
    let emb = linear(
        tape,
        patches,
        p.get("backbone.patch.weight")?,
        Some(p.get("backbone.patch.bias")?),
    )?;
    let with_cls = tape.prepend_rows(emb, p.get("backbone.cls")?, cfg.num_patches())?;
    let with_pos = tape.add_broadcast_rows(with_cls, p.get("backbone.pos")?)?;
    let mut x = norm(tape, p, "backbone.ln_pre", with_pos)?;
    let mut outputs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        x = block(tape, p, &block_prefix(l), x, cfg.heads, cfg.tokens())?.out;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Post-normed `[CLS]` rows of every layer for a batch of `batch` images,
/// one `B × D` matrix per layer.
pub(crate) fn cls_graph(
    tape: &mut Tape,
    p: &Bound,
    cfg: &BackboneConfig,
    patches: Var,
    batch: usize,
) -> Result<Vec<Var>> {
    let residuals = residual_graph(tape, p, cfg, patches)?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * cfg.tokens()).collect();
    residuals
        .into_iter()
        .map(|r| {
            let cls = tape.select_rows(r, &cls_rows)?;
            norm(tape, p, "backbone.ln_post", cls)
        })
        .collect()
}

/// Run the backbone on one image.
pub fn encode(image: &Tensor, cfg: &BackboneConfig, params: &ParamStore) -> Result<LayerwiseFeatures> {
    cfg.validate()?;
    cfg.check_params(params)?;
    let patches = patchify(image, cfg)?;
    let mut tape = Tape::new();
    let bound = params.subset("backbone.").bind(&mut tape, &|_| false);
    let pv = tape.constant(&patches);
    let residuals = residual_graph(&mut tape, &bound, cfg, pv)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for r in residuals {
        let z = norm(&mut tape, &bound, "backbone.ln_post", r)?;
        layers.push(tape.value(z).clone());
    }
    LayerwiseFeatures::new(layers)
}

/// Stack the `[CLS]` row of every layer into an `L × D` matrix.
pub fn extract_cls(z: &LayerwiseFeatures) -> Result<Tensor> {
    if z.is_empty() {
        return Err(Error::invalid("no layers to extract from"));
    }
    let d = z.layer(0).cols();
    let mut values = Vec::with_capacity(z.len() * d);
    for layer in z.iter() {
        values.extend_from_slice(layer.row(0));
    }
    Tensor::matrix(z.len(), d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn encode_shapes() {
        let cfg = BackboneConfig::default();
        let params = cfg.init_params(&mut rng()).unwrap();
        let img = Tensor::filled(&[3, 32, 32], 0.3);
        let z = encode(&img, &cfg, &params).unwrap();
        assert_eq!(z.len(), 4);
        for layer in z.iter() {
            assert_eq!(layer.shape(), &[17, 32]);
        }
    }

    #[test]
    fn zero_image_is_finite() {
        let cfg = BackboneConfig::default();
        let params = cfg.init_params(&mut rng()).unwrap();
        let z = encode(&Tensor::zeros(&[3, 32, 32]), &cfg, &params).unwrap();
        assert!(z.iter().all(Tensor::is_finite));
    }

    #[test]
    fn identical_images_identical_features() {
        let cfg = BackboneConfig::default();
        let params = cfg.init_params(&mut rng()).unwrap();
        let img = normal_tensor(&mut rng(), &[3, 32, 32], 0.2);
        let a = encode(&img, &cfg, &params).unwrap();
        let b = encode(&img.clone(), &cfg, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extent_mismatch_and_nan_pixels() {
        let cfg = BackboneConfig::default();
        let params = cfg.init_params(&mut rng()).unwrap();
        assert!(encode(&Tensor::zeros(&[3, 16, 32]), &cfg, &params).is_err());
        let mut img = Tensor::zeros(&[3, 32, 32]);
        img.values_mut()[5] = f64::NAN;
        assert!(matches!(
            encode(&img, &cfg, &params),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig::default();
        cfg.patch = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn extract_cls_selects_row_zero() {
        let d = 8;
        let mut layers = Vec::new();
        for l in 0..4 {
            let mut t = Tensor::filled(&[3, d], l as f64 + 10.0);
            if l == 1 {
                for j in 0..d {
                    t.values_mut()[j] = if j == 0 { 1.0 } else { 0.0 };
                }
            }
            layers.push(t);
        }
        let x = extract_cls(&LayerwiseFeatures::new(layers).unwrap()).unwrap();
        assert_eq!(x.shape(), &[4, 8]);
        assert_eq!(x.row(1)[0], 1.0);
        assert!(x.row(1)[1..].iter().all(|&v| v == 0.0));
        assert!(x.row(3).iter().all(|&v| v == 13.0));
    }

    #[test]
    fn extract_cls_single_layer() {
        let t = normal_tensor(&mut rng(), &[5, 4], 1.0);
        let x = extract_cls(&LayerwiseFeatures::new(vec![t.clone()]).unwrap()).unwrap();
        assert_eq!(x.shape(), &[1, 4]);
        assert_eq!(x.row(0), t.row(0));
    }

    #[test]
    fn empty_features_rejected() {
        assert!(LayerwiseFeatures::new(Vec::new()).is_err());
    }

    #[test]
    fn batched_cls_path_matches_encode() {
        let cfg = BackboneConfig::default();
        let params = cfg.init_params(&mut rng()).unwrap();
        let imgs: Vec<Tensor> = (0..3)
            .map(|i| normal_tensor(&mut ChaCha8Rng::seed_from_u64(i), &[3, 32, 32], 0.2))
            .collect();
        let (patches, b) = patchify_batch(&imgs, &cfg).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &|_| false);
        let pv = tape.constant(&patches);
        let cls = cls_graph(&mut tape, &bound, &cfg, pv, b).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let x = extract_cls(&encode(img, &cfg, &params).unwrap()).unwrap();
            for (l, &v) in cls.iter().enumerate() {
                assert_eq!(tape.value(v).row(i), x.row(l));
            }
        }
    }

    #[test]
    fn freeze_policy_names() {
        let p = FreezePolicy::AllButPrePostNorm;
        assert!(p.is_trainable("backbone.ln_pre.gain"));
        assert!(p.is_trainable("backbone.ln_post.bias"));
        assert!(!p.is_trainable("backbone.blocks.0.ln1.gain"));
        assert!(!p.is_trainable("backbone.patch.weight"));
        assert_eq!("all-but-pre-post-norm".parse::<FreezePolicy>().unwrap(), p);
    }
}
