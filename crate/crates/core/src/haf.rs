//! Hierarchical attention fusion of per-layer `[CLS]` tokens.
//!
//! The `L × D` stack of `[CLS]` tokens goes through one pre-norm
//! attention/MLP block with residuals. The row of the deepest layer is normalized and
//! projected to the text width by `M: R^D → R^{D_out}` (stored `D × D_out`
//! and applied on the right). No positional encoding is added over layer
//! rows, so the result is invariant to reordering rows `1 … L−1`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{block, check_block, init_block, norm};
use crate::numerics::{finite_diff_gradcheck, GradReport, NamedParam, Tape, Tensor, Var};
use crate::params::{check_shape, fan_in_matrix, insert_norm, normal_tensor, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HafConfig {
    pub dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for HafConfig {
    fn default() -> Self {
        HafConfig {
            dim: 32,
            out_dim: 16,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl HafConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.out_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("fusion widths must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Fusion weights, stored under the `haf.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct HafParams {
    config: HafConfig,
    store: ParamStore,
}

impl HafParams {
    pub fn init<R: Rng>(config: HafConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        init_block(&mut store, "haf", config.dim, config.mlp_ratio, rng);
        insert_norm(&mut store, "haf.ln_out", config.dim);
        store.insert("haf.proj", fan_in_matrix(rng, config.dim, config.out_dim));
        Ok(HafParams { config, store })
    }

    /// Zero attention, zero MLP, identity norms and `M` keeping the first
    /// `D_out` coordinates. Only the residual path survives.
    pub fn residual_only(config: HafConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let (d, o) = (p.config.dim, p.config.out_dim);
        for (name, t) in p.store.iter_mut() {
            if name.contains(".attn.") || name.contains(".mlp.") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut proj = Tensor::zeros(&[d, o]);
        for i in 0..d.min(o) {
            proj.values_mut()[i * o + i] = 1.0;
        }
        p.store.insert("haf.proj", proj);
        Ok(p)
    }

    pub fn from_store(config: HafConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let store = store.subset("haf.");
        let p = HafParams { config, store };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let c = &self.config;
        check_block(&self.store, "haf", c.dim, c.mlp_ratio)?;
        check_shape(&self.store, "haf.ln_out.gain", &[c.dim])?;
        check_shape(&self.store, "haf.ln_out.bias", &[c.dim])?;
        check_shape(&self.store, "haf.proj", &[c.dim, c.out_dim])
    }

    pub fn config(&self) -> &HafConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// Replace one tensor; the shape must stay the same.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let cur = self.store.get(name)?;
        if cur.shape() != t.shape() {
            return Err(Error::shape(format!(
                "{name}: {:?} cannot replace {:?}",
                t.shape(),
                cur.shape()
            )));
        }
        self.store.insert(name, t);
        Ok(())
    }
}

/// Output of the fusion module for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub vf: Vec<f64>,
    /// Head-averaged attention weights, `L × L`.
    pub attention: Option<Tensor>,
}

/// Fuse a batch of `B` stacks laid out sample-major as `(B·L) × D`.
/// Returns the `B × D_out` features and the attention node.
pub(crate) fn fuse_graph(
    tape: &mut Tape,
    p: &Bound,
    x_in: Var,
    layers: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let rows = tape.value(x_in).rows();
    if layers == 0 || !rows.is_multiple_of(layers) {
        return Err(Error::shape(format!(
            "{rows} rows do not split into stacks of {layers}"
        )));
    }
    let out = block(tape, p, "haf", x_in, heads, layers)?;
    let last: Vec<usize> = (0..rows / layers).map(|b| b * layers + layers - 1).collect();
    let deepest = tape.select_rows(out.out, &last)?;
    let vf = project_graph(tape, p, deepest)?;
    Ok((vf, out.attention))
}

/// `LN(x)·M` on `B × D` rows. On its own this is the last-layer baseline
/// used when fusion is ablated.
pub(crate) fn project_graph(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let normed = norm(tape, p, "haf.ln_out", x)?;
    tape.matmul(normed, p.get("haf.proj")?)
}

/// Average the `[group][head][q][k]` weights over heads for block `b`.
pub(crate) fn head_averaged(probs: &[f64], b: usize, heads: usize, layers: usize) -> Tensor {
    let mut out = vec![0.0; layers * layers];
    for h in 0..heads {
        let base = (b * heads + h) * layers * layers;
        for (o, p) in out.iter_mut().zip(&probs[base..base + layers * layers]) {
            *o += p / heads as f64;
        }
    }
    Tensor::from_raw(vec![layers, layers], out)
}

pub fn haf_forward(x_in: &Tensor, params: &HafParams) -> Result<FusedFeature> {
    let c = params.config();
    if x_in.shape().len() != 2 || x_in.rows() == 0 {
        return Err(Error::shape("fusion input must be a non-empty L × D matrix"));
    }
    if x_in.cols() != c.dim {
        return Err(Error::shape(format!(
            "fusion input width {} but parameters expect {}",
            x_in.cols(),
            c.dim
        )));
    }
    let layers = x_in.rows();
    let mut tape = Tape::new();
    let bound = params.store().bind(&mut tape, &|_| false);
    let x = tape.constant(x_in);
    let (vf, attn) = fuse_graph(&mut tape, &bound, x, layers, c.heads)?;
    let probs = tape.attention_probs(attn).expect("attention node");
    Ok(FusedFeature {
        vf: tape.value(vf).values().to_vec(),
        attention: Some(head_averaged(probs, 0, c.heads, layers)),
    })
}

#[derive(Clone, Debug)]
pub struct HafGradcheckConfig {
    pub haf: HafConfig,
    pub layers: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Parameter names treated as non-trainable.
    pub frozen: Vec<String>,
}

impl Default for HafGradcheckConfig {
    fn default() -> Self {
        HafGradcheckConfig {
            haf: HafConfig {
                dim: 4,
                out_dim: 3,
                heads: 2,
                mlp_ratio: 4,
            },
            layers: 2,
            seed: 0,
            epsilon: 1e-6,
            tolerance: 1e-4,
            frozen: Vec::new(),
        }
    }
}

/// Finite-difference check of every fusion parameter against `‖V^f‖²`.
pub fn haf_gradcheck(cfg: &HafGradcheckConfig) -> Result<GradReport> {
    if cfg.layers == 0 || cfg.layers > 4 || cfg.haf.dim > 16 {
        return Err(Error::invalid(
            "gradient checks run on micro configurations (L <= 4, D <= 16)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = HafParams::init(cfg.haf, &mut rng)?;
    let x_in = normal_tensor(&mut rng, &[cfg.layers, cfg.haf.dim], 1.0);
    let named: Vec<NamedParam> = params
        .store()
        .iter()
        .map(|(n, t)| NamedParam {
            name: n.to_string(),
            tensor: t.clone(),
            trainable: !cfg.frozen.iter().any(|f| f == n),
        })
        .collect();
    let names: Vec<String> = named.iter().map(|p| p.name.clone()).collect();
    let layers = cfg.layers;
    let heads = cfg.haf.heads;
    finite_diff_gradcheck(
        |tape, vars| {
            let mut store_vars = Vec::with_capacity(vars.len());
            for (n, v) in names.iter().zip(vars) {
                store_vars.push((n.clone(), *v));
            }
            let bound = Bound::from_pairs(store_vars);
            let x = tape.constant(&x_in);
            let (vf, _) = fuse_graph(tape, &bound, x, layers, heads)?;
            let sq = tape.mul(vf, vf)?;
            Ok(tape.sum(sq))
        },
        &named,
        cfg.epsilon,
        cfg.tolerance,
    )
}

/// Write `sample_id,query_row,key_row,weight` rows.
pub fn write_attention_csv<W: Write>(
    mut w: W,
    rows: &[(String, Tensor)],
) -> std::io::Result<()> {
    writeln!(w, "sample_id,query_row,key_row,weight")?;
    for (id, attn) in rows {
        let l = attn.rows();
        for q in 0..l {
            for k in 0..attn.cols() {
                writeln!(w, "{},{},{},{:.9}", id, q, k, attn.at(q, k))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layer_norm;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small() -> HafConfig {
        HafConfig {
            dim: 8,
            out_dim: 6,
            heads: 2,
            mlp_ratio: 4,
        }
    }

    #[test]
    fn output_width() {
        let p = HafParams::init(small(), &mut rng(1)).unwrap();
        let x = normal_tensor(&mut rng(2), &[4, 8], 1.0);
        let f = haf_forward(&x, &p).unwrap();
        assert_eq!(f.vf.len(), 6);
        let a = f.attention.unwrap();
        assert_eq!(a.shape(), &[4, 4]);
        for q in 0..4 {
            let s: f64 = a.row(q).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_only_reduces_to_projected_last_row() {
        let p = HafParams::residual_only(small()).unwrap();
        let x = normal_tensor(&mut rng(3), &[4, 8], 1.0);
        let f = haf_forward(&x, &p).unwrap();
        let last = Tensor::vector(x.row(3).to_vec()).unwrap();
        let ln = layer_norm(&last, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8])).unwrap();
        for (a, b) in f.vf.iter().zip(&ln.values()[..6]) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn residual_only_is_scale_invariant() {
        let p = HafParams::residual_only(small()).unwrap();
        let x = normal_tensor(&mut rng(4), &[4, 8], 1.0);
        let scaled = Tensor::matrix(4, 8, x.values().iter().map(|v| v * 3.5).collect()).unwrap();
        let a = haf_forward(&x, &p).unwrap().vf;
        let b = haf_forward(&scaled, &p).unwrap().vf;
        for (u, v) in a.iter().zip(&b) {
            // LN epsilon makes this approximate
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn permuting_earlier_rows_keeps_output() {
        let p = HafParams::init(small(), &mut rng(5)).unwrap();
        let x = normal_tensor(&mut rng(6), &[4, 8], 1.0);
        let perm = [2usize, 0, 1, 3];
        let mut pv = Vec::new();
        for &r in &perm {
            pv.extend_from_slice(x.row(r));
        }
        let xp = Tensor::matrix(4, 8, pv).unwrap();
        let a = haf_forward(&x, &p).unwrap().vf;
        let b = haf_forward(&xp, &p).unwrap().vf;
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn width_mismatch() {
        let p = HafParams::init(small(), &mut rng(1)).unwrap();
        let x = Tensor::zeros(&[4, 5]);
        assert!(matches!(haf_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gradcheck_micro_passes() {
        let report = haf_gradcheck(&HafGradcheckConfig::default()).unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn gradcheck_skips_frozen() {
        let cfg = HafGradcheckConfig {
            frozen: vec!["haf.proj".into(), "haf.attn.wq".into()],
            ..Default::default()
        };
        let report = haf_gradcheck(&cfg).unwrap();
        assert!(report.entry("haf.proj").is_none());
        assert!(report.entry("haf.attn.wq").is_none());
        assert!(report.entry("haf.attn.wk").is_some());
    }

    #[test]
    fn gradcheck_rejects_large_epsilon() {
        let cfg = HafGradcheckConfig {
            epsilon: 1e-2,
            ..Default::default()
        };
        assert!(matches!(
            haf_gradcheck(&cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn attention_csv_layout() {
        let mut buf = Vec::new();
        write_attention_csv(&mut buf, &[("s0".into(), Tensor::eye(2))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,query_row,key_row,weight");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "s0,0,0,1.000000000");
    }
}
