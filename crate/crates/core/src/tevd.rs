//! Text-guided training objectives and language-free scoring.
//!
//! Scalar functions here take single triplets and are the reference for the
//! batched tape versions used by the trainer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{euclidean, l2_normalize, Tape, Tensor, Var, NORM_FLOOR};
use crate::params::{check_shape, fan_in_matrix, Bound, ParamStore};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const UNIT_TOL: f64 = 1e-6;

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite(format!("{name} has norm {n}")));
    }
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::invalid(format!("{name} has norm {n}, expected 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTriplet {
    v: Vec<f64>,
    tm: Vec<f64>,
    tn: Vec<f64>,
}

impl FeatureTriplet {
    pub fn new(v: Vec<f64>, tm: Vec<f64>, tn: Vec<f64>) -> Result<Self> {
        if v.len() != tm.len() || v.len() != tn.len() {
            return Err(Error::shape(format!(
                "triplet widths {} / {} / {}",
                v.len(),
                tm.len(),
                tn.len()
            )));
        }
        check_unit("visual feature", &v)?;
        check_unit("matching prompt", &tm)?;
        check_unit("non-matching prompt", &tn)?;
        Ok(FeatureTriplet { v, tm, tn })
    }

    /// Normalize the three vectors first.
    pub fn normalized(v: &[f64], tm: &[f64], tn: &[f64]) -> Result<Self> {
        Self::new(l2_normalize(v)?, l2_normalize(tm)?, l2_normalize(tn)?)
    }

    pub fn visual(&self) -> &[f64] {
        &self.v
    }

    pub fn matching(&self) -> &[f64] {
        &self.tm
    }

    pub fn non_matching(&self) -> &[f64] {
        &self.tn
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// `max(0, ‖V − Tᵐ‖ − ‖V − Tⁿ‖ + α)` with plain Euclidean distances.
pub fn triplet_loss(t: &FeatureTriplet, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("margin {alpha} must be non-negative")));
    }
    Ok(triplet_from_distances(
        euclidean(&t.v, &t.tm),
        euclidean(&t.v, &t.tn),
        alpha,
    ))
}

pub fn triplet_from_distances(d_match: f64, d_non: f64, alpha: f64) -> f64 {
    (d_match - d_non + alpha).max(0.0)
}

/// Affine map to two logits followed by softmax. Index 1 is the live class.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    /// `D × 2`, applied on the right.
    pub weight: Tensor,
    /// `1 × 2`.
    pub bias: Tensor,
}

pub const CLASSIFIER_WEIGHT: &str = "cls.weight";
pub const CLASSIFIER_BIAS: &str = "cls.bias";

impl Classifier {
    pub fn zeros(dim: usize) -> Self {
        Classifier {
            weight: Tensor::zeros(&[dim, 2]),
            bias: Tensor::zeros(&[1, 2]),
        }
    }

    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Classifier {
            weight: fan_in_matrix(rng, dim, 2),
            bias: Tensor::zeros(&[1, 2]),
        }
    }

    pub fn from_store(store: &ParamStore, dim: usize) -> Result<Self> {
        check_shape(store, CLASSIFIER_WEIGHT, &[dim, 2])?;
        check_shape(store, CLASSIFIER_BIAS, &[1, 2])?;
        Ok(Classifier {
            weight: store.get(CLASSIFIER_WEIGHT)?.clone(),
            bias: store.get(CLASSIFIER_BIAS)?.clone(),
        })
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(CLASSIFIER_WEIGHT, self.weight.clone());
        s.insert(CLASSIFIER_BIAS, self.bias.clone());
        s
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "classifier expects width {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        let mut out = [self.bias.values()[0], self.bias.values()[1]];
        for (i, xi) in x.iter().enumerate() {
            out[0] += xi * self.weight.at(i, 0);
            out[1] += xi * self.weight.at(i, 1);
        }
        Ok(out)
    }

    pub fn probs(&self, x: &[f64]) -> Result<[f64; 2]> {
        let z = self.logits(x)?;
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let s = e[0] + e[1];
        Ok([e[0] / s, e[1] / s])
    }

    /// `g(x)`: probability of the live class.
    pub fn prob_real(&self, x: &[f64]) -> Result<f64> {
        Ok(self.probs(x)?[1])
    }
}

fn cross_entropy(p_real: f64, y: u8) -> f64 {
    let p = p_real.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::invalid(format!("label {y} is not binary")));
    }
    Ok(())
}

/// Cross-entropy of `V` and `Tᵐ` against `y` plus `Tⁿ` against `¬y`.
pub fn multimodal_classifier_loss(g: &Classifier, t: &FeatureTriplet, y: u8) -> Result<f64> {
    check_label(y)?;
    Ok(cross_entropy(g.prob_real(&t.v)?, y)
        + cross_entropy(g.prob_real(&t.tm)?, y)
        + cross_entropy(g.prob_real(&t.tn)?, 1 - y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub tri: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
}

pub fn total_loss(cls: f64, tri: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be non-negative")));
    }
    if !(cls >= 0.0) || !(tri >= 0.0) {
        return Err(Error::invalid("loss terms must be non-negative"));
    }
    Ok(cls + lambda * tri)
}

/// Full objective for one triplet.
pub fn loss_breakdown(
    g: &Classifier,
    t: &FeatureTriplet,
    y: u8,
    lambda: f64,
    alpha: f64,
) -> Result<LossBreakdown> {
    let cls = multimodal_classifier_loss(g, t, y)?;
    let tri = triplet_loss(t, alpha)?;
    Ok(LossBreakdown {
        cls,
        tri,
        total: total_loss(cls, tri, lambda)?,
        lambda,
        alpha,
    })
}

/// Live-class probability of a raw fused feature. Text is not involved.
pub fn infer_score(g: &Classifier, vf: &[f64]) -> Result<f64> {
    if vf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused feature".into()));
    }
    g.prob_real(&l2_normalize(vf)?)
}

/// Symmetric InfoNCE over in-batch image/text pairs.
pub fn contrastive_loss_baseline(pairs: &[(Vec<f64>, Vec<f64>)], temperature: f64) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let n = pairs.len();
    let sim: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(v, _)| {
            pairs
                .iter()
                .map(|(_, t)| v.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / temperature)
                .collect()
        })
        .collect();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let xs: Vec<f64> = xs.collect();
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..n {
        total += lse(&mut sim[i].iter().copied()) - sim[i][i];
        total += lse(&mut (0..n).map(|j| sim[j][i])) - sim[i][i];
    }
    Ok(total / (2.0 * n as f64))
}

// Tape versions. Every input is a `B × D` matrix of unit rows.

/// Batch mean of the hinge.
pub(crate) fn triplet_graph(tape: &mut Tape, v: Var, tm: Var, tn: Var, alpha: f64) -> Result<Var> {
    let dm = tape.sub(v, tm)?;
    let dm = tape.row_norms(dm);
    let dn = tape.sub(v, tn)?;
    let dn = tape.row_norms(dn);
    let gap = tape.sub(dm, dn)?;
    let gap = tape.add_scalar(gap, alpha);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}

pub(crate) fn logits_graph(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let z = tape.matmul(x, p.get(CLASSIFIER_WEIGHT)?)?;
    tape.add_broadcast_rows(z, p.get(CLASSIFIER_BIAS)?)
}

/// Sum of clamped cross-entropies over the rows of `x`, divided by `per`.
pub(crate) fn cross_entropy_graph(
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    labels: &[u8],
    per: usize,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
    }
    let z = logits_graph(tape, p, x)?;
    let probs = tape.softmax_rows(z);
    let probs = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let logs = tape.log(probs);
    let mut onehot = vec![0.0; rows * 2];
    for (i, &y) in labels.iter().enumerate() {
        check_label(y)?;
        onehot[i * 2 + y as usize] = -1.0 / per.max(1) as f64;
    }
    let picked = tape.mul_const(logs, &Tensor::matrix(rows, 2, onehot)?)?;
    Ok(tape.sum(picked))
}

/// Batch mean of the three-term classifier loss.
pub(crate) fn multimodal_graph(
    tape: &mut Tape,
    p: &Bound,
    v: Var,
    tm: Var,
    tn: Var,
    labels: &[u8],
) -> Result<Var> {
    let all = tape.concat_rows(&[v, tm, tn])?;
    let mut l = labels.to_vec();
    l.extend_from_slice(labels);
    l.extend(labels.iter().map(|y| 1 - y));
    cross_entropy_graph(tape, p, all, &l, labels.len())
}

/// Symmetric InfoNCE with `v` trainable and `t` usually constant.
pub(crate) fn contrastive_graph(tape: &mut Tape, v: Var, t: Var, temperature: f64) -> Result<Var> {
    let n = tape.value(v).rows();
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    let tt = tape.transpose(t);
    let sim = tape.matmul(v, tt)?;
    let sim = tape.scale(sim, 1.0 / temperature);
    let sim_t = tape.transpose(sim);
    let eye = Tensor::eye(n);
    let eye = Tensor::from_raw(vec![n, n], eye.values().iter().map(|e| -e / (2.0 * n as f64)).collect());
    let mut total = None;
    for s in [sim, sim_t] {
        let probs = tape.softmax_rows(s);
        let probs = tape.clamp(probs, PROB_CLAMP, 1.0);
        let logs = tape.log(probs);
        let picked = tape.mul_const(logs, &eye)?;
        let part = tape.sum(picked);
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// Normalize rows of a raw feature node.
pub(crate) fn normalize_graph(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.l2_normalize_rows(x, NORM_FLOOR)
}
