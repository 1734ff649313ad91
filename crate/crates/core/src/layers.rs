//! Pre-norm transformer block shared by the backbone and the fusion module.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Tape, Var, LN_EPS};
use crate::params::{check_shape, fan_in_matrix, insert_norm, Bound, ParamStore};
use crate::numerics::Tensor;

pub(crate) fn init_block<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
    rng: &mut R,
) {
    let hidden = width * mlp_ratio;
    insert_norm(store, &format!("{prefix}.ln1"), width);
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.attn.{w}"), fan_in_matrix(rng, width, width));
    }
    insert_norm(store, &format!("{prefix}.ln2"), width);
    store.insert(format!("{prefix}.mlp.w1"), fan_in_matrix(rng, width, hidden));
    store.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[1, hidden]));
    store.insert(format!("{prefix}.mlp.w2"), fan_in_matrix(rng, hidden, width));
    store.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[1, width]));
}

pub(crate) fn check_block(
    store: &ParamStore,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
) -> Result<()> {
    let hidden = width * mlp_ratio;
    for n in ["ln1", "ln2"] {
        check_shape(store, &format!("{prefix}.{n}.gain"), &[width])?;
        check_shape(store, &format!("{prefix}.{n}.bias"), &[width])?;
    }
    for w in ["wq", "wk", "wv", "wo"] {
        check_shape(store, &format!("{prefix}.attn.{w}"), &[width, width])?;
    }
    check_shape(store, &format!("{prefix}.mlp.w1"), &[width, hidden])?;
    check_shape(store, &format!("{prefix}.mlp.b1"), &[1, hidden])?;
    check_shape(store, &format!("{prefix}.mlp.w2"), &[hidden, width])?;
    check_shape(store, &format!("{prefix}.mlp.b2"), &[1, width])?;
    Ok(())
}

pub(crate) fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gain"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_broadcast_rows(y, b),
        None => Ok(y),
    }
}

pub(crate) struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// `h = x + Attn(LN(x))·Wo;  out = h + MLP(LN(h))`, attention restricted to
/// consecutive blocks of `group` rows.
pub(crate) fn block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    group: usize,
) -> Result<BlockOutput> {
    let n1 = norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let q = tape.matmul(n1, p.get(&format!("{prefix}.attn.wq"))?)?;
    let k = tape.matmul(n1, p.get(&format!("{prefix}.attn.wk"))?)?;
    let v = tape.matmul(n1, p.get(&format!("{prefix}.attn.wv"))?)?;
    let attention = tape.attention(q, k, v, heads, group)?;
    let projected = tape.matmul(attention, p.get(&format!("{prefix}.attn.wo"))?)?;
    let hidden = tape.add(projected, x)?;
    let n2 = norm(tape, p, &format!("{prefix}.ln2"), hidden)?;
    let h1 = linear(
        tape,
        n2,
        p.get(&format!("{prefix}.mlp.w1"))?,
        Some(p.get(&format!("{prefix}.mlp.b1"))?),
    )?;
    let act = tape.gelu(h1);
    let h2 = linear(
        tape,
        act,
        p.get(&format!("{prefix}.mlp.w2"))?,
        Some(p.get(&format!("{prefix}.mlp.b2"))?),
    )?;
    let out = tape.add(h2, hidden)?;
    Ok(BlockOutput { out, attention })
}
