//! Finite-difference checks of every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::gradcheck::{finite_diff_gradcheck, GradReport, NamedParam};
use crate::numerics::ops::{LN_EPS, NORM_FLOOR};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: &'static [(usize, usize)],
    /// Inputs drawn from `|N(0,1)| + 0.5`.
    positive: bool,
    op: OpFn,
}

const CASES: &[Case] = &[
    Case { name: "matmul", inputs: &[(3, 4), (4, 2)], positive: false, op: |t, v| t.matmul(v[0], v[1]) },
    Case { name: "transpose", inputs: &[(3, 4)], positive: false, op: |t, v| Ok(t.transpose(v[0])) },
    Case { name: "add", inputs: &[(2, 3), (2, 3)], positive: false, op: |t, v| t.add(v[0], v[1]) },
    Case { name: "sub", inputs: &[(2, 3), (2, 3)], positive: false, op: |t, v| t.sub(v[0], v[1]) },
    Case { name: "mul", inputs: &[(2, 3), (2, 3)], positive: false, op: |t, v| t.mul(v[0], v[1]) },
    Case {
        name: "add_broadcast_rows",
        inputs: &[(3, 4), (1, 4)],
        positive: false,
        op: |t, v| t.add_broadcast_rows(v[0], v[1]),
    },
    Case { name: "scale", inputs: &[(2, 3)], positive: false, op: |t, v| Ok(t.scale(v[0], -1.7)) },
    Case { name: "add_scalar", inputs: &[(2, 3)], positive: false, op: |t, v| Ok(t.add_scalar(v[0], 0.3)) },
    Case {
        name: "mul_const",
        inputs: &[(2, 3)],
        positive: false,
        op: |t, v| {
            let c = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, -0.25, 0.75])?;
            t.mul_const(v[0], &c)
        },
    },
    Case {
        name: "layer_norm",
        inputs: &[(3, 5), (1, 5), (1, 5)],
        positive: false,
        op: |t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS),
    },
    Case { name: "gelu", inputs: &[(3, 4)], positive: false, op: |t, v| Ok(t.gelu(v[0])) },
    Case { name: "relu", inputs: &[(3, 4)], positive: false, op: |t, v| Ok(t.relu(v[0])) },
    Case { name: "clamp", inputs: &[(3, 4)], positive: false, op: |t, v| Ok(t.clamp(v[0], -0.5, 0.5)) },
    Case { name: "softmax_rows", inputs: &[(3, 4)], positive: false, op: |t, v| Ok(t.softmax_rows(v[0])) },
    Case { name: "log", inputs: &[(2, 3)], positive: true, op: |t, v| Ok(t.log(v[0])) },
    Case {
        name: "attention",
        inputs: &[(6, 4), (6, 4), (6, 4)],
        positive: false,
        op: |t, v| t.attention(v[0], v[1], v[2], 2, 3),
    },
    Case {
        name: "select_rows",
        inputs: &[(4, 3)],
        positive: false,
        op: |t, v| t.select_rows(v[0], &[3, 0, 0, 2]),
    },
    Case {
        name: "concat_rows",
        inputs: &[(2, 3), (1, 3)],
        positive: false,
        op: |t, v| t.concat_rows(&[v[0], v[1]]),
    },
    Case {
        name: "prepend_rows",
        inputs: &[(4, 3), (1, 3)],
        positive: false,
        op: |t, v| t.prepend_rows(v[0], v[1], 2),
    },
    Case {
        name: "l2_normalize_rows",
        inputs: &[(3, 4)],
        positive: false,
        op: |t, v| t.l2_normalize_rows(v[0], NORM_FLOOR),
    },
    Case { name: "row_norms", inputs: &[(3, 4)], positive: false, op: |t, v| Ok(t.row_norms(v[0])) },
    Case { name: "sum", inputs: &[(2, 3)], positive: false, op: |t, v| Ok(t.sum(v[0])) },
    Case { name: "mean", inputs: &[(2, 3)], positive: false, op: |t, v| Ok(t.mean(v[0])) },
];

/// Names of the ops covered by [`op_gradcheck_suite`].
pub fn suite_ops() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Check each op at random inputs through the probe loss
/// `sum(op(inputs) ⊙ W)` with a fixed random `W`.
pub fn op_gradcheck_suite(
    seed: u64,
    epsilon: f64,
    tolerance: f64,
) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(CASES.len());
    for case in CASES {
        let mut draw = |r: usize, c: usize| {
            let v = (0..r * c)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    if case.positive {
                        z.abs() + 0.5
                    } else {
                        z
                    }
                })
                .collect();
            Tensor::matrix(r, c, v)
        };
        let params = case
            .inputs
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| Ok(NamedParam::new(format!("{}.in{i}", case.name), draw(r, c)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut probe = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| probe.constant(&p.tensor)).collect();
        let y = (case.op)(&mut probe, &vars)?;
        let shape = probe.value(y).shape().to_vec();
        let weights = Tensor::new(&shape, (0..probe.value(y).numel()).map(|_| rng.sample(StandardNormal)).collect())?;
        let op = case.op;
        let report = finite_diff_gradcheck(
            |tape, v| {
                let y = op(tape, v)?;
                let w = tape.mul_const(y, &weights)?;
                Ok(tape.sum(w))
            },
            &params,
            epsilon,
            tolerance,
        )?;
        out.push((case.name, report));
    }
    Ok(out)
}
