//! Seeded central-difference checks of every differentiable tape op.
//!
//! Each case builds a small graph from random inputs and reduces it to a
//! scalar through fixed random weights, so that sum-preserving ops (softmax,
//! pooling) still have informative gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport, Mlp, NnError, ParamSet, Tape, Tensor, Var};

type Graph = for<'p> fn(&mut Tape<'p>, &'p ParamSet, u64) -> Result<Var, NnError>;

struct Case {
    name: &'static str,
    shapes: &'static [(&'static str, usize, usize)],
    graph: Graph,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).expect("consistent shape")
}

fn project(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var, NnError> {
    let (r, c) = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(&mut rng, r, c));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum_all(prod))
}

const ATTENTION_MASK: [bool; 4] = [true, true, false, true];
const SOFTMAX_MASK: [bool; 5] = [true, false, true, true, false];

fn mlp() -> Mlp {
    Mlp::new("m", 4, &[6, 3, 1]).expect("valid widths")
}

const CASES: &[Case] = &[
    Case {
        name: "matmul",
        shapes: &[("a", 3, 4), ("b", 4, 2)],
        graph: |t, p, s| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let y = t.matmul(a, b)?;
            project(t, y, s)
        },
    },
    Case {
        name: "matmul_nt",
        shapes: &[("a", 3, 4), ("b", 5, 4)],
        graph: |t, p, s| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let y = t.matmul_nt(a, b)?;
            project(t, y, s)
        },
    },
    Case {
        name: "add_sub_mul",
        shapes: &[("a", 2, 3), ("b", 2, 3)],
        graph: |t, p, s| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let sum = t.add(a, b)?;
            let diff = t.sub(a, b)?;
            let y = t.mul(sum, diff)?;
            project(t, y, s)
        },
    },
    Case {
        name: "add_row_broadcast",
        shapes: &[("m", 4, 3), ("r", 1, 3)],
        graph: |t, p, s| {
            let (m, r) = (t.param(p, "m")?, t.param(p, "r")?);
            let shifted = t.add_row(m, r)?;
            let tiled = t.broadcast_rows(r, 4)?;
            let y = t.mul(shifted, tiled)?;
            project(t, y, s)
        },
    },
    Case {
        name: "affine",
        shapes: &[("x", 3, 5), ("w", 5, 4), ("b", 1, 4)],
        graph: |t, p, s| {
            let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
            let y = t.affine(x, w, b)?;
            project(t, y, s)
        },
    },
    Case {
        name: "relu",
        shapes: &[("x", 4, 4)],
        graph: |t, p, s| {
            let x = t.param(p, "x")?;
            let y = t.relu(x);
            project(t, y, s)
        },
    },
    Case {
        name: "scale_transpose",
        shapes: &[("x", 2, 5)],
        graph: |t, p, s| {
            let x = t.param(p, "x")?;
            let y = t.scale(x, -1.7);
            let y = t.transpose(y);
            project(t, y, s)
        },
    },
    Case {
        name: "softmax_rows",
        shapes: &[("x", 3, 4)],
        graph: |t, p, s| {
            let x = t.param(p, "x")?;
            let x = t.scale(x, 2.0);
            let y = t.softmax_rows(x);
            project(t, y, s)
        },
    },
    Case {
        name: "softmax_rows_masked",
        shapes: &[("x", 3, 5)],
        graph: |t, p, s| {
            let x = t.param(p, "x")?;
            let y = t.softmax_rows_masked(x, &SOFTMAX_MASK)?;
            project(t, y, s)
        },
    },
    Case {
        name: "scaled_dot_product_attention",
        shapes: &[("q", 2, 6), ("k", 4, 6), ("v", 4, 3)],
        graph: |t, p, s| {
            let (q, k, v) = (t.param(p, "q")?, t.param(p, "k")?, t.param(p, "v")?);
            let logits = t.matmul_nt(q, k)?;
            let logits = t.scale(logits, 1.0 / 6f64.sqrt());
            let weights = t.softmax_rows_masked(logits, &ATTENTION_MASK)?;
            let y = t.matmul(weights, v)?;
            project(t, y, s)
        },
    },
    Case {
        name: "unfold_rows_conv",
        shapes: &[("e", 4, 3), ("k", 6, 5), ("b", 1, 5)],
        graph: |t, p, s| {
            let (e, k, b) = (t.param(p, "e")?, t.param(p, "k")?, t.param(p, "b")?);
            let windows = t.unfold_rows(e, 2)?;
            let y = t.affine(windows, k, b)?;
            project(t, y, s)
        },
    },
    Case {
        name: "avg_pool_rows",
        shapes: &[("x", 5, 3)],
        graph: |t, p, s| {
            let x = t.param(p, "x")?;
            let y = t.avg_pool_rows(x);
            project(t, y, s)
        },
    },
    Case {
        name: "concat_slice",
        shapes: &[("a", 2, 3), ("b", 2, 2), ("c", 1, 5)],
        graph: |t, p, s| {
            let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
            let wide = t.concat_cols(&[a, b])?;
            let tall = t.concat_rows(&[wide, c])?;
            let mid = t.slice_cols(tall, 1, 3)?;
            project(t, mid, s)
        },
    },
    Case {
        name: "select_rows",
        shapes: &[("table", 5, 3)],
        graph: |t, p, s| {
            let table = t.param(p, "table")?;
            let y = t.select_rows(table, &[4, 0, 4, 2])?;
            project(t, y, s)
        },
    },
    Case {
        name: "shared_parameter",
        shapes: &[("w", 3, 3)],
        graph: |t, p, s| {
            let w = t.param(p, "w")?;
            let again = t.param(p, "w")?;
            let sq = t.matmul(w, again)?;
            let y = t.add(sq, w)?;
            project(t, y, s)
        },
    },
    Case {
        name: "mlp",
        shapes: &[("x", 2, 4)],
        graph: |t, p, s| {
            let x = t.param(p, "x")?;
            let y = mlp().forward(t, p, x)?;
            project(t, y, s)
        },
    },
];

/// Names of the checked primitives, in check order.
pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Checks primitive `name` on inputs drawn from `seed`.
pub fn check_primitive(name: &str, seed: u64, eps: f64) -> Result<GradCheckReport, NnError> {
    let case = CASES
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| NnError::Config(format!("unknown primitive `{name}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for &(n, r, c) in case.shapes {
        params.insert(n, random(&mut rng, r, c))?;
    }
    if case.name == "mlp" {
        // Zero biases can park a pre-activation exactly on the ReLU kink.
        let net = mlp();
        net.init(&mut params, &mut rng)?;
        for layer in 0..net.layers() {
            let b = params.value_mut(&net.bias_name(layer))?;
            for v in b.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    grad_check(|t, p| (case.graph)(t, p, seed), &params, eps)
}

/// Worst report of every primitive over seeds `0..seeds`.
pub fn primitive_suite(seeds: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>, NnError> {
    CASES
        .iter()
        .map(|case| {
            let mut worst: Option<GradCheckReport> = None;
            for seed in 0..seeds {
                let r = check_primitive(case.name, seed, eps)?;
                if worst.as_ref().map_or(true, |w| r.max_relative_error > w.max_relative_error) {
                    worst = Some(r);
                }
            }
            worst
                .map(|w| (case.name, w))
                .ok_or_else(|| NnError::Config("primitive suite needs at least one seed".into()))
        })
        .collect()
}
