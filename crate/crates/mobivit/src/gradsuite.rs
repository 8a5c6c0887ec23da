//! The named gradient checks run by `mobivit gradcheck`.

use mobivit_core::gradcheck::{gradcheck_many, model_gradcheck, Reduction};
use mobivit_core::merge::merge_with_logits;
use mobivit_core::{Graph, ModelConfig, Result as CoreResult, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A check passes when its worst relative error is below this.
pub const THRESHOLD: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [1, 2, 3];

/// Backward scale error used by `--inject-fault`.
pub const FAULT: f64 = 1e-3;

type OpFn = fn(&mut Graph<'static>, &[Var]) -> CoreResult<Var>;

struct OpCheck {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    step: f64,
    red: Reduction,
    positive: bool,
    f: OpFn,
}

const SUM: Reduction = Reduction::Sum;
const PROJ: Reduction = Reduction::Projected { seed: 99 };

const OPS: &[OpCheck] = &[
    OpCheck { name: "add", shapes: &[&[2, 3, 4], &[4]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.add(v[0], v[1]) },
    OpCheck { name: "mul", shapes: &[&[2, 3, 4], &[3, 4]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.mul(v[0], v[1]) },
    OpCheck { name: "matmul", shapes: &[&[3, 4], &[4, 5]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.matmul(v[0], v[1]) },
    OpCheck { name: "bmm", shapes: &[&[2, 3, 4], &[2, 4, 2]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.bmm(v[0], v[1]) },
    OpCheck { name: "linear", shapes: &[&[2, 3, 4], &[5, 4], &[5]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.linear(v[0], v[1], Some(v[2])) },
    OpCheck {
        name: "conv2d",
        shapes: &[&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 2), (1, 1), 1),
    },
    OpCheck {
        name: "depthwise_conv2d",
        shapes: &[&[1, 3, 7, 7], &[3, 1, 3, 3], &[3]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1), 3),
    },
    OpCheck {
        name: "pointwise_conv2d",
        shapes: &[&[2, 4, 3, 3], &[5, 4, 1, 1], &[5]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (0, 0), 1),
    },
    OpCheck { name: "softmax", shapes: &[&[3, 5]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.softmax(v[0], 1) },
    OpCheck {
        name: "layernorm",
        shapes: &[&[3, 6], &[6], &[6]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| g.layernorm(v[0], v[1], v[2], 1e-6),
    },
    OpCheck { name: "gelu", shapes: &[&[4, 5]], step: 1e-5, red: PROJ, positive: false, f: |g, v| Ok(g.gelu(v[0])) },
    OpCheck { name: "relu", shapes: &[&[4, 5]], step: 1e-6, red: PROJ, positive: false, f: |g, v| Ok(g.relu(v[0])) },
    OpCheck { name: "sigmoid", shapes: &[&[4, 5]], step: 1e-5, red: PROJ, positive: false, f: |g, v| Ok(g.sigmoid(v[0])) },
    OpCheck { name: "recip", shapes: &[&[4, 5]], step: 1e-6, red: PROJ, positive: true, f: |g, v| Ok(g.recip(v[0])) },
    OpCheck {
        name: "adaptive_avg_pool2d",
        shapes: &[&[1, 2, 7, 7]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| g.adaptive_avg_pool2d(v[0], 3, 3),
    },
    OpCheck { name: "global_avg_pool2d", shapes: &[&[2, 3, 4, 4]], step: 1e-5, red: PROJ, positive: false, f: |g, v| g.global_avg_pool2d(v[0]) },
    OpCheck {
        name: "shape_ops",
        shapes: &[&[2, 3, 4], &[2, 1, 4]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let n = g.narrow(p, 0, 1, 2)?;
            g.reshape(n, &[4, 4])
        },
    },
    OpCheck {
        name: "cross_entropy",
        shapes: &[&[3, 4]],
        step: 1e-5,
        red: SUM,
        positive: false,
        f: |g, v| {
            let t = Tensor::new(&[3, 4], vec![0.7, 0.1, 0.1, 0.1, 0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25])?;
            g.soft_cross_entropy(v[0], &t)
        },
    },
    OpCheck {
        name: "apm_merge",
        shapes: &[&[2, 5, 3], &[2, 5], &[5]],
        step: 1e-5,
        red: PROJ,
        positive: false,
        f: |g, v| merge_with_logits(g, v[0], v[1], v[2]).map(|(feature, _)| feature),
    },
];

/// Name of the full-model check.
pub const MODEL: &str = "model";

pub fn names() -> Vec<&'static str> {
    OPS.iter().map(|o| o.name).chain([MODEL]).collect()
}

fn randn(shape: &[usize], seed: u64, positive: bool) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if positive {
            0.5 + z.abs()
        } else {
            z
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

fn run_op(op: &OpCheck, fault: f64) -> CoreResult<f64> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let inputs: Vec<Tensor> = op
            .shapes
            .iter()
            .enumerate()
            .map(|(k, s)| randn(s, seed * 100 + k as u64, op.positive))
            .collect();
        let r = gradcheck_many(
            |g, v| {
                g.inject_backward_fault(fault);
                (op.f)(g, v)
            },
            &inputs,
            op.step,
            op.red,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

/// Runs the named checks (all when `only` is empty) against `model_cfg`.
pub fn run(only: &[String], model_cfg: &ModelConfig, inject_fault: bool) -> CoreResult<Vec<CheckResult>> {
    let fault = if inject_fault { FAULT } else { 0.0 };
    let want = |n: &str| only.is_empty() || only.iter().any(|o| o == n);
    let mut out = Vec::new();
    for op in OPS.iter().filter(|o| want(o.name)) {
        out.push(CheckResult {
            name: op.name,
            max_rel_error: run_op(op, fault)?,
        });
    }
    if want(MODEL) {
        let mut worst = 0.0f64;
        for seed in SEEDS {
            worst = worst.max(model_gradcheck(model_cfg, seed, fault)?.0);
        }
        out.push(CheckResult {
            name: MODEL,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
