//! Gradient verification: one check per graph op, plus the three
//! end-to-end checks run by `camforge gradcheck`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::Result;
use crate::fusion;
use crate::gradcheck::{finite_diff_check_many, DEFAULT_EPS};
use crate::model::{self, ModelConfig, ModelState, Params};
use crate::objective::{total_loss, LossOptions};
use crate::tensor::Tensor;

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Identity whose backward rule is deliberately wrong (scales the gradient
/// by 1.5). Used as a negative control.
struct BrokenIdentity;

impl CustomOp for BrokenIdentity {
    fn name(&self) -> &'static str {
        "broken_identity"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![upstream.scale(1.5)])
    }
}

fn logits(g: &mut Graph, z: Var, corrupt: bool) -> Result<Var> {
    if corrupt {
        g.custom(Arc::new(BrokenIdentity), &[z])
    } else {
        Ok(z)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Soft-margin loss alone, on random logits.
pub fn soft_margin_check(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform(&mut rng, &[5], 4.0);
    let y = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
    let err = finite_diff_check_many(
        |g, v| {
            let z = logits(g, v[0], corrupt)?;
            g.soft_margin(z, &y)
        },
        &[z],
        DEFAULT_EPS,
    )?;
    Ok(CheckResult {
        name: "soft_margin",
        max_rel_error: err,
    })
}

/// Fusion → refinement → noise injection → pooled soft-margin loss, with
/// gradients w.r.t. attention logits and the CAM.
pub fn fused_branch_check(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let (b, h, n, k, grid) = (2, 2, 4, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn_logits = uniform(&mut rng, &[b * h * (n + 1), n + 1], 2.0);
    let cam = uniform(&mut rng, &[k, grid, grid], 1.0);
    let y = Tensor::from_vec(vec![1.0, 0.0]);
    let err = finite_diff_check_many(
        |g, v| {
            let rows = g.softmax_rows(v[0])?;
            let stack = g.reshape(rows, &[b, h, n + 1, n + 1])?;
            let fused = fusion::graph::fuse(g, stack)?;
            let refined = fusion::graph::refine_cam(g, fused.sum_star, v[1])?;
            let noisy = fusion::graph::inject_noise(g, fused.mean_star, refined, 1.0)?;
            let z = g.gap(noisy)?;
            let z = logits(g, z, corrupt)?;
            g.soft_margin(z, &y)
        },
        &[attn_logits, cam],
        DEFAULT_EPS,
    )?;
    Ok(CheckResult {
        name: "fused_branch",
        max_rel_error: err,
    })
}

/// Full training loss of a freshly initialized minimal model w.r.t. every
/// parameter.
pub fn total_loss_check(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::minimal()
    };
    let state = ModelState::init(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let s = cfg.image_size;
    let image = Tensor::from_fn(&[3, s, s], |_| rng.gen_range(0.0..1.0));
    let y = Tensor::from_vec(vec![1.0, 0.0]);
    let xs: Vec<Tensor> = state.tensors().into_iter().cloned().collect();
    let opts = LossOptions::default();
    let err = finite_diff_check_many(
        |g, v| {
            let params = Params::from_flat(&cfg, v.iter().copied());
            let x = g.constant(image.clone());
            let mut art = model::forward_graph(g, &cfg, &params, x)?;
            art.token_logits = logits(g, art.token_logits, corrupt)?;
            Ok(total_loss(g, &art, &y, &opts)?.0)
        },
        &xs,
        DEFAULT_EPS,
    )?;
    Ok(CheckResult {
        name: "total_loss",
        max_rel_error: err,
    })
}

/// Check `f` through a random weighted-sum readout, so every output
/// coordinate contributes with a distinct weight.
fn readout_check<F>(name: &'static str, rng: &mut ChaCha8Rng, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let weights = uniform(rng, g.value(out).shape(), 1.0);
    let err = finite_diff_check_many(
        |g, v| {
            let out = f(g, v)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum_all(prod))
        },
        inputs,
        DEFAULT_EPS,
    )?;
    Ok(CheckResult {
        name,
        max_rel_error: err,
    })
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// One gradient check per differentiable graph operation, including the
/// attention-fusion operations.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    macro_rules! check {
        ($name:literal, [$($shape:expr),+], $f:expr) => {{
            let inputs = vec![$(uniform(r, &$shape, 1.0)),+];
            out.push(readout_check($name, r, &inputs, $f)?);
        }};
    }
    check!("add", [[3, 4], [3, 4]], |g, v| g.add(v[0], v[1]));
    check!("sub", [[3, 4], [3, 4]], |g, v| g.sub(v[0], v[1]));
    check!("mul", [[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1]));
    check!("scale", [[2, 3]], |g, v| Ok(g.scale(v[0], -1.7)));
    check!("add_row", [[3, 4], [4]], |g, v| g.add_row(v[0], v[1]));
    check!("matmul", [[3, 4], [4, 2]], |g, v| g.matmul(v[0], v[1]));
    check!("linear", [[3, 4], [4, 2], [2]], |g, v| g.linear(v[0], v[1], v[2]));
    check!("transpose", [[3, 5]], |g, v| g.transpose(v[0]));
    check!("softmax_rows", [[3, 5]], |g, v| g.softmax_rows(v[0]));
    check!("reshape", [[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check!("sum_axis", [[2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
    check!("mean_axis", [[2, 3, 4]], |g, v| g.mean_axis(v[0], 0));
    check!("sum_all", [[2, 3]], |g, v| Ok(g.sum_all(v[0])));
    check!("gap", [[2, 3, 3]], |g, v| g.gap(v[0]));
    check!("narrow", [[4, 5]], |g, v| g.narrow(v[0], 1, 1, 3));
    check!("concat", [[2, 3], [2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check!("stack", [[2, 3], [2, 3]], |g, v| g.stack(&[v[0], v[1]]));
    check!("conv2d", [[2, 5, 5], [3, 2, 3, 3], [3]], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));
    check!("conv2d_strided", [[2, 6, 6], [3, 2, 3, 3], [3]], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));
    check!("patchify", [[3, 4, 4]], |g, v| g.patchify(v[0], 2));

    let relu_in = vec![off_kink(r, &[3, 4])];
    out.push(readout_check("relu", r, &relu_in, |g, v| Ok(g.relu(v[0])))?);
    let y = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
    check!("soft_margin", [[3]], |g, v| g.soft_margin(v[0], &y));

    // fusion operations, on row-stochastic attention made by softmax
    let (b, h, n) = (2, 3, 4);
    let stack = |g: &mut Graph, logits: Var| {
        let rows = g.softmax_rows(logits)?;
        g.reshape(rows, &[b, h, n + 1, n + 1])
    };
    let logits = [b * h * (n + 1), n + 1];
    check!("head_average", [logits], |g, v| {
        let s = stack(g, v[0])?;
        fusion::graph::head_average(g, s)
    });
    check!("block_sum", [[b, n + 1, n + 1]], |g, v| fusion::graph::block_sum(g, v[0]));
    check!("block_mean", [[b, n + 1, n + 1]], |g, v| fusion::graph::block_mean(g, v[0]));
    check!("strip_class_token", [[n + 1, n + 1]], |g, v| fusion::graph::strip_class_token(g, v[0]));
    check!("refine_cam", [[n, n], [2, 2, 2]], |g, v| fusion::graph::refine_cam(g, v[0], v[1]));
    check!("inject_noise", [[n, n], [2, 2, 2]], |g, v| fusion::graph::inject_noise(g, v[0], v[1], 2.0));
    check!("fused_chain", [logits, [2, 2, 2]], |g, v| {
        let s = stack(g, v[0])?;
        let f = fusion::graph::fuse(g, s)?;
        let refined = fusion::graph::refine_cam(g, f.sum_star, v[1])?;
        fusion::graph::inject_noise(g, f.mean_star, refined, 1.0)
    });
    Ok(out)
}

/// All three checks. `corrupt` routes logits through an op with a wrong
/// backward rule, which every check must catch.
pub fn run_all(seed: u64, corrupt: bool) -> Result<Vec<CheckResult>> {
    Ok(vec![
        soft_margin_check(seed, corrupt)?,
        fused_branch_check(seed, corrupt)?,
        total_loss_check(seed, corrupt)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_checks_pass() {
        for r in run_all(0, false).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn every_op_passes() {
        for r in op_checks(1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for r in run_all(0, true).unwrap() {
            assert!(!r.passed(), "{r:?}");
        }
    }
}
