//! Attention aggregation and CAM refinement.
//!
//! Raw attention `A^{b,h}` arrives as a `[B, H, 1+N, 1+N]` stack with the
//! class token at index 0 of both token axes. Heads are averaged, blocks
//! are summed (`A`) or averaged (`Ā`), and the class-token row and column
//! are dropped to get the patch-to-patch maps `A*` and `Ā*`. A CAM
//! `[K, g, g]` is refined by flattening each class map row-major to `N = g²`
//! cells and left-multiplying by `A*`.
//!
//! Every function exists twice: on plain tensors, and on graph variables in
//! [`graph`]. Both run the same tensor kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marker label recorded when a CAM is multiplied by `A*`.
pub const REFINE_MARKER: &str = "refine_cam";
/// Marker label recorded when the noise matrix `Ā*` is applied.
pub const NOISE_MARKER: &str = "inject_noise";

const ROW_SUM_TOL: f64 = 1e-9;

/// Per-block, per-head attention weights, `[B, H, 1+N, 1+N]`, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack(Tensor);

impl AttentionStack {
    pub fn new(weights: Tensor) -> Result<Self> {
        let [_, _, rows, cols] = weights.shape()[..] else {
            return Err(Error::invalid(
                "attention_stack",
                format!("expected [B, H, 1+N, 1+N], got {:?}", weights.shape()),
            ));
        };
        if rows != cols || rows < 2 {
            return Err(Error::invalid(
                "attention_stack",
                format!("token axes must be square and ≥ 2, got {rows}x{cols}"),
            ));
        }
        for (i, row) in weights.data().chunks(cols).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(
                    "attention_stack",
                    format!("row {i} is not a probability vector (sum {sum})"),
                ));
            }
        }
        Ok(AttentionStack(weights))
    }

    pub fn weights(&self) -> &Tensor {
        &self.0
    }

    pub fn num_blocks(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_heads(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn fuse(&self) -> Result<FusedAttention> {
        FusedAttention::from_stack(&self.0)
    }
}

/// Aggregated attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAttention {
    /// Block sum `A`, `[1+N, 1+N]`.
    pub sum: Tensor,
    /// `A*`: `sum` without the class token, `[N, N]`.
    pub sum_star: Tensor,
    /// Block mean `Ā`.
    pub mean: Tensor,
    /// `Ā*`, the training-time noise matrix.
    pub mean_star: Tensor,
}

impl FusedAttention {
    pub fn from_stack(stack: &Tensor) -> Result<Self> {
        let per_block = head_average(stack)?;
        let sum = block_sum(&per_block)?;
        let mean = block_mean(&per_block)?;
        Ok(FusedAttention {
            sum_star: strip_class_token(&sum)?,
            mean_star: strip_class_token(&mean)?,
            sum,
            mean,
        })
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// `Ā^b = (1/H) Σ_h A^{b,h}`: `[B, H, n, n] → [B, n, n]`.
pub fn head_average(stack: &Tensor) -> Result<Tensor> {
    expect_rank("head_average", stack, 4)?;
    stack.mean_axis(1)
}

/// `A = Σ_b Ā^b`: `[B, n, n] → [n, n]`.
pub fn block_sum(per_block: &Tensor) -> Result<Tensor> {
    expect_rank("block_sum", per_block, 3)?;
    per_block.sum_axis(0)
}

/// `Ā = (1/B) Σ_b Ā^b`, computed as `block_sum / B`.
pub fn block_mean(per_block: &Tensor) -> Result<Tensor> {
    expect_rank("block_mean", per_block, 3)?;
    per_block.mean_axis(0)
}

/// Drop row 0 and column 0. No renormalization.
pub fn strip_class_token(x: &Tensor) -> Result<Tensor> {
    let [r, c] = x.shape()[..] else {
        return Err(Error::invalid(
            "strip_class_token",
            format!("expected a square matrix, got {:?}", x.shape()),
        ));
    };
    if r != c || r < 2 {
        return Err(Error::invalid(
            "strip_class_token",
            format!("need a square matrix with side ≥ 2, got {r}x{c}"),
        ));
    }
    x.narrow(0, 1, r - 1)?.narrow(1, 1, c - 1)
}

fn cam_grid(op: &'static str, map: &Tensor, cam: &Tensor) -> Result<(usize, usize)> {
    let [k, h, w] = cam.shape()[..] else {
        return Err(Error::invalid(
            op,
            format!("CAM must be [K, g, g], got {:?}", cam.shape()),
        ));
    };
    if map.shape() != [h * w, h * w] {
        return Err(Error::shape(op, map.shape(), cam.shape()));
    }
    Ok((k, h * w))
}

/// `M*_s = A*·M_s` per class, on row-major flattened maps.
pub fn refine_cam(a_star: &Tensor, cam: &Tensor) -> Result<Tensor> {
    let (k, n) = cam_grid("refine_cam", a_star, cam)?;
    cam.reshape(&[k, n])?
        .matmul(&a_star.transpose()?)?
        .reshape(cam.shape())
}

/// `M**_s = (k·Ā*)·M*_s`. `k = 1` is the plain noise injection.
pub fn inject_noise(a_bar_star: &Tensor, refined: &Tensor, multiplier: f64) -> Result<Tensor> {
    check_multiplier(multiplier)?;
    cam_grid("inject_noise", a_bar_star, refined)?;
    refine_cam(&a_bar_star.scale(multiplier), refined)
}

fn check_multiplier(k: f64) -> Result<()> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::invalid(
            "inject_noise",
            format!("noise multiplier must be finite and ≥ 0, got {k}"),
        ));
    }
    Ok(())
}

/// Graph-recording versions; gradients flow through attention and CAM.
pub mod graph {
    use super::*;
    use crate::autodiff::{Graph, Var};

    pub fn head_average(g: &mut Graph, stack: Var) -> Result<Var> {
        expect_rank("head_average", g.value(stack), 4)?;
        g.mean_axis(stack, 1)
    }

    pub fn block_sum(g: &mut Graph, per_block: Var) -> Result<Var> {
        expect_rank("block_sum", g.value(per_block), 3)?;
        g.sum_axis(per_block, 0)
    }

    pub fn block_mean(g: &mut Graph, per_block: Var) -> Result<Var> {
        expect_rank("block_mean", g.value(per_block), 3)?;
        g.mean_axis(per_block, 0)
    }

    pub fn strip_class_token(g: &mut Graph, x: Var) -> Result<Var> {
        let side = match g.value(x).shape()[..] {
            [r, c] if r == c && r >= 2 => r,
            ref s => {
                return Err(Error::invalid(
                    "strip_class_token",
                    format!("need a square matrix with side ≥ 2, got {s:?}"),
                ))
            }
        };
        let rows = g.narrow(x, 0, 1, side - 1)?;
        g.narrow(rows, 1, 1, side - 1)
    }

    fn apply(g: &mut Graph, op: &'static str, map: Var, cam: Var) -> Result<Var> {
        let (k, n) = cam_grid(op, g.value(map), g.value(cam))?;
        let shape = g.value(cam).shape().to_vec();
        let flat = g.reshape(cam, &[k, n])?;
        let map_t = g.transpose(map)?;
        let out = g.matmul(flat, map_t)?;
        g.reshape(out, &shape)
    }

    pub fn refine_cam(g: &mut Graph, a_star: Var, cam: Var) -> Result<Var> {
        let out = apply(g, "refine_cam", a_star, cam)?;
        g.mark(REFINE_MARKER, out);
        Ok(out)
    }

    pub fn inject_noise(g: &mut Graph, a_bar_star: Var, refined: Var, multiplier: f64) -> Result<Var> {
        check_multiplier(multiplier)?;
        let scaled = g.scale(a_bar_star, multiplier);
        let out = apply(g, "inject_noise", scaled, refined)?;
        g.mark(NOISE_MARKER, out);
        Ok(out)
    }

    /// Graph handles for `A`, `A*`, `Ā`, `Ā*`.
    #[derive(Debug, Clone, Copy)]
    pub struct FusedVars {
        pub sum: Var,
        pub sum_star: Var,
        pub mean: Var,
        pub mean_star: Var,
    }

    pub fn fuse(g: &mut Graph, stack: Var) -> Result<FusedVars> {
        let per_block = head_average(g, stack)?;
        let sum = block_sum(g, per_block)?;
        let mean = block_mean(g, per_block)?;
        Ok(FusedVars {
            sum_star: strip_class_token(g, sum)?,
            mean_star: strip_class_token(g, mean)?,
            sum,
            mean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_head_average_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64);
        let avg = head_average(&x).unwrap();
        assert_eq!(avg.data(), x.data());
        assert_eq!(avg.shape(), &[2, 3, 3]);
    }

    #[test]
    fn two_opposite_heads_average_to_half() {
        let x = t(&[1, 2, 2, 2], &[1., 0., 0., 1., 0., 1., 1., 0.]);
        assert_eq!(head_average(&x).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn block_sum_of_identical_blocks_scales() {
        let m = Tensor::from_fn(&[2, 2], |i| i as f64 + 1.0);
        let three = Tensor::stack(&[&m, &m, &m]).unwrap();
        assert_eq!(block_sum(&three).unwrap(), m.scale(3.0));
        let one = Tensor::stack(&[&m]).unwrap();
        assert_eq!(block_sum(&one).unwrap(), m);
        assert_eq!(block_mean(&one).unwrap(), m);
    }

    #[test]
    fn strip_drops_class_token() {
        let x = Tensor::from_fn(&[3, 3], |i| i as f64);
        assert_eq!(strip_class_token(&x).unwrap().data(), &[4., 5., 7., 8.]);
        assert_eq!(strip_class_token(&Tensor::eye(5)).unwrap(), Tensor::eye(4));
        assert!(strip_class_token(&Tensor::eye(1)).is_err());
        assert!(strip_class_token(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn refine_identity_and_uniform() {
        let cam = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(refine_cam(&Tensor::eye(4), &cam).unwrap(), cam);
        let uniform = Tensor::full(&[4, 4], 0.25);
        assert_eq!(refine_cam(&uniform, &cam).unwrap().data(), &[2.5; 4]);
        assert!(refine_cam(&Tensor::eye(3), &cam).is_err());
    }

    #[test]
    fn noise_multiplier_is_linear() {
        let cam = Tensor::from_fn(&[2, 2, 2], |i| (i as f64).sin());
        let noise = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.7).cos().abs());
        assert_eq!(inject_noise(&Tensor::eye(4), &cam, 1.0).unwrap(), cam);
        let one = inject_noise(&noise, &cam, 1.0).unwrap();
        let two = inject_noise(&noise, &cam, 2.0).unwrap();
        assert!(two.max_abs_diff(&one.scale(2.0)) < 1e-15);
        assert!(inject_noise(&noise, &cam, -1.0).is_err());
    }

    #[test]
    fn attention_stack_validates_rows() {
        let ok = Tensor::full(&[1, 1, 3, 3], 1.0 / 3.0);
        assert!(AttentionStack::new(ok).is_ok());
        let bad = Tensor::full(&[1, 1, 3, 3], 0.5);
        assert!(AttentionStack::new(bad).is_err());
        assert!(AttentionStack::new(Tensor::ones(&[1, 1])).is_err());
    }
}
