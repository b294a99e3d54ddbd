use std::fmt;
use std::str::FromStr;

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion;
use crate::model::GraphArtifacts;
use crate::tensor::Tensor;

/// Multi-label soft-margin loss of logits `z` against multi-hot `y`,
/// averaged over classes. Evaluated in softplus form, so it stays finite
/// for any finite logit.
pub fn multilabel_soft_margin(z: &Tensor, y: &Tensor) -> Result<f64> {
    if z.rank() != 1 || z.shape() != y.shape() {
        return Err(Error::shape("multilabel_soft_margin", z.shape(), y.shape()));
    }
    autodiff::check_multi_hot("multilabel_soft_margin", y)?;
    Ok(autodiff::soft_margin_value(z.data(), y.data()))
}

/// Whether and how strongly the training-time noise branch is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Train on the classification loss alone.
    Off,
    /// Add the noise-branch loss with `Ā*` scaled by this factor.
    Multiplier(f64),
}

impl Default for NoiseMode {
    fn default() -> Self {
        NoiseMode::Multiplier(1.0)
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseMode::Off => f.write_str("off"),
            NoiseMode::Multiplier(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "off" | "none" => Ok(NoiseMode::Off),
            raw => match raw.parse::<f64>() {
                Ok(k) if k.is_finite() && k >= 0.0 => Ok(NoiseMode::Multiplier(k)),
                _ => Err(format!("noise must be `off` or a multiplier ≥ 0, got {raw:?}")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOptions {
    pub noise: NoiseMode,
    /// Stop gradients at the attention stack inside the noise branch.
    pub detach_attention: bool,
}

/// Both loss terms of one sample and the logits they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    /// Noise-branch loss; `0` when the branch is off.
    pub noisy: f64,
    /// `cls + noisy`, as evaluated on the graph.
    pub total: f64,
    /// GAP of the noise-augmented CAM; empty when the branch is off.
    pub z: Vec<f64>,
    /// CAM GAP plus class-token logits.
    pub z_cls: Vec<f64>,
}

/// Noise branch: `M* = A*·M`, `M** = (k·Ā*)·M*`, `z = gap(M**)`, then the
/// soft-margin loss. Returns `(loss, z)`.
pub fn noisy_branch_loss(
    g: &mut Graph,
    art: &GraphArtifacts,
    y: &Tensor,
    multiplier: f64,
    detach_attention: bool,
) -> Result<(Var, Var)> {
    let attention = if detach_attention {
        g.detach(art.attention)
    } else {
        art.attention
    };
    let fused = fusion::graph::fuse(g, attention)?;
    let refined = fusion::graph::refine_cam(g, fused.sum_star, art.cam)?;
    let noisy = fusion::graph::inject_noise(g, fused.mean_star, refined, multiplier)?;
    let z = g.gap(noisy)?;
    Ok((g.soft_margin(z, y)?, z))
}

/// Classification branch: `z_cls = gap(M) + head(t[0])`, then the
/// soft-margin loss. Returns `(loss, z_cls)`.
pub fn cls_loss(g: &mut Graph, art: &GraphArtifacts, y: &Tensor) -> Result<(Var, Var)> {
    let cam_logits = g.gap(art.cam)?;
    let z = g.add(cam_logits, art.token_logits)?;
    Ok((g.soft_margin(z, y)?, z))
}

/// `L = L_cls + L_{M**}` (or `L_cls` alone with the noise branch off).
pub fn total_loss(
    g: &mut Graph,
    art: &GraphArtifacts,
    y: &Tensor,
    opts: &LossOptions,
) -> Result<(Var, LossReport)> {
    let (cls, z_cls) = cls_loss(g, art, y)?;
    let (total, noisy, z) = match opts.noise {
        NoiseMode::Off => (cls, 0.0, Vec::new()),
        NoiseMode::Multiplier(k) => {
            let (noisy, z) = noisy_branch_loss(g, art, y, k, opts.detach_attention)?;
            let total = g.add(cls, noisy)?;
            (total, g.value(noisy).item()?, g.value(z).data().to_vec())
        }
    };
    let report = LossReport {
        cls: g.value(cls).item()?,
        noisy,
        total: g.value(total).item()?,
        z,
        z_cls: g.value(z_cls).data().to_vec(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(z: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&z, &y) in z.iter().zip(y) {
            let p = 1.0 / (1.0 + (-z).exp());
            let q = (-z).exp() / (1.0 + (-z).exp());
            acc += y * p.ln() + (1.0 - y) * q.ln();
        }
        -acc / z.len() as f64
    }

    #[test]
    fn zero_logits_give_ln2() {
        let y = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
        let l = multilabel_soft_margin(&Tensor::zeros(&[3]), &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_value() {
        let z = Tensor::from_vec(vec![2.0, -1.0]);
        let y = Tensor::from_vec(vec![1.0, 0.0]);
        let l = multilabel_soft_margin(&z, &y).unwrap();
        assert!((l - 0.220095).abs() < 1e-6, "{l}");
        assert!((l - naive(z.data(), y.data())).abs() < 1e-12);
    }

    #[test]
    fn saturated_positive_is_tiny_and_finite() {
        let z = Tensor::from_vec(vec![40.0]);
        let y = Tensor::from_vec(vec![1.0]);
        let l = multilabel_soft_margin(&z, &y).unwrap();
        assert!(l.is_finite() && l < 1e-17 && l >= 0.0, "{l}");
        let huge = multilabel_soft_margin(&Tensor::from_vec(vec![-1e4]), &y).unwrap();
        assert!(huge.is_finite());
    }

    #[test]
    fn bad_labels_and_shapes() {
        let z = Tensor::zeros(&[2]);
        assert!(multilabel_soft_margin(&z, &Tensor::from_vec(vec![2.0, 0.0])).is_err());
        assert!(multilabel_soft_margin(&z, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn noise_mode_parsing() {
        assert_eq!("off".parse::<NoiseMode>().unwrap(), NoiseMode::Off);
        assert_eq!("2".parse::<NoiseMode>().unwrap(), NoiseMode::Multiplier(2.0));
        assert!("-1".parse::<NoiseMode>().is_err());
        assert_eq!(NoiseMode::default().to_string(), "1");
    }
}
