use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::tensor::Tensor;

/// Weights of one transformer block and its coupling projections.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub qkv_w: T,
    pub qkv_b: T,
    pub proj_w: T,
    pub proj_b: T,
    pub mlp_in_w: T,
    pub mlp_in_b: T,
    pub mlp_out_w: T,
    pub mlp_out_b: T,
    /// Patch tokens → CNN grid.
    pub to_cnn_w: T,
    pub to_cnn_b: T,
    /// CNN grid → patch tokens.
    pub to_tokens_w: T,
    pub to_tokens_b: T,
}

/// All learnable tensors, generic so the same layout holds plain tensors
/// and graph variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub conv_w: [T; 3],
    pub conv_b: [T; 3],
    pub patch_w: T,
    pub patch_b: T,
    pub cls_token: T,
    pub blocks: Vec<BlockParams<T>>,
    /// Per-class CAM weights `w_s`, `[S−1, fc]`.
    pub cam_w: T,
    /// Class-token classifier, `[D, S−1]` + `[S−1]`.
    pub head_w: T,
    pub head_b: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Parameter names, shapes and init rules, in canonical order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let fc = cfg.cnn_channels;
    let half = (fc / 2).max(1);
    let d = cfg.embed_dim;
    let k = cfg.num_classes;
    let p = cfg.patch_size;
    let mut specs = Vec::new();
    let chans = [(3, half), (half, fc), (fc, fc)];
    for (i, (cin, cout)) in chans.into_iter().enumerate() {
        specs.push(spec(format!("conv{i}.weight"), &[cout, cin, 3, 3], Init::FanIn(cin * 9)));
    }
    for (i, (_, cout)) in chans.into_iter().enumerate() {
        specs.push(spec(format!("conv{i}.bias"), &[cout], Init::Zero));
    }
    specs.push(spec("patch.weight", &[3 * p * p, d], Init::FanIn(3 * p * p)));
    specs.push(spec("patch.bias", &[d], Init::Zero));
    specs.push(spec("cls_token", &[1, d], Init::Uniform(0.02)));
    for b in 0..cfg.num_blocks {
        let n = |s: &str| format!("block{b}.{s}");
        specs.push(spec(n("qkv.weight"), &[d, 3 * d], Init::FanIn(d)));
        specs.push(spec(n("qkv.bias"), &[3 * d], Init::Zero));
        specs.push(spec(n("proj.weight"), &[d, d], Init::FanIn(d)));
        specs.push(spec(n("proj.bias"), &[d], Init::Zero));
        specs.push(spec(n("mlp_in.weight"), &[d, 2 * d], Init::FanIn(d)));
        specs.push(spec(n("mlp_in.bias"), &[2 * d], Init::Zero));
        specs.push(spec(n("mlp_out.weight"), &[2 * d, d], Init::FanIn(2 * d)));
        specs.push(spec(n("mlp_out.bias"), &[d], Init::Zero));
        specs.push(spec(n("to_cnn.weight"), &[d, fc], Init::FanIn(d)));
        specs.push(spec(n("to_cnn.bias"), &[fc], Init::Zero));
        specs.push(spec(n("to_tokens.weight"), &[fc, d], Init::FanIn(fc)));
        specs.push(spec(n("to_tokens.bias"), &[d], Init::Zero));
    }
    specs.push(spec("cam.weight", &[k, fc], Init::FanIn(fc)));
    specs.push(spec("head.weight", &[d, k], Init::FanIn(d)));
    specs.push(spec("head.bias", &[k], Init::Zero));
    specs
}

pub(crate) fn init_tensors(cfg: &ModelConfig) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    param_specs(cfg)
        .iter()
        .map(|s| {
            let bound = match s.init {
                Init::Zero => return Tensor::zeros(&s.shape),
                Init::FanIn(fan) => 1.0 / (fan as f64).sqrt(),
                Init::Uniform(b) => b,
            };
            Tensor::from_fn(&s.shape, |_| rng.gen_range(-bound..bound))
        })
        .collect()
}

impl<T> Params<T> {
    /// Rebuild from values in canonical order.
    pub fn from_flat(cfg: &ModelConfig, values: impl IntoIterator<Item = T>) -> Self {
        let mut it = values.into_iter();
        let mut next = || it.next().expect("too few parameter values");
        let conv_w = [next(), next(), next()];
        let conv_b = [next(), next(), next()];
        let patch_w = next();
        let patch_b = next();
        let cls_token = next();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                mlp_in_w: next(),
                mlp_in_b: next(),
                mlp_out_w: next(),
                mlp_out_b: next(),
                to_cnn_w: next(),
                to_cnn_b: next(),
                to_tokens_w: next(),
                to_tokens_b: next(),
            })
            .collect();
        let cam_w = next();
        let head_w = next();
        let head_b = next();
        Params {
            conv_w,
            conv_b,
            patch_w,
            patch_b,
            cls_token,
            blocks,
            cam_w,
            head_w,
            head_b,
        }
    }

    /// References in canonical order.
    pub fn flat(&self) -> Vec<&T> {
        let mut out: Vec<&T> = Vec::new();
        out.extend(self.conv_w.iter());
        out.extend(self.conv_b.iter());
        out.extend([&self.patch_w, &self.patch_b, &self.cls_token]);
        for b in &self.blocks {
            out.extend([
                &b.qkv_w,
                &b.qkv_b,
                &b.proj_w,
                &b.proj_b,
                &b.mlp_in_w,
                &b.mlp_in_b,
                &b.mlp_out_w,
                &b.mlp_out_b,
                &b.to_cnn_w,
                &b.to_cnn_b,
                &b.to_tokens_w,
                &b.to_tokens_b,
            ]);
        }
        out.extend([&self.cam_w, &self.head_w, &self.head_b]);
        out
    }

    pub fn map<U>(&self, cfg: &ModelConfig, f: impl FnMut(&T) -> U) -> Params<U> {
        Params::from_flat(cfg, self.flat().into_iter().map(f))
    }
}
