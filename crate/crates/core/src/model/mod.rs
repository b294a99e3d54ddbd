//! Desk-scale dual-branch backbone.
//!
//! A three-stage strided CNN produces feature maps `f` on the patch grid; a
//! stack of transformer blocks runs over `[class token; patch tokens]`.
//! After every block the two branches exchange features once in each
//! direction: patch tokens are projected `D → fc` and added onto `f`, and
//! `f` (one grid cell per patch) is projected `fc → D` and added onto the
//! patch tokens. No position embeddings are used, so the model runs at any
//! input size divisible by the patch size.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{
    load_checkpoint, parse_manifest as parse_checkpoint_manifest, save_checkpoint, CHECKPOINT_MANIFEST,
};
pub use config::ModelConfig;
pub use params::{BlockParams, Params};

use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, AttentionStack};
use crate::resize;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Params<Tensor>,
}

/// Per-image outputs of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardArtifacts {
    /// Final CNN features, `[fc, g, g]`.
    pub features: Tensor,
    /// CAM `M`, `[S−1, g, g]`.
    pub cam: Tensor,
    /// Final tokens `t`, `[1+N, D]`, class token first.
    pub tokens: Tensor,
    pub attention: AttentionStack,
    /// Class-token classifier output, `[S−1]`.
    pub token_logits: Tensor,
}

/// Graph handles for the same outputs.
#[derive(Debug, Clone, Copy)]
pub struct GraphArtifacts {
    pub features: Var,
    pub cam: Var,
    pub tokens: Var,
    /// `[B, H, 1+N, 1+N]`.
    pub attention: Var,
    pub token_logits: Var,
}

impl ModelState {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::from_flat(&config, params::init_tensors(&config));
        Ok(ModelState { config, params })
    }

    /// Assemble from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = params::param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("parameter {} is not finite", s.name)));
            }
        }
        Ok(ModelState {
            params: Params::from_flat(&config, tensors),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<Tensor> {
        &self.params
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.flat()
    }

    pub fn param_names(&self) -> Vec<String> {
        params::param_specs(&self.config)
            .into_iter()
            .map(|s| s.name)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(&self.config, |t| g.param(t.clone()))
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(&self.config, |t| g.constant(t.clone()))
    }
}

/// CAM head on graph variables: `M_s = Σ_c w_s[c]·f[c]`.
pub fn cam_head_graph(g: &mut Graph, cam_w: Var, features: Var) -> Result<Var> {
    let [fc, h, w] = g.value(features).shape()[..] else {
        return Err(Error::invalid("cam_head", "features must be [fc, g, g]"));
    };
    let classes = g.value(cam_w).shape()[0];
    let flat = g.reshape(features, &[fc, h * w])?;
    let cam = g.matmul(cam_w, flat)?;
    g.reshape(cam, &[classes, h, w])
}

/// CAM `[S−1, g, g]` from features `[fc, g, g]`.
pub fn cam_head(state: &ModelState, features: &Tensor) -> Result<Tensor> {
    let [fc, h, w] = features.shape()[..] else {
        return Err(Error::invalid("cam_head", "features must be [fc, g, g]"));
    };
    let cam_w = &state.params.cam_w;
    cam_w
        .matmul(&features.reshape(&[fc, h * w])?)?
        .reshape(&[cam_w.shape()[0], h, w])
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<usize> {
    match image.shape()[..] {
        [3, h, w] if h == w && h > 0 && h % cfg.patch_size == 0 => Ok(h),
        _ => Err(Error::invalid(
            "forward",
            format!(
                "image must be [3, s, s] with s divisible by {}, got {:?}",
                cfg.patch_size,
                image.shape()
            ),
        )),
    }
}

fn check_base_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    let size = check_image(cfg, image)?;
    if size != cfg.image_size {
        return Err(Error::invalid(
            "forward",
            format!("image is {size}px, model expects {}px", cfg.image_size),
        ));
    }
    Ok(())
}

/// Record the full forward pass on `g`. The image may be any square size
/// divisible by the patch size.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Params<Var>,
    image: Var,
) -> Result<GraphArtifacts> {
    let size = check_image(cfg, g.value(image))?;
    let grid = size / cfg.patch_size;
    let n = grid * grid;
    let fc = cfg.cnn_channels;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();

    let mut f = image;
    for (stage, stride) in cfg.stage_strides().into_iter().enumerate() {
        let y = g.conv2d(f, p.conv_w[stage], p.conv_b[stage], stride, 1)?;
        f = g.relu(y);
    }

    let patches = g.patchify(image, cfg.patch_size)?;
    let patch_tokens = g.linear(patches, p.patch_w, p.patch_b)?;
    let mut tokens = g.concat(&[p.cls_token, patch_tokens], 0)?;

    let attn_scale = 1.0 / (dh as f64).sqrt();
    let mut maps = Vec::with_capacity(cfg.num_blocks * cfg.num_heads);
    for block in &p.blocks {
        let qkv = g.linear(tokens, block.qkv_w, block.qkv_b)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let q = g.narrow(qkv, 1, h * dh, dh)?;
            let k = g.narrow(qkv, 1, d + h * dh, dh)?;
            let v = g.narrow(qkv, 1, 2 * d + h * dh, dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, attn_scale);
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, v)?);
            maps.push(attn);
        }
        let merged = g.concat(&heads, 1)?;
        let attended = g.linear(merged, block.proj_w, block.proj_b)?;
        tokens = g.add(tokens, attended)?;
        let hidden = g.linear(tokens, block.mlp_in_w, block.mlp_in_b)?;
        let hidden = g.relu(hidden);
        let mlp = g.linear(hidden, block.mlp_out_w, block.mlp_out_b)?;
        tokens = g.add(tokens, mlp)?;

        // feature coupling, both directions from pre-exchange values
        let cls = g.narrow(tokens, 0, 0, 1)?;
        let patch_part = g.narrow(tokens, 0, 1, n)?;
        let to_cnn = g.linear(patch_part, block.to_cnn_w, block.to_cnn_b)?;
        let to_cnn = g.transpose(to_cnn)?;
        let to_cnn = g.reshape(to_cnn, &[fc, grid, grid])?;
        let f_flat = g.reshape(f, &[fc, n])?;
        let f_rows = g.transpose(f_flat)?;
        let to_tokens = g.linear(f_rows, block.to_tokens_w, block.to_tokens_b)?;
        let coupled = g.add(f, to_cnn)?;
        f = g.relu(coupled);
        let patch_part = g.add(patch_part, to_tokens)?;
        tokens = g.concat(&[cls, patch_part], 0)?;
    }

    let stacked = g.stack(&maps)?;
    let attention = g.reshape(stacked, &[cfg.num_blocks, cfg.num_heads, n + 1, n + 1])?;
    let cam = cam_head_graph(g, p.cam_w, f)?;
    let cls = g.narrow(tokens, 0, 0, 1)?;
    let logits = g.linear(cls, p.head_w, p.head_b)?;
    let token_logits = g.reshape(logits, &[cfg.num_classes])?;
    Ok(GraphArtifacts {
        features: f,
        cam,
        tokens,
        attention,
        token_logits,
    })
}

/// Single-scale forward pass; the image must match `image_size`.
pub fn forward(state: &ModelState, image: &Tensor) -> Result<ForwardArtifacts> {
    check_base_image(&state.config, image)?;
    let mut g = Graph::new();
    let p = state.bind_constant(&mut g);
    let x = g.constant(image.clone());
    let a = forward_graph(&mut g, &state.config, &p, x)?;
    Ok(ForwardArtifacts {
        features: g.value(a.features).clone(),
        cam: g.value(a.cam).clone(),
        tokens: g.value(a.tokens).clone(),
        attention: AttentionStack::new(g.value(a.attention).clone())?,
        token_logits: g.value(a.token_logits).clone(),
    })
}

/// Independent per-image forward passes, run in parallel.
pub fn forward_batch(state: &ModelState, images: &[Tensor]) -> Result<Vec<ForwardArtifacts>> {
    images.par_iter().map(|im| forward(state, im)).collect()
}

/// Refined CAM plus the fusion markers recorded while producing it.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `M*`, `[S−1, g, g]` on the base grid.
    pub refined: Tensor,
    pub markers: Vec<&'static str>,
}

fn refine_at_any_size(state: &ModelState, image: &Tensor) -> Result<Inference> {
    let mut g = Graph::new();
    let p = state.bind_constant(&mut g);
    let x = g.constant(image.clone());
    let a = forward_graph(&mut g, &state.config, &p, x)?;
    let fused = fusion::graph::fuse(&mut g, a.attention)?;
    let refined = fusion::graph::refine_cam(&mut g, fused.sum_star, a.cam)?;
    Ok(Inference {
        refined: g.value(refined).clone(),
        markers: g.markers().iter().map(|m| m.label).collect(),
    })
}

/// Single-scale refined CAM `M* = A*·M`. The noise matrix is not applied.
pub fn infer(state: &ModelState, image: &Tensor) -> Result<Inference> {
    check_base_image(&state.config, image)?;
    refine_at_any_size(state, image)
}

/// Refined CAMs at several input sizes, resized back to the base grid and
/// averaged.
pub fn infer_multiscale(state: &ModelState, image: &Tensor, scales: &[usize]) -> Result<Inference> {
    let cfg = &state.config;
    if scales.is_empty() {
        return Err(Error::invalid("infer_multiscale", "no scales given"));
    }
    if let Some(bad) = scales.iter().find(|&&s| s == 0 || s % cfg.patch_size != 0) {
        return Err(Error::invalid(
            "infer_multiscale",
            format!("scale {bad} is not a positive multiple of patch size {}", cfg.patch_size),
        ));
    }
    check_image(cfg, image)?;
    let base = image.shape()[1];
    let grid = base / cfg.patch_size;
    let per_scale: Vec<Inference> = scales
        .par_iter()
        .map(|&s| {
            let resized = resize::bilinear(image, s, s)?;
            let mut inf = refine_at_any_size(state, &resized)?;
            inf.refined = resize::bilinear(&inf.refined, grid, grid)?;
            Ok(inf)
        })
        .collect::<Result<_>>()?;
    let mut total = per_scale[0].refined.clone();
    for inf in &per_scale[1..] {
        total.add_assign(&inf.refined)?;
    }
    let count = per_scale.len() as f64;
    Ok(Inference {
        refined: total.map(|v| v / count),
        markers: per_scale.into_iter().flat_map(|i| i.markers).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, size, size], |_| rng.gen())
    }

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            num_blocks: 2,
            num_heads: 2,
            embed_dim: 16,
            cnn_channels: 8,
            num_classes: 3,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelState::init(small()).unwrap();
        let b = ModelState::init(small()).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            embed_dim: 63,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(ModelState::init(cfg).is_err());
    }

    #[test]
    fn forward_shapes() {
        let state = ModelState::init(small()).unwrap();
        let out = forward(&state, &image(32, 1)).unwrap();
        assert_eq!(out.features.shape(), &[8, 4, 4]);
        assert_eq!(out.cam.shape(), &[3, 4, 4]);
        assert_eq!(out.tokens.shape(), &[17, 16]);
        assert_eq!(out.attention.weights().shape(), &[2, 2, 17, 17]);
        assert_eq!(out.token_logits.shape(), &[3]);
        assert!(forward(&state, &image(24, 1)).is_err());
    }

    #[test]
    fn cam_head_selects_and_dots() {
        let cfg = ModelConfig {
            cnn_channels: 2,
            num_classes: 1,
            ..ModelConfig::minimal()
        };
        let state = ModelState::init(cfg.clone()).unwrap();
        let f = Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut tensors: Vec<Tensor> = state.tensors().into_iter().cloned().collect();
        let names = state.param_names();
        let cam_idx = names.iter().position(|n| n == "cam.weight").unwrap();
        tensors[cam_idx] = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let s = ModelState::from_tensors(cfg.clone(), tensors.clone()).unwrap();
        assert_eq!(cam_head(&s, &f).unwrap().data(), &[-1.0]);
        tensors[cam_idx] = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let s = ModelState::from_tensors(cfg.clone(), tensors.clone()).unwrap();
        assert_eq!(cam_head(&s, &f).unwrap().data(), &[3.0]);
        tensors[cam_idx] = Tensor::zeros(&[1, 2]);
        let s = ModelState::from_tensors(cfg, tensors).unwrap();
        assert_eq!(cam_head(&s, &f).unwrap().data(), &[0.0]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let state = ModelState::init(small()).unwrap();
        let (a, b) = (image(32, 1), image(32, 2));
        let ab = forward_batch(&state, &[a.clone(), b.clone()]).unwrap();
        let ba = forward_batch(&state, &[b, a]).unwrap();
        assert_eq!(ab[0].cam, ba[1].cam);
        assert_eq!(ab[1].attention, ba[0].attention);
    }

    #[test]
    fn multiscale_degenerate_cases() {
        let state = ModelState::init(small()).unwrap();
        let img = image(32, 5);
        let single = infer(&state, &img).unwrap().refined;
        assert_eq!(infer_multiscale(&state, &img, &[32]).unwrap().refined, single);
        assert_eq!(infer_multiscale(&state, &img, &[32, 32]).unwrap().refined, single);
        let multi = infer_multiscale(&state, &img, &[16, 32, 48]).unwrap();
        assert_eq!(multi.refined.shape(), &[3, 4, 4]);
        assert!(infer_multiscale(&state, &img, &[20]).is_err());
        assert!(infer_multiscale(&state, &img, &[]).is_err());
    }

    #[test]
    fn inference_never_applies_noise() {
        let state = ModelState::init(small()).unwrap();
        let inf = infer_multiscale(&state, &image(32, 5), &[16, 32]).unwrap();
        assert!(inf.markers.contains(&fusion::REFINE_MARKER));
        assert!(!inf.markers.contains(&fusion::NOISE_MARKER));
    }
}
