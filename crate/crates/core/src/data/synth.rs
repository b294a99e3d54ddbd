use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::seeding::LabelMask;
use crate::tensor::Tensor;

/// Shape drawn for each foreground class, in class-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Base RGB colour of the class.
    fn color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.85, 0.2, 0.2],
            ShapeKind::Square => [0.2, 0.75, 0.25],
            ShapeKind::Triangle => [0.2, 0.3, 0.85],
            ShapeKind::Diamond => [0.85, 0.8, 0.15],
            ShapeKind::Cross => [0.8, 0.2, 0.8],
            ShapeKind::Ring => [0.15, 0.8, 0.8],
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => {
                // apex up, base at +r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateConfig {
    pub seed: u64,
    pub count: usize,
    /// Foreground classes, 2..=6.
    pub num_classes: usize,
    pub image_size: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 0,
            count: 200,
            num_classes: 3,
            image_size: 64,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be ≥ 1".into()));
        }
        if !(2..=ShapeKind::ALL.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                ShapeKind::ALL.len(),
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be ≥ 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

fn render(rng: &mut ChaCha8Rng, cfg: &GenerateConfig) -> Result<Sample> {
    let s = cfg.image_size;
    let sf = s as f64;
    let mut image = vec![0.0; 3 * s * s];
    let mut ids = vec![0u8; s * s];

    // textured background: grey level, a low-frequency wave, per-pixel grain
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.55));
    let (fx, fy) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..s {
        for x in 0..s {
            let wave = 0.06
                * ((fx * x as f64 / sf + fy * y as f64 / sf) * std::f64::consts::TAU + phase).sin();
            for (c, b) in base.iter().enumerate() {
                image[(c * s + y) * s + x] = b + wave + rng.gen_range(-0.06..0.06);
            }
        }
    }

    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let class = rng.gen_range(0..cfg.num_classes);
        let kind = ShapeKind::ALL[class];
        let r = rng.gen_range(0.12 * sf..0.22 * sf);
        let cx = rng.gen_range(r..sf - r);
        let cy = rng.gen_range(r..sf - r);
        let color: [f64; 3] = kind.color().map(|c| c + rng.gen_range(-0.08..0.08));
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if kind.contains(dx, dy, r) {
                    ids[y * s + x] = class as u8 + 1;
                    for (c, col) in color.iter().enumerate() {
                        image[(c * s + y) * s + x] = col + rng.gen_range(-0.03..0.03);
                    }
                }
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    Sample::new(
        Tensor::new(vec![3, s, s], image)?,
        LabelMask::new(s, s, ids)?,
        cfg.num_classes,
    )
}

/// Deterministic dataset: sample `i` is drawn from seed `seed ^ i`.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ i as u64);
            render(&mut rng, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        num_classes: cfg.num_classes,
        image_size: cfg.image_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let cfg = GenerateConfig {
            count: 5,
            image_size: 32,
            ..GenerateConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&GenerateConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(generate(&cfg).unwrap(), other);
    }

    #[test]
    fn labels_match_ground_truth() {
        let ds = generate(&GenerateConfig {
            count: 50,
            image_size: 32,
            num_classes: 6,
            seed: 7,
        })
        .unwrap();
        for s in &ds.samples {
            let present = s.gt().present(7);
            assert_eq!(s.labels(), &present[1..]);
            assert!(s.labels().iter().any(|&b| b));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_params() {
        let bad = |f: fn(&mut GenerateConfig)| {
            let mut c = GenerateConfig::default();
            f(&mut c);
            generate(&c).is_err()
        };
        assert!(bad(|c| c.count = 0));
        assert!(bad(|c| c.num_classes = 1));
        assert!(bad(|c| c.num_classes = 7));
        assert!(bad(|c| c.image_size = 4));
    }
}
