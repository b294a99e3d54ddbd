use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Shape hyperparameters of the dual-branch model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub cnn_channels: usize,
    /// Foreground classes only; the background is never predicted.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            num_blocks: 4,
            num_heads: 4,
            embed_dim: 64,
            cnn_channels: 32,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that exercises every code path; used for
    /// gradient verification.
    pub fn minimal() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            num_blocks: 1,
            num_heads: 1,
            embed_dim: 8,
            cnn_channels: 4,
            num_classes: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.cnn_channels < 2 {
            return Err(Error::Config("cnn_channels must be at least 2".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Strides of the three conv stages; their product is `patch_size`, so
    /// the CNN output lands on the patch grid.
    pub fn stage_strides(&self) -> [usize; 3] {
        let mut factors = Vec::new();
        let mut p = self.patch_size;
        let mut d = 2;
        while p > 1 {
            while p % d == 0 {
                factors.push(d);
                p /= d;
            }
            d += 1;
        }
        factors.sort_unstable_by(|a, b| b.cmp(a));
        let mut strides = [1usize; 3];
        for f in factors {
            let slot = (0..3).min_by_key(|&i| strides[i]).expect("three stages");
            strides[slot] *= f;
        }
        strides
    }

    pub(crate) fn write_kv(&self, kv: &mut KvFile, prefix: &str) -> Result<()> {
        let fields = [
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("cnn_channels", self.cnn_channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("model_seed", self.seed.to_string()),
        ];
        for (k, v) in fields {
            kv.set(&format!("{prefix}{k}"), &v)?;
        }
        Ok(())
    }

    /// Read fields from `kv`, keeping `self`'s value for absent keys.
    pub(crate) fn read_kv(mut self, kv: &KvFile, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        macro_rules! field {
            ($f:ident, $k:literal) => {
                if let Some(v) = kv.parse_opt(&key($k))? {
                    self.$f = v;
                }
            };
        }
        field!(image_size, "image_size");
        field!(patch_size, "patch_size");
        field!(num_blocks, "num_blocks");
        field!(num_heads, "num_heads");
        field!(embed_dim, "embed_dim");
        field!(cnn_channels, "cnn_channels");
        field!(num_classes, "num_classes");
        field!(seed, "model_seed");
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::minimal().validate().unwrap();
        assert_eq!(ModelConfig::default().num_patches(), 64);
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let cfg = ModelConfig {
            embed_dim: 63,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patch_divisibility_is_enforced() {
        let cfg = ModelConfig {
            image_size: 60,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strides_multiply_to_patch() {
        for p in [1, 2, 4, 6, 8, 12, 16, 32] {
            let cfg = ModelConfig {
                patch_size: p,
                ..ModelConfig::default()
            };
            assert_eq!(cfg.stage_strides().iter().product::<usize>(), p);
        }
        assert_eq!(ModelConfig::default().stage_strides(), [2, 2, 2]);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            seed: 9,
            num_classes: 5,
            ..ModelConfig::minimal()
        };
        let mut kv = KvFile::new();
        cfg.write_kv(&mut kv, "config.").unwrap();
        assert_eq!(ModelConfig::default().read_kv(&kv, "config.").unwrap(), cfg);
    }
}
