use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::resize;
use crate::seeding::LabelMask;
use crate::tensor::Tensor;

/// Grey value used where a shrunken image is padded.
const PAD_VALUE: f64 = 0.5;

/// Rescale by `scale`, then center-crop or pad back to the original size.
///
/// The image is resampled bilinearly, the mask by nearest neighbour, so mask
/// ids stay a subset of the input ids (plus background from padding). Labels
/// are recomputed from the new mask.
pub fn rescale(sample: &Sample, scale: f64) -> Result<Sample> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("rescale", format!("scale must be > 0, got {scale}")));
    }
    let (h, w) = (sample.gt().height(), sample.gt().width());
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    if (nh, nw) == (h, w) {
        return Ok(sample.clone());
    }
    let img = resize::bilinear(&sample.image, nh, nw)?;
    let ids = resize::nearest(sample.gt().ids(), h, w, nh, nw);

    // offset of the resized content inside the output (may be negative)
    let oy = (h as isize - nh as isize) / 2;
    let ox = (w as isize - nw as isize) / 2;
    let mut out = vec![PAD_VALUE; 3 * h * w];
    let mut out_ids = vec![0u8; h * w];
    for y in 0..h {
        let sy = y as isize - oy;
        if sy < 0 || sy >= nh as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - ox;
            if sx < 0 || sx >= nw as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            out_ids[y * w + x] = ids[sy * nw + sx];
            for c in 0..3 {
                out[(c * h + y) * w + x] = img.data()[(c * nh + sy) * nw + sx];
            }
        }
    }
    Sample::new(
        Tensor::new(vec![3, h, w], out)?,
        LabelMask::new(h, w, out_ids)?,
        sample.num_classes(),
    )
}

/// Random rescale with a factor drawn from `[0.75, 1.25]`.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    rescale(sample, rng.gen_range(0.75..=1.25))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenerateConfig};

    fn one() -> Sample {
        generate(&GenerateConfig {
            count: 1,
            image_size: 32,
            ..GenerateConfig::default()
        })
        .unwrap()
        .samples
        .remove(0)
    }

    #[test]
    fn unit_scale_is_identity() {
        let s = one();
        assert_eq!(rescale(&s, 1.0).unwrap(), s);
    }

    #[test]
    fn keeps_size_and_pads_with_background() {
        let s = one();
        let small = rescale(&s, 0.5).unwrap();
        assert_eq!(small.image.shape(), s.image.shape());
        assert_eq!(small.gt().get(0, 0), 0);
        assert_eq!(small.image.at(&[0, 0, 0]), PAD_VALUE);
        let big = rescale(&s, 1.25).unwrap();
        assert_eq!(big.gt().height(), 32);
        assert!(rescale(&s, 0.0).is_err());
    }
}
