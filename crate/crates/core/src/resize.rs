//! Image and map resampling with half-pixel centers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize of a `[c, h, w]` tensor.
pub fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::invalid(
            "bilinear",
            format!("expected [c, h, w], got {:?}", x.shape()),
        ));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear", "output size must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let data = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let sy = source_coord(oy, out_h, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = source_coord(ox, out_w, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Nearest-neighbour resize of a row-major `h×w` grid of labels.
pub fn nearest<T: Copy>(grid: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    assert_eq!(grid.len(), h * w, "grid size mismatch");
    let pick = |dst: usize, dst_len: usize, src_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = pick(oy, out_h, h);
        for ox in 0..out_w {
            out.push(grid[sy * w + pick(ox, out_w, w)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        assert_eq!(bilinear(&x, 3, 3).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[1, 4, 4], 0.7);
        let y = bilinear(&x, 7, 9).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let x = Tensor::from_fn(&[1, 1, 4], |i| i as f64);
        let y = bilinear(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[0.5, 2.5]);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let g = [1u8, 2, 3, 4];
        assert_eq!(nearest(&g, 2, 2, 4, 4), vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert_eq!(nearest(&g, 2, 2, 2, 2), g.to_vec());
    }
}
