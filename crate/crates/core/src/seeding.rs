//! Pseudo-label masks from refined CAMs, and mIoU scoring.
//!
//! Each foreground class map is min-max normalized to `[0, 1]` per image.
//! A pixel takes the class with the highest normalized score (lowest id on
//! ties) unless that score is strictly below the hard threshold, in which
//! case it is background (id 0). Foreground class `s` of the CAM (0-based
//! channel) maps to label id `s + 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::resize;
use crate::tensor::Tensor;

/// Per-pixel class ids, row-major. `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::invalid(
                "label_mask",
                format!("{height}x{width} mask cannot hold {} ids", ids.len()),
            ));
        }
        Ok(LabelMask { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMask {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, id: u8) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }

    /// `num_classes` flags: whether each id `0..num_classes` occurs.
    pub fn present(&self, num_classes: usize) -> Vec<bool> {
        let mut seen = vec![false; num_classes];
        for &id in &self.ids {
            if let Some(s) = seen.get_mut(id as usize) {
                *s = true;
            }
        }
        seen
    }

    pub fn check_ids(&self, num_classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= num_classes) {
            Some(bad) => Err(Error::invalid(
                "label_mask",
                format!("class id {bad} ≥ {num_classes}"),
            )),
            None => Ok(()),
        }
    }
}

/// Per-class min-max normalization of a `[K, h, w]` map. Constant maps
/// become all zeros.
pub fn normalize_cam(cam: &Tensor) -> Result<Tensor> {
    let [_, h, w] = cam.shape()[..] else {
        return Err(Error::invalid(
            "normalize_cam",
            format!("expected [K, h, w], got {:?}", cam.shape()),
        ));
    };
    let mut out = cam.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for v in plane.iter_mut() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    Ok(out)
}

fn check_threshold(ht: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ht) {
        return Err(Error::invalid(
            "assign_labels",
            format!("hard threshold {ht} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Argmax over classes, then background where the winning score `< ht`.
pub fn assign_labels(normalized: &Tensor, ht: f64) -> Result<LabelMask> {
    check_threshold(ht)?;
    let [k, h, w] = normalized.shape()[..] else {
        return Err(Error::invalid(
            "assign_labels",
            format!("expected [K, h, w], got {:?}", normalized.shape()),
        ));
    };
    if k > 255 {
        return Err(Error::invalid("assign_labels", format!("{k} classes exceed u8 ids")));
    }
    let data = normalized.data();
    let ids = (0..h * w)
        .map(|px| {
            let mut best = 0;
            let mut best_v = data[px];
            for c in 1..k {
                let v = data[c * h * w + px];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if best_v < ht {
                0
            } else {
                best as u8 + 1
            }
        })
        .collect();
    LabelMask::new(h, w, ids)
}

/// Pushes the planes of classes outside `labels` to -1 so they can neither
/// win the argmax nor clear a threshold. `labels` excludes background.
pub fn gate_labels(normalized: &Tensor, labels: &[bool]) -> Result<Tensor> {
    let [k, h, w] = normalized.shape()[..] else {
        return Err(Error::invalid(
            "gate_labels",
            format!("expected [K, h, w], got {:?}", normalized.shape()),
        ));
    };
    if labels.len() != k {
        return Err(Error::invalid(
            "gate_labels",
            format!("{} labels for {k} class maps", labels.len()),
        ));
    }
    let mut out = normalized.clone();
    for (plane, &on) in out.data_mut().chunks_mut(h * w).zip(labels) {
        if !on {
            plane.fill(-1.0);
        }
    }
    Ok(out)
}

/// Refined CAM at any resolution → pseudo-label mask at `height × width`.
pub fn seed_mask(refined: &Tensor, height: usize, width: usize, ht: f64) -> Result<LabelMask> {
    let up = resize::bilinear(refined, height, width)?;
    assign_labels(&normalize_cam(&up)?, ht)
}

/// [`seed_mask`] restricted to the image-level `labels`.
pub fn seed_mask_gated(
    refined: &Tensor,
    height: usize,
    width: usize,
    ht: f64,
    labels: &[bool],
) -> Result<LabelMask> {
    let up = resize::bilinear(refined, height, width)?;
    assign_labels(&gate_labels(&normalize_cam(&up)?, labels)?, ht)
}

/// Confusion counts, `counts[gt * classes + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "miou",
                &[pred.height, pred.width],
                &[gt.height, gt.width],
            ));
        }
        pred.check_ids(self.classes)?;
        gt.check_ids(self.classes)?;
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "confusion matrix size mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both masks.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let gt_total: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let pred_total: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MiouReport {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { miou, per_class }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// mIoU over `num_classes` ids (background included). Classes absent from
/// both masks are left out of the mean.
pub fn miou(pred: &LabelMask, gt: &LabelMask, num_classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    Ok(cm.report())
}

/// mIoU over a whole set of mask pairs, from one pooled confusion matrix.
pub fn dataset_miou(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "miou",
            format!("{} predictions for {} ground-truth masks", preds.len(), gts.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    Ok(cm.report())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    pub miou: Vec<f64>,
}

impl SweepResult {
    /// `ht,miou` rows sorted by threshold.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(f64, f64)> = self
            .thresholds
            .iter()
            .copied()
            .zip(self.miou.iter().copied())
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = String::from("ht,miou\n");
        for (ht, m) in rows {
            out.push_str(&format!("{ht},{m}\n"));
        }
        out
    }
}

/// mIoU of the whole set at each threshold. CAMs are resized to their
/// ground-truth resolution before normalization.
pub fn sweep(
    cams: &[Tensor],
    gts: &[LabelMask],
    thresholds: &[f64],
    num_classes: usize,
) -> Result<SweepResult> {
    sweep_gated(cams, gts, None, thresholds, num_classes)
}

/// [`sweep`] with optional per-image label gating (see [`gate_labels`]).
pub fn sweep_gated(
    cams: &[Tensor],
    gts: &[LabelMask],
    labels: Option<&[Vec<bool>]>,
    thresholds: &[f64],
    num_classes: usize,
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(Error::invalid("sweep", "empty threshold list"));
    }
    if cams.len() != gts.len() {
        return Err(Error::invalid(
            "sweep",
            format!("{} CAMs for {} masks", cams.len(), gts.len()),
        ));
    }
    if labels.is_some_and(|l| l.len() != cams.len()) {
        return Err(Error::invalid("sweep", "label list length differs from CAM count"));
    }
    for &ht in thresholds {
        check_threshold(ht)?;
    }
    let normalized: Vec<Tensor> = cams
        .par_iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (cam, gt))| {
            let n = normalize_cam(&resize::bilinear(cam, gt.height, gt.width)?)?;
            match labels {
                Some(l) => gate_labels(&n, &l[i]),
                None => Ok(n),
            }
        })
        .collect::<Result<_>>()?;
    let miou = thresholds
        .iter()
        .map(|&ht| {
            let parts: Vec<ConfusionMatrix> = normalized
                .par_iter()
                .zip(gts)
                .map(|(n, gt)| {
                    let mut cm = ConfusionMatrix::new(num_classes);
                    cm.add(&assign_labels(n, ht)?, gt)?;
                    Ok(cm)
                })
                .collect::<Result<_>>()?;
            let mut total = ConfusionMatrix::new(num_classes);
            for p in &parts {
                total.merge(p);
            }
            Ok(total.report().miou)
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        thresholds: thresholds.to_vec(),
        miou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ids: &[u8]) -> LabelMask {
        LabelMask::new(h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let cam = Tensor::new(vec![1, 2, 2], vec![0., 10., 5., 10.]).unwrap();
        assert_eq!(normalize_cam(&cam).unwrap().data(), &[0., 1., 0.5, 1.]);
        let flat = Tensor::full(&[2, 2, 2], 3.0);
        assert!(normalize_cam(&flat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_examples() {
        let px = |a: f64, b: f64| Tensor::new(vec![2, 1, 1], vec![a, b]).unwrap();
        assert_eq!(assign_labels(&px(0.7, 0.3), 0.5).unwrap().ids(), &[1]);
        assert_eq!(assign_labels(&px(0.4, 0.2), 0.5).unwrap().ids(), &[0]);
        assert_eq!(assign_labels(&px(0.0, 0.0), 0.0).unwrap().ids(), &[1]);
        assert_eq!(assign_labels(&px(0.5, 0.5), 0.5).unwrap().ids(), &[1]);
        assert_eq!(assign_labels(&px(0.2, 0.6), 0.5).unwrap().ids(), &[2]);
        assert!(assign_labels(&px(0.2, 0.6), 1.5).is_err());
        assert!(assign_labels(&px(0.2, 0.6), -0.1).is_err());
    }

    #[test]
    fn miou_examples() {
        let a = mask(1, 2, &[0, 1]);
        assert_eq!(miou(&a, &a, 2).unwrap().miou, 1.0);
        let r = miou(&mask(1, 2, &[0, 1]), &mask(1, 2, &[0, 0]), 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
        let bg = mask(2, 2, &[0; 4]);
        let r = miou(&bg, &bg, 5).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class.iter().flatten().count(), 1);
    }

    #[test]
    fn miou_errors() {
        assert!(miou(&mask(1, 2, &[0, 1]), &mask(2, 1, &[0, 1]), 2).is_err());
        assert!(miou(&mask(1, 2, &[0, 3]), &mask(1, 2, &[0, 1]), 2).is_err());
    }

    #[test]
    fn sweep_matches_standalone_pipeline() {
        let cam = Tensor::from_fn(&[2, 4, 4], |i| ((i * 7) % 11) as f64);
        let gt = mask(4, 4, &[0, 0, 1, 1, 0, 2, 2, 1, 0, 2, 2, 0, 0, 0, 0, 1]);
        let thresholds = [0.0, 0.3, 0.3, 1.0];
        let res = sweep(&[cam.clone()], &[gt.clone()], &thresholds, 3).unwrap();
        assert_eq!(res.miou[1], res.miou[2]);
        for (ht, m) in thresholds.iter().zip(&res.miou) {
            let pred = assign_labels(&normalize_cam(&cam).unwrap(), *ht).unwrap();
            assert_eq!(*m, miou(&pred, &gt, 3).unwrap().miou);
        }
        let top = assign_labels(&normalize_cam(&cam).unwrap(), 1.0).unwrap();
        let n = normalize_cam(&cam).unwrap();
        for px in 0..16 {
            let is_max = n.data()[px] == 1.0 || n.data()[16 + px] == 1.0;
            assert_eq!(top.ids()[px] != 0, is_max);
        }
        assert!(sweep(&[cam], &[gt], &[], 3).is_err());
    }

    #[test]
    fn csv_is_sorted() {
        let r = SweepResult {
            thresholds: vec![0.5, 0.1],
            miou: vec![0.2, 0.4],
        };
        assert_eq!(r.to_csv(), "ht,miou\n0.1,0.4\n0.5,0.2\n");
    }
}
