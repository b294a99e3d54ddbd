//! On-disk dataset layout: a CSV manifest plus one snapshot (image) and one
//! PGM (mask) per sample.

use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::pgm::{self, Gray};
use crate::seeding::LabelMask;
use crate::snapshot;

pub const DATASET_MANIFEST: &str = "manifest.txt";
const HEADER: &str = "index,image,mask,labels";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
    /// One flag per foreground class.
    pub labels: Vec<bool>,
}

fn plain_file_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\'])
}

/// Parse one `index,image,mask,labels` row.
pub fn parse_manifest_line(line: &str) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    let [index, image, mask, labels] = fields[..] else {
        return Err(Error::Decode(format!(
            "manifest row needs 4 fields, got {}: {line:?}",
            fields.len()
        )));
    };
    let index = index
        .parse()
        .map_err(|_| Error::Decode(format!("bad index {index:?}")))?;
    for f in [image, mask] {
        if !plain_file_name(f) {
            return Err(Error::Decode(format!("{f:?} is not a plain file name")));
        }
    }
    let labels = labels
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::Decode(format!("bad label bitstring {labels:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.is_empty() {
        return Err(Error::Decode("empty label bitstring".into()));
    }
    Ok(ManifestEntry {
        index,
        image: image.to_string(),
        mask: mask.to_string(),
        labels,
    })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{HEADER}\n");
    for (i, s) in ds.samples.iter().enumerate() {
        let image = format!("{i:05}.cftn");
        let mask = format!("{i:05}_mask.pgm");
        snapshot::save(&s.image, &dir.join(&image))?;
        let gt = s.gt();
        pgm::save(
            &Gray {
                width: gt.width(),
                height: gt.height(),
                pixels: gt.ids().to_vec(),
            },
            &dir.join(&mask),
        )?;
        manifest.push_str(&format!("{i},{image},{mask},{}\n", s.label_bits()));
    }
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |msg: String| Error::Corrupt {
        path: path.clone(),
        msg,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(corrupt(format!("expected header {HEADER:?}")));
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let entry = parse_manifest_line(line).map_err(|e| corrupt(format!("row {}: {e}", n + 1)))?;
        if entry.index != n {
            return Err(corrupt(format!("row {} has index {}", n + 1, entry.index)));
        }
        let image = snapshot::load(&dir.join(&entry.image))?;
        let mask_path = dir.join(&entry.mask);
        let g = pgm::load(&mask_path)?;
        let gt = LabelMask::new(g.height, g.width, g.pixels).map_err(|e| e.at(&mask_path))?;
        let sample = Sample::new(image, gt, entry.labels.len()).map_err(|e| Error::Corrupt {
            path: dir.join(&entry.image),
            msg: e.to_string(),
        })?;
        if sample.labels() != entry.labels {
            return Err(corrupt(format!(
                "row {}: labels {} disagree with mask {}",
                n + 1,
                entry
                    .labels
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect::<String>(),
                sample.label_bits()
            )));
        }
        samples.push(sample);
    }
    let first = samples
        .first()
        .ok_or_else(|| corrupt("dataset has no samples".into()))?;
    let (num_classes, image_size) = (first.num_classes(), first.gt().height());
    if let Some(bad) = samples
        .iter()
        .position(|s| s.num_classes() != num_classes || s.gt().height() != image_size || s.gt().width() != image_size)
    {
        return Err(corrupt(format!("sample {bad} differs in class count or size")));
    }
    Ok(Dataset {
        num_classes,
        image_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenerateConfig};

    #[test]
    fn round_trip_is_exact() {
        let ds = generate(&GenerateConfig {
            count: 4,
            image_size: 16,
            ..GenerateConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn manifest_rows() {
        let e = parse_manifest_line("3,a.cftn,a.pgm,101").unwrap();
        assert_eq!(e.index, 3);
        assert_eq!(e.labels, vec![true, false, true]);
        assert!(parse_manifest_line("3,a.cftn,a.pgm").is_err());
        assert!(parse_manifest_line("x,a.cftn,a.pgm,1").is_err());
        assert!(parse_manifest_line("1,../a.cftn,a.pgm,1").is_err());
        assert!(parse_manifest_line("1,a.cftn,a.pgm,12").is_err());
    }

    #[test]
    fn missing_mask_names_file() {
        let ds = generate(&GenerateConfig {
            count: 2,
            image_size: 16,
            ..GenerateConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("00001_mask.pgm")).unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("00001_mask.pgm"), "{msg}");
    }
}
