use std::fs;
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde_json::json;

use camforge::data::{self, Dataset};
use camforge::model::{self, load_checkpoint, save_checkpoint, ModelState};
use camforge::objective::{self, NoiseMode, TrainConfig};
use camforge::pgm::{self, Gray};
use camforge::runconfig::RunConfig;
use camforge::seeding::{self, LabelMask, MiouReport};
use camforge::{snapshot, verify, Error, Tensor};

/// Some gradient check exceeded its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: {0}")]
pub struct VerificationFailed(pub String);

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let dir = &cfg.data_dir;
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())).into());
    }
    let ds = data::load_dataset(dir)?;
    if ds.num_classes != cfg.model.num_classes || ds.image_size != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset {} has {} classes at {} px, config expects {} at {} px",
            dir.display(),
            ds.num_classes,
            ds.image_size,
            cfg.model.num_classes,
            cfg.model.image_size
        ))
        .into());
    }
    Ok(ds)
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> anyhow::Result<ModelState> {
    let dir = &cfg.checkpoint;
    if !dir.is_dir() {
        return Err(Error::Config(format!("checkpoint directory {} does not exist", dir.display())).into());
    }
    let state = load_checkpoint(dir)?;
    let mc = state.config();
    if mc.num_classes != ds.num_classes || mc.image_size != ds.image_size {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for {} classes at {} px, dataset has {} at {} px",
            dir.display(),
            mc.num_classes,
            mc.image_size,
            ds.num_classes,
            ds.image_size
        ))
        .into());
    }
    Ok(state)
}

/// Refined CAMs of every image, on the patch grid.
fn refined_cams(state: &ModelState, ds: &Dataset, scales: &[usize]) -> anyhow::Result<Vec<Tensor>> {
    Ok(ds
        .samples
        .par_iter()
        .map(|s| model::infer_multiscale(state, &s.image, scales).map(|inf| inf.refined))
        .collect::<Result<_, _>>()?)
}

fn seed_masks(cams: &[Tensor], ds: &Dataset, cfg: &RunConfig) -> anyhow::Result<Vec<LabelMask>> {
    Ok(cams
        .par_iter()
        .zip(&ds.samples)
        .map(|(cam, s)| {
            let (h, w) = (s.gt().height(), s.gt().width());
            if cfg.label_gate {
                seeding::seed_mask_gated(cam, h, w, cfg.ht, s.labels())
            } else {
                seeding::seed_mask(cam, h, w, cfg.ht)
            }
        })
        .collect::<Result<_, _>>()?)
}

fn report_json(report: &MiouReport) -> serde_json::Value {
    json!({
        "miou": report.miou,
        "per_class_iou": report.per_class,
    })
}

fn mask_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("{i:05}.pgm"))
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = data::generate(&cfg.generate_config())?;
    data::save_dataset(&ds, &cfg.data_dir)?;
    println!(
        "wrote {} samples ({} classes, {} px) to {}",
        ds.len(),
        ds.num_classes,
        ds.image_size,
        cfg.data_dir.display()
    );
    Ok(())
}

fn train_model(cfg: &RunConfig, ds: &Dataset, train: &TrainConfig) -> anyhow::Result<objective::TrainOutcome> {
    let state = ModelState::init(cfg.model.clone())?;
    let outcome = objective::train_with_progress(state, &ds.samples, train, |epoch, mean| {
        eprintln!("epoch {:>3}/{}: mean loss {mean:.6}", epoch + 1, train.epochs);
    })?;
    Ok(outcome)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_data(cfg)?;
    create_dir(&cfg.out_dir)?;
    let outcome = train_model(cfg, &ds, &cfg.train)?;
    save_checkpoint(&outcome.state, &cfg.checkpoint)?;
    write(&cfg.out_dir.join("loss.csv"), objective::loss_csv(&outcome.log))?;
    let mut epochs = String::from("epoch,mean_total\n");
    for (e, m) in outcome.epoch_means.iter().enumerate() {
        epochs.push_str(&format!("{e},{m}\n"));
    }
    write(&cfg.out_dir.join("epochs.csv"), epochs)?;
    write(&cfg.out_dir.join("run.cfg"), cfg.render())?;
    println!(
        "trained {} epochs (noise {}); final epoch loss {:.6}; checkpoint {}",
        cfg.train.epochs,
        cfg.train.loss.noise,
        outcome.epoch_means.last().copied().unwrap_or(f64::NAN),
        cfg.checkpoint.display()
    );
    Ok(())
}

pub fn seed(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_data(cfg)?;
    let state = load_model(cfg, &ds)?;
    let scales = cfg.inference_scales();
    let cams = refined_cams(&state, &ds, &scales)?;
    let masks = seed_masks(&cams, &ds, cfg)?;
    let dir = cfg.out_dir.join("masks");
    create_dir(&dir)?;
    for (i, m) in masks.iter().enumerate() {
        pgm::save(
            &Gray {
                width: m.width(),
                height: m.height(),
                pixels: m.ids().to_vec(),
            },
            &mask_path(&dir, i),
        )?;
    }
    let report = seeding::dataset_miou(&masks, &ds.gts(), ds.num_classes + 1)?;
    let mut metrics = report_json(&report);
    metrics["ht"] = json!(cfg.ht);
    metrics["label_gate"] = json!(cfg.label_gate);
    metrics["scales"] = json!(scales);
    metrics["images"] = json!(ds.len());
    write(&cfg.out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    println!("seed mIoU {:.4} at ht {} over {} images", report.miou, cfg.ht, ds.len());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_data(cfg)?;
    let dir = cfg.out_dir.join("masks");
    let masks = (0..ds.len())
        .map(|i| {
            let path = mask_path(&dir, i);
            let g = pgm::load(&path)?;
            LabelMask::new(g.height, g.width, g.pixels).map_err(|e| Error::Corrupt {
                path,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = seeding::dataset_miou(&masks, &ds.gts(), ds.num_classes + 1)?;
    let mut metrics = report_json(&report);
    metrics["images"] = json!(ds.len());
    let text = serde_json::to_string_pretty(&metrics)? + "\n";
    write(&cfg.out_dir.join("eval.json"), &text)?;
    print!("{text}");
    Ok(())
}

/// Line plot of mIoU against threshold, black on white.
fn sweep_plot(result: &seeding::SweepResult) -> Gray {
    const W: usize = 181;
    const H: usize = 101;
    let mut pixels = vec![255u8; W * H];
    let mut points: Vec<(f64, f64)> = result
        .thresholds
        .iter()
        .copied()
        .zip(result.miou.iter().copied())
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let to_px = |(t, m): (f64, f64)| {
        let x = (t * (W - 1) as f64).round() as usize;
        let y = ((1.0 - m) * (H - 1) as f64).round() as usize;
        (x.min(W - 1), y.min(H - 1))
    };
    for x in 0..W {
        pixels[(H - 1) * W + x] = 160;
    }
    for y in 0..H {
        pixels[y * W] = 160;
    }
    let mut prev: Option<(usize, usize)> = None;
    for p in points {
        let (x1, y1) = to_px(p);
        if let Some((x0, y0)) = prev {
            let steps = x1.abs_diff(x0).max(y1.abs_diff(y0)).max(1);
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                let x = (x0 as f64 + f * (x1 as f64 - x0 as f64)).round() as usize;
                let y = (y0 as f64 + f * (y1 as f64 - y0 as f64)).round() as usize;
                pixels[y * W + x] = 0;
            }
        }
        pixels[y1 * W + x1] = 0;
        prev = Some((x1, y1));
    }
    Gray {
        width: W,
        height: H,
        pixels,
    }
}

pub fn sweep(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_data(cfg)?;
    let state = load_model(cfg, &ds)?;
    let cams = refined_cams(&state, &ds, &cfg.inference_scales())?;
    let labels: Vec<Vec<bool>> = ds.samples.iter().map(|s| s.labels().to_vec()).collect();
    let result = seeding::sweep_gated(
        &cams,
        &ds.gts(),
        cfg.label_gate.then_some(&labels[..]),
        &cfg.thresholds,
        ds.num_classes + 1,
    )?;
    create_dir(&cfg.out_dir)?;
    let csv = result.to_csv();
    write(&cfg.out_dir.join("sweep.csv"), &csv)?;
    pgm::save(&sweep_plot(&result), &cfg.out_dir.join("sweep.pgm"))?;
    print!("{csv}");
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_data(cfg)?;
    create_dir(&cfg.out_dir)?;
    let modes = [NoiseMode::Off, NoiseMode::Multiplier(1.0), NoiseMode::Multiplier(2.0)];
    let scales = cfg.inference_scales();
    let mut csv = String::from("mode,miou\n");
    let mut scores = Vec::new();
    for mode in modes {
        let mut train = cfg.train.clone();
        train.loss.noise = mode;
        eprintln!("== noise {mode}");
        let outcome = train_model(cfg, &ds, &train)?;
        write(
            &cfg.out_dir.join(format!("loss_noise_{mode}.csv")),
            objective::loss_csv(&outcome.log),
        )?;
        let cams = refined_cams(&outcome.state, &ds, &scales)?;
        let masks = seed_masks(&cams, &ds, cfg)?;
        let report = seeding::dataset_miou(&masks, &ds.gts(), ds.num_classes + 1)?;
        csv.push_str(&format!("{mode},{}\n", report.miou));
        scores.push((mode, report.miou));
    }
    write(&cfg.out_dir.join("ablation.csv"), &csv)?;
    println!("{:<14} {:>8}", "noise", "mIoU");
    for (mode, m) in &scores {
        let label = match mode {
            NoiseMode::Off => "without noise".to_string(),
            NoiseMode::Multiplier(k) => format!("k = {k}"),
        };
        println!("{label:<14} {m:>8.4}");
    }
    let holds = scores[0].1 < scores[1].1;
    println!(
        "expected ordering without < k=1: {}",
        if holds { "holds" } else { "does not hold" }
    );
    Ok(())
}

pub fn gradcheck(seed: u64, corrupt: bool) -> anyhow::Result<()> {
    let results = verify::run_all(seed, corrupt)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<14} max rel error {:.3e}  {status}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {:e}", results.len(), verify::TOLERANCE);
        Ok(())
    } else {
        Err(VerificationFailed(failed.join(", ")).into())
    }
}

pub fn dump_attn(cfg: &RunConfig) -> anyhow::Result<()> {
    let ds = load_data(cfg)?;
    let state = load_model(cfg, &ds)?;
    let sample = ds.samples.get(cfg.sample_index).ok_or_else(|| {
        Error::Config(format!(
            "sample_index {} out of range ({} images)",
            cfg.sample_index,
            ds.len()
        ))
    })?;
    let art = model::forward(&state, &sample.image)?;
    let fused = art.attention.fuse()?;
    let dir = cfg.out_dir.join("attention");
    create_dir(&dir)?;
    snapshot::save(art.attention.weights(), &dir.join("stack.cftn"))?;
    for (name, m) in [
        ("a", &fused.sum),
        ("a_star", &fused.sum_star),
        ("a_bar", &fused.mean),
        ("a_bar_star", &fused.mean_star),
    ] {
        snapshot::save(m, &dir.join(format!("{name}.cftn")))?;
        pgm::save(&pgm::heatmap(m)?, &dir.join(format!("{name}.pgm")))?;
    }

    // class-token attention to each patch, summed over blocks, on the grid
    let grid = state.config().grid();
    let cls_row = fused.sum.narrow(0, 0, 1)?.narrow(1, 1, grid * grid)?;
    pgm::save(&pgm::heatmap(&cls_row.reshape(&[grid, grid])?)?, &dir.join("cls_to_patches.pgm"))?;
    println!(
        "wrote attention of image {} ({} blocks x {} heads) to {}",
        cfg.sample_index,
        art.attention.num_blocks(),
        art.attention.num_heads(),
        dir.display()
    );
    Ok(())
}
