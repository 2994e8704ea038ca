//! Subcommand implementations. Each reads its inputs from files and writes
//! its outputs to files, so commands compose through the filesystem only.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cli::{Command, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{self, KeypointPair};
use crate::flow::{epe, estimate_flow, FlowField};
use crate::io::image::normalize;
use crate::io::{self, Image};
use crate::matcher::{argmax, candidate_window, score_candidates, FeatureMap};
use crate::model::{Fusion, Mode, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{self, Dataset, FileDataset, LogRow, SyntheticDataset, TrainConfig, ValidationSet};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => cmd_train(&c.resolve()?).map(|s| {
            println!(
                "trained {} iterations, final loss {:.6}, held-out top-1 {}",
                s.iterations,
                s.final_loss,
                s.top1.map_or("n/a".to_string(), |v| format!("{v:.4}"))
            );
        }),
        Command::Flow {
            common,
            checkpoint,
            source,
            target,
            out,
            filtered,
        } => cmd_flow(
            &common.resolve()?,
            &checkpoint,
            &source,
            &target,
            &out,
            filtered.as_deref(),
        ),
        Command::EvalFlow { pred, gt, mask, out } => cmd_eval_flow(&pred, &gt, mask.as_deref(), out.as_deref()),
        Command::EvalPck {
            keypoints,
            predictions,
            alphas,
            out,
        } => {
            let alphas = match alphas {
                Some(a) => a
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("`alphas`: cannot parse `{v}`")))
                    })
                    .collect::<Result<Vec<f64>>>()?,
                None => eval::default_alphas(),
            };
            cmd_eval_pck(&keypoints, &predictions, &alphas, out.as_deref())
        }
        Command::Attention {
            checkpoint,
            image,
            prefix,
        } => cmd_attention(&checkpoint, &image, &prefix).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Synth(c) => cmd_synth(&c.resolve()?).map(|_| ()),
        Command::Match {
            common,
            checkpoint,
            source,
            target,
            row,
            col,
        } => {
            let cfg = common.resolve()?;
            cmd_match(
                &cfg,
                &checkpoint,
                &source,
                &target,
                (row, col),
                std::io::stdout().lock(),
            )
        }
        Command::Ablation(c) => cmd_ablation(&c.resolve()?).map(|_| ()),
    }
}

/// `C x H x W` tensor from a PGM/PPM, collapsing colour to gray for
/// single-channel models.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = io::read_pnm(path)?;
    if channels == 3 && img.channels == 1 {
        return Err(Error::Incompatible(format!(
            "{}: model expects colour input, image is grayscale",
            path.display()
        )));
    }
    Ok(img.to_tensor(channels == 1))
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Box::new(File::create(p).map_err(|e| Error::io(p, e))?)
        }
        None => Box::new(std::io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Descriptors for one image in inference mode.
pub fn describe(model: &ModelParams<f32>, image: &Tensor<f32>) -> Result<FeatureMap> {
    FeatureMap::from_chw(&model.features(&normalize(image), Mode::Infer)?)
}

pub struct TrainSummary {
    pub iterations: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub top1: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Mean loss of the first `n` logged steps.
pub fn initial_loss(log: &[LogRow], n: usize) -> f64 {
    let k = n.min(log.len()).max(1);
    log.iter().take(k).map(|r| r.loss).sum::<f64>() / k as f64
}

/// Mean loss of the last `n` logged steps.
pub fn final_loss(log: &[LogRow], n: usize) -> f64 {
    let k = n.min(log.len()).max(1);
    log.iter().rev().take(k).map(|r| r.loss).sum::<f64>() / k as f64
}

fn datasets(cfg: &RunConfig) -> Result<(Box<dyn Dataset>, Option<ValidationSet>)> {
    let t = &cfg.train;
    let gray = t.model.in_channels == 1;
    match &cfg.train_list {
        Some(list) => {
            let train = FileDataset::from_list(list, gray)?;
            let val = match &cfg.validation_list {
                Some(v) if t.validation_pairs > 0 => {
                    let held = FileDataset::from_list(v, gray)?;
                    let mut vc = t.clone();
                    vc.validation_pairs = vc.validation_pairs.min(held.entries.len());
                    Some(ValidationSet::build(&held, &vc, t.seed)?)
                }
                _ => None,
            };
            Ok((Box::new(train), val))
        }
        None => {
            let train = SyntheticDataset {
                config: t.synth.clone(),
                seed: t.seed,
                stream: 0,
            };
            let held = SyntheticDataset {
                stream: 1,
                ..train.clone()
            };
            let val = if t.validation_pairs > 0 {
                Some(ValidationSet::build(&held, t, t.seed)?)
            } else {
                None
            };
            Ok((Box::new(train), val))
        }
    }
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv_writer(Some(path))?;
    w.write_record(["iteration", "lr", "loss", "val_top1"])?;
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.val_top1.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    flush(w)
}

fn train_with(
    cfg: &RunConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(trainer::TrainOutcome, Option<f64>)> {
    let (data, val) = datasets(cfg)?;
    let outcome = trainer::train_loop(train, data.as_ref(), val.as_ref(), out_dir)?;
    let top1 = match &val {
        Some(v) => Some(v.top1(&outcome.model)?),
        None => None,
    };
    Ok((outcome, top1))
}

/// Trains from `cfg`; writes checkpoints, `train_log.csv` and the resolved
/// `run.cfg` to `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_bytes(&dir.join("run.cfg"), cfg.to_text().as_bytes())?;
    let (outcome, top1) = train_with(cfg, &cfg.train, Some(dir))?;
    write_log(&dir.join("train_log.csv"), &outcome.log)?;
    Ok(TrainSummary {
        iterations: outcome.optim.iteration,
        initial_loss: initial_loss(&outcome.log, 10),
        final_loss: final_loss(&outcome.log, 50),
        top1,
        checkpoints: outcome.checkpoints,
    })
}

/// Features of both images, matching in both directions, consistency check
/// and hole filling. Returns the filtered and filled flow.
pub fn flow_between(
    model: &ModelParams<f32>,
    source: &Tensor<f32>,
    target: &Tensor<f32>,
    radius: (usize, usize),
    threshold: f32,
) -> Result<(FlowField, FlowField)> {
    if source.shape() != target.shape() {
        return Err(Error::shape(format!(
            "source {:?} and target {:?} differ",
            source.shape(),
            target.shape()
        )));
    }
    let fs = describe(model, source)?;
    let ft = describe(model, target)?;
    let est = estimate_flow(&fs, &ft, radius.0, radius.1, threshold)?;
    Ok((est.filtered, est.filled))
}

pub fn cmd_flow(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    out: &Path,
    filtered_out: Option<&Path>,
) -> Result<()> {
    let (model, _) = io::load_checkpoint(checkpoint)?;
    let c = model.config.in_channels;
    let (filtered, filled) = flow_between(
        &model,
        &load_image(source, c)?,
        &load_image(target, c)?,
        cfg.radius,
        cfg.fb_threshold,
    )?;
    if let Some(p) = filtered_out {
        io::write_flo(p, &filtered)?;
    }
    io::write_flo(out, &filled)
}

pub struct FlowScores {
    pub epe: f64,
    pub pixels: usize,
    pub coverage: f64,
    pub epe_masked: Option<f64>,
    pub masked_pixels: usize,
}

pub fn score_flow(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<FlowScores> {
    let both: Vec<bool> = pred.valid.iter().zip(&gt.valid).map(|(&a, &b)| a && b).collect();
    let pixels = both.iter().filter(|&&b| b).count();
    let e = epe(pred, gt, &both)?;
    let (epe_masked, masked_pixels) = match mask {
        Some(m) => {
            if m.len() != both.len() {
                return Err(Error::shape("mask and flow sizes differ"));
            }
            let sel: Vec<bool> = both.iter().zip(m).map(|(&a, &b)| a && b).collect();
            let n = sel.iter().filter(|&&b| b).count();
            (if n > 0 { Some(epe(pred, gt, &sel)?) } else { None }, n)
        }
        None => (None, 0),
    };
    Ok(FlowScores {
        epe: e,
        pixels,
        coverage: pixels as f64 / gt.valid_count().max(1) as f64,
        epe_masked,
        masked_pixels,
    })
}

pub fn cmd_eval_flow(pred: &Path, gt: &Path, mask: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let pred = io::read_flo(pred)?;
    let gt = io::read_flo(gt)?;
    let mask = match mask {
        Some(p) => {
            let img = io::read_pnm(p)?;
            if (img.width, img.height) != (gt.width, gt.height) {
                return Err(Error::shape(format!(
                    "mask {}x{} vs flow {}x{}",
                    img.width, img.height, gt.width, gt.height
                )));
            }
            Some(
                img.data
                    .chunks(img.channels)
                    .map(|px| px.iter().any(|&v| v > 0))
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let s = score_flow(&pred, &gt, mask.as_deref())?;
    let mut w = csv_writer(out)?;
    w.write_record(["epe", "pixels", "coverage", "epe_masked", "masked_pixels"])?;
    w.write_record([
        s.epe.to_string(),
        s.pixels.to_string(),
        s.coverage.to_string(),
        s.epe_masked.map_or(String::new(), |v| v.to_string()),
        s.masked_pixels.to_string(),
    ])?;
    flush(w)
}

fn read_csv_rows(path: &Path, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == *c)
                .ok_or_else(|| Error::invalid(format!("{}: missing column `{c}`", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = idx
            .iter()
            .map(|&i| {
                let v = rec.get(i).unwrap_or("").trim();
                v.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: row {}: cannot parse `{v}`", path.display(), n + 1)))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_eval_pck(keypoints: &Path, predictions: &Path, alphas: &[f64], out: Option<&Path>) -> Result<()> {
    let kp = read_csv_rows(
        keypoints,
        &[
            "src_x", "src_y", "tgt_x", "tgt_y", "visible", "src_w", "src_h", "tgt_w", "tgt_h",
        ],
    )?;
    let pred = read_csv_rows(predictions, &["pred_x", "pred_y"])?;
    if kp.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} keypoints but {} predictions",
            kp.len(),
            pred.len()
        )));
    }
    let pairs: Vec<(KeypointPair, f64)> = kp
        .iter()
        .zip(&pred)
        .map(|(k, p)| {
            (
                KeypointPair {
                    source: (k[0], k[1]),
                    target: (k[2], k[3]),
                    predicted: (p[0], p[1]),
                    visible: k[4] != 0.0,
                },
                eval::pck_length(k[5], k[6], k[7], k[8]),
            )
        })
        .collect();
    let curve = eval::pck_curve(&pairs, alphas)?;
    let mut w = csv_writer(out)?;
    w.write_record(["alpha", "pck"])?;
    for (a, v) in curve {
        w.write_record([a.to_string(), v.to_string()])?;
    }
    flush(w)
}

pub fn cmd_attention(checkpoint: &Path, image: &Path, prefix: &Path) -> Result<Vec<PathBuf>> {
    let (model, _) = io::load_checkpoint(checkpoint)?;
    let img = load_image(image, model.config.in_channels)?;
    let att = model.attention(&normalize(&img), Mode::Infer)?;
    io::export_attention(&att, prefix)
}

/// Writes `source`, `target` (`.pgm` or `.ppm`) and `flow.flo` to
/// `out_dir`; returns their paths.
pub fn cmd_synth(cfg: &RunConfig) -> Result<[PathBuf; 3]> {
    let pair = io::synth_pair(&cfg.train.synth, cfg.train.seed)?;
    let ext = if cfg.train.synth.channels == 1 { "pgm" } else { "ppm" };
    let dir = &cfg.out_dir;
    let paths = [
        dir.join(format!("source.{ext}")),
        dir.join(format!("target.{ext}")),
        dir.join("flow.flo"),
    ];
    io::write_pnm(&paths[0], &Image::from_tensor(&pair.source)?)?;
    io::write_pnm(&paths[1], &Image::from_tensor(&pair.target)?)?;
    io::write_flo(&paths[2], &pair.flow)?;
    Ok(paths)
}

pub fn cmd_match(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    pixel: (usize, usize),
    out: impl Write,
) -> Result<()> {
    let (model, _) = io::load_checkpoint(checkpoint)?;
    let c = model.config.in_channels;
    let fs = describe(&model, &load_image(source, c)?)?;
    let ft = describe(&model, &load_image(target, c)?)?;
    if pixel.0 >= fs.height() || pixel.1 >= fs.width() {
        return Err(Error::invalid(format!(
            "pixel {pixel:?} outside {}x{} source",
            fs.height(),
            fs.width()
        )));
    }
    let cands = candidate_window(pixel, cfg.radius.0, cfg.radius.1, ft.height(), ft.width())?;
    let scores = score_candidates(fs.at(pixel), &ft.gather(&cands.targets))?;
    let (best, _) = argmax(&scores.0).expect("window holds the pixel itself");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "row", "col", "score", "best"])?;
    for (i, (&(r, c), s)) in cands.targets.iter().zip(&scores.0).enumerate() {
        w.write_record([
            i.to_string(),
            r.to_string(),
            c.to_string(),
            s.to_string(),
            ((i == best) as u8).to_string(),
        ])?;
    }
    flush(w)
}

pub struct AblationRow {
    pub variant: &'static str,
    pub scales: Vec<f64>,
    pub fusion: Fusion,
    pub output_dim: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub top1: f64,
}

/// Single-scale, concatenation and attention fusion trained and evaluated
/// with the same data, seed and schedule. Writes `out_dir/ablation.csv`.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let base = &cfg.train;
    if base.validation_pairs == 0 {
        return Err(Error::Config("ablation needs `validation_pairs` > 0".into()));
    }
    let variants = [
        ("single", vec![1.0], Fusion::Attention),
        ("concat", base.model.scales.clone(), Fusion::Concat),
        ("attention", base.model.scales.clone(), Fusion::Attention),
    ];
    let mut rows = Vec::new();
    for (variant, scales, fusion) in variants {
        let mut t = base.clone();
        t.model.scales = scales;
        t.model.fusion = fusion;
        let (outcome, top1) = train_with(cfg, &t, None)?;
        rows.push(AblationRow {
            variant,
            output_dim: t.model.output_dim(),
            scales: t.model.scales,
            fusion,
            initial_loss: initial_loss(&outcome.log, 10),
            final_loss: final_loss(&outcome.log, 50),
            top1: top1.expect("validation set present"),
        });
    }
    let path = cfg.out_dir.join("ablation.csv");
    let mut w = csv_writer(Some(&path))?;
    w.write_record([
        "variant",
        "scales",
        "fusion",
        "output_dim",
        "iterations",
        "initial_loss",
        "final_loss",
        "top1",
    ])?;
    for r in &rows {
        let scales: Vec<String> = r.scales.iter().map(|s| s.to_string()).collect();
        w.write_record([
            r.variant.to_string(),
            scales.join(" "),
            r.fusion.to_string(),
            r.output_dim.to_string(),
            base.iterations.to_string(),
            r.initial_loss.to_string(),
            r.final_loss.to_string(),
            r.top1.to_string(),
        ])?;
    }
    flush(w)?;
    Ok(rows)
}
