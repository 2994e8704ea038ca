//! `key = value` run configuration shared by every subcommand.
//!
//! Values are applied in order: built-in defaults, then the config file,
//! then command-line flags. Keys use underscores; the matching flag is the
//! key with dashes (`lr_step` and `--lr-step`).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Fusion, ModelConfig, SCALES_X1, SCALES_X2, SCALES_X4};
use crate::trainer::{SearchWindow, TrainConfig};

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "scales",
    "filters",
    "channels",
    "fusion",
    "negatives",
    "window",
    "batch",
    "lr",
    "lr_factor",
    "lr_step",
    "momentum",
    "iterations",
    "seed",
    "checkpoint_interval",
    "validation_interval",
    "validation_pairs",
    "validation_triplets",
    "train_list",
    "validation_list",
    "out_dir",
    "width",
    "height",
    "max_flow",
    "flow",
    "regions",
    "brightness",
    "noise",
    "contrast_floor",
    "radius",
    "fb_threshold",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Pair list for file-backed training; synthetic pairs when absent.
    pub train_list: Option<PathBuf>,
    /// Held-out pair list for file-backed training.
    pub validation_list: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Matching window for dense flow, `(radius_y, radius_x)`. Also bounds
    /// the displacements of generated pairs.
    pub radius: (usize, usize),
    pub fb_threshold: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            train_list: None,
            validation_list: None,
            out_dir: PathBuf::from("."),
            radius: (8, 8),
            fb_threshold: 3.0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v)).collect()
}

pub fn parse_scales(value: &str) -> Result<Vec<f64>> {
    match value.trim() {
        "x1" => Ok(SCALES_X1.to_vec()),
        "x2" => Ok(SCALES_X2.to_vec()),
        "x4" => Ok(SCALES_X4.to_vec()),
        v => list("scales", v),
    }
}

/// `r`, `ry,rx` or `up,down,left,right`.
pub fn parse_window(value: &str) -> Result<SearchWindow> {
    let v: Vec<usize> = list("window", value)?;
    match v[..] {
        [r] => Ok(SearchWindow::symmetric(r, r)),
        [ry, rx] => Ok(SearchWindow::symmetric(ry, rx)),
        [up, down, left, right] => Ok(SearchWindow { up, down, left, right }),
        _ => Err(Error::Config(format!(
            "`window`: expected 1, 2 or 4 radii, got `{value}`"
        ))),
    }
}

fn parse_radius(value: &str) -> Result<(usize, usize)> {
    let v: Vec<usize> = list("radius", value)?;
    match v[..] {
        [r] => Ok((r, r)),
        [ry, rx] => Ok((ry, rx)),
        _ => Err(Error::Config(format!("`radius`: expected 1 or 2 radii, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut t.synth;
        match key {
            "scales" => m.scales = parse_scales(value)?,
            "filters" => m.filters = num(key, value)?,
            "channels" => {
                let c: usize = num(key, value)?;
                if !(c == 1 || c == 3) {
                    return Err(Error::Config(format!("`channels` must be 1 or 3, got {c}")));
                }
                m.in_channels = c;
                s.channels = c;
            }
            "fusion" => m.fusion = value.trim().parse::<Fusion>()?,
            "negatives" => t.negatives = num(key, value)?,
            "window" => t.window = parse_window(value)?,
            "batch" => t.batch = num(key, value)?,
            "lr" => t.lr.base = num(key, value)?,
            "lr_factor" => t.lr.factor = num(key, value)?,
            "lr_step" => t.lr.step = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "iterations" => t.iterations = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = num(key, value)?,
            "validation_interval" => t.validation_interval = num(key, value)?,
            "validation_pairs" => t.validation_pairs = num(key, value)?,
            "validation_triplets" => t.validation_triplets = num(key, value)?,
            "train_list" => self.train_list = Some(PathBuf::from(value.trim())),
            "validation_list" => self.validation_list = Some(PathBuf::from(value.trim())),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "width" => s.width = num(key, value)?,
            "height" => s.height = num(key, value)?,
            "max_flow" => s.max_flow = num(key, value)?,
            "flow" => {
                s.flow = match list::<i32>(key, value)?[..] {
                    [u, v] => Some((u, v)),
                    _ => return Err(Error::Config(format!("`flow`: expected `u,v`, got `{value}`"))),
                }
            }
            "regions" => s.regions = num(key, value)?,
            "brightness" => s.brightness = num(key, value)?,
            "noise" => s.noise_std = num(key, value)?,
            "contrast_floor" => s.contrast_floor = num(key, value)?,
            "radius" => {
                self.radius = parse_radius(value)?;
                s.radius = self.radius.0.max(self.radius.1);
            }
            "fb_threshold" => self.fb_threshold = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let key = key.trim().replace('-', "_");
            self.set(&key, value.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        t.model.validate()?;
        if t.batch == 0 {
            return Err(Error::Config("`batch` must be positive".into()));
        }
        if t.lr.step == 0 || !(t.lr.factor > 0.0) || !(t.lr.base >= 0.0) {
            return Err(Error::Config(
                "learning-rate schedule needs lr >= 0, lr_factor > 0, lr_step > 0".into(),
            ));
        }
        if !(self.fb_threshold >= 0.0) {
            return Err(Error::Config("`fb_threshold` must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }

    /// Config file text reproducing this configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &t.synth;
        let w = t.window;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("scales = {}", join(&t.model.scales)),
            format!("filters = {}", t.model.filters),
            format!("channels = {}", t.model.in_channels),
            format!("fusion = {}", t.model.fusion),
            format!("negatives = {}", t.negatives),
            format!("window = {},{},{},{}", w.up, w.down, w.left, w.right),
            format!("batch = {}", t.batch),
            format!("lr = {}", t.lr.base),
            format!("lr_factor = {}", t.lr.factor),
            format!("lr_step = {}", t.lr.step),
            format!("momentum = {}", t.momentum),
            format!("iterations = {}", t.iterations),
            format!("seed = {}", t.seed),
            format!("checkpoint_interval = {}", t.checkpoint_interval),
            format!("validation_interval = {}", t.validation_interval),
            format!("validation_pairs = {}", t.validation_pairs),
            format!("validation_triplets = {}", t.validation_triplets),
            format!("out_dir = {}", self.out_dir.display()),
            format!("width = {}", s.width),
            format!("height = {}", s.height),
            format!("max_flow = {}", s.max_flow),
            format!("regions = {}", s.regions),
            format!("brightness = {}", s.brightness),
            format!("noise = {}", s.noise_std),
            format!("contrast_floor = {}", s.contrast_floor),
            format!("radius = {},{}", self.radius.0, self.radius.1),
            format!("fb_threshold = {}", self.fb_threshold),
        ];
        if let Some((u, v)) = s.flow {
            lines.push(format!("flow = {u},{v}"));
        }
        if let Some(p) = &self.train_list {
            lines.push(format!("train_list = {}", p.display()));
        }
        if let Some(p) = &self.validation_list {
            lines.push(format!("validation_list = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }
}
