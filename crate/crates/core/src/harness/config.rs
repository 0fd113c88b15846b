//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! seed = 7
//! data.drfs = 4, 20, 100
//! train.lr = 1e-3
//! ```
//!
//! Keys are dotted section paths. Values may be wrapped in double quotes.
//! Lists are comma separated. Unknown keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::{CorrectionSign, MixedMode};
use crate::error::{RedError, Result};
use crate::estimator::Activation;
use crate::metrics::{SsimConfig, SsimMode};
use crate::schedule::ScheduleKind;
use crate::tomo::FilterKind;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub n_angles: usize,
    pub n_bins: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub drfs: Vec<f64>,
    /// Dose reduction factor the learned models train and reconstruct at.
    pub train_drf: f64,
    pub count_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub t_s: usize,
    pub beta: f64,
    pub sign: CorrectionSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedConfig {
    pub enabled: bool,
    pub mode: MixedMode,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub osem: bool,
    pub fbp: bool,
    pub ddim: bool,
    pub one_shot: bool,
    pub osem_iters: usize,
    pub osem_subsets: usize,
    pub filter: FilterKind,
    /// The DDIM sampler starts from `x_L` noised to this time.
    pub ddim_t_start: usize,
    pub ddim_steps: usize,
    pub ddim_beta_start: f64,
    pub ddim_beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Held-out slices scored per variant; 0 uses the whole test split.
    pub n_test: usize,
    /// Train and reconstruct without drift correction (`beta = 0`).
    pub no_dc: bool,
    /// Train the residual estimator without the SSIM term.
    pub no_sl: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Steps for the drift estimator; the residual estimator uses `train.n_steps`.
    pub dcn_steps: usize,
    /// Alternating refresh rounds; round 1 is the plain REN-then-DCN pass.
    pub stages: usize,
    pub mixed: MixedConfig,
    pub baseline: BaselineConfig,
    pub ablation: AblationConfig,
    /// Single sinogram to reconstruct instead of the held-out split.
    pub reconstruct_input: Option<PathBuf>,
    /// Methods scored by `evaluate`.
    pub eval_methods: Vec<String>,
    /// Image RSF; nonzero pixels restrict image-domain metrics.
    pub eval_mask: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("red-out"),
            data: DataConfig {
                image_size: 64,
                n_angles: 96,
                n_bins: 96,
                n_train: 512,
                n_test: 64,
                drfs: vec![4.0, 20.0, 100.0],
                train_drf: 20.0,
                count_scale: 1e6,
            },
            schedule: ScheduleConfig {
                kind: ScheduleKind::Linear,
                t_max: 500,
                t_s: 30,
                beta: 0.05,
                sign: CorrectionSign::Plus,
            },
            // Whole-patch SSIM as a loss lowers sinogram PSNR.
            train: TrainConfig {
                n_steps: 800,
                ssim: SsimConfig::for_range(1.0, SsimMode::Windowed),
                ..TrainConfig::default()
            },
            dcn_steps: 800,
            stages: 1,
            mixed: MixedConfig {
                enabled: false,
                mode: MixedMode::Supervised,
                sigma: 0.05,
            },
            baseline: BaselineConfig {
                osem: true,
                fbp: true,
                ddim: false,
                one_shot: false,
                osem_iters: 10,
                osem_subsets: 4,
                filter: FilterKind::Ramp,
                ddim_t_start: 40,
                ddim_steps: 10,
                ddim_beta_start: 1e-4,
                ddim_beta_end: 0.02,
            },
            ablation: AblationConfig {
                seeds: vec![0, 1, 2],
                n_test: 0,
                no_dc: false,
                no_sl: false,
            },
            reconstruct_input: None,
            eval_methods: ["low", "osem", "fbp", "red"].map(String::from).to_vec(),
            eval_mask: None,
        }
    }
}

/// Method names accepted by `eval.methods`.
pub const METHODS: [&str; 7] = ["low", "osem", "fbp", "red", "one_shot", "ddim", "noisy"];

fn config_err(msg: impl Into<String>) -> RedError {
    RedError::Config(msg.into())
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| config_err(format!("{key} = '{raw}': {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(config_err(format!("{key} = '{raw}': expected a boolean"))),
    }
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_activation(key: &str, raw: &str) -> Result<Activation> {
    match raw {
        "silu" => Ok(Activation::Silu),
        "identity" => Ok(Activation::Identity),
        _ => Err(config_err(format!("{key} = '{raw}': expected silu or identity"))),
    }
}

/// Splits the text into `key -> value`, rejecting malformed and repeated lines.
fn tokenize(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected 'key = value'", no + 1)))?;
        let key = key.trim();
        let mut value = value.trim();
        if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            value = &value[1..value.len() - 1];
        }
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(config_err(format!("line {}: bad key '{key}'", no + 1)));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key '{key}'", no + 1)));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = tokenize(text)?;
        let mut c = Self::default();
        let mut take = |key: &str| map.remove(key);

        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = parse_value($key, &v)?;
                }
            };
            ($key:literal, $field:expr, $parser:expr) => {
                if let Some(v) = take($key) {
                    $field = $parser($key, &v)?;
                }
            };
        }

        set!("seed", c.seed);
        if let Some(v) = take("out_dir") {
            c.out_dir = PathBuf::from(v);
        }

        set!("data.image_size", c.data.image_size);
        set!("data.n_angles", c.data.n_angles);
        set!("data.n_bins", c.data.n_bins);
        set!("data.n_train", c.data.n_train);
        set!("data.n_test", c.data.n_test);
        set!("data.drfs", c.data.drfs, parse_list);
        set!("data.train_drf", c.data.train_drf);
        set!("data.count_scale", c.data.count_scale);

        set!("schedule.kind", c.schedule.kind);
        set!("schedule.t_max", c.schedule.t_max);
        set!("schedule.t_s", c.schedule.t_s);
        set!("schedule.beta", c.schedule.beta);
        set!("schedule.sign", c.schedule.sign);

        let t = &mut c.train;
        set!("train.steps", t.n_steps);
        set!("train.dcn_steps", c.dcn_steps);
        set!("train.stages", c.stages);
        set!("train.batch", t.batch);
        set!("train.lr", t.lr);
        set!("train.weight_decay", t.weight_decay);
        set!("train.decay_interval", t.decay_interval);
        set!("train.w_mse", t.w_mse);
        set!("train.w_ssim", t.w_ssim);
        set!("train.ssim_mode", t.ssim.mode);
        set!("train.c1", t.ssim.c1);
        set!("train.c2", t.ssim.c2);
        set!("train.lambda_lo", t.lambda_lo);
        set!("train.lambda_hi", t.lambda_hi);
        set!("train.coeff", t.coeff);
        set!("train.patch", t.patch);
        set!("net.widths", t.arch.widths, parse_list);
        set!("net.kernel", t.arch.kernel);
        set!("net.time_dim", t.arch.time_dim);
        set!("net.activation", t.arch.activation, parse_activation);

        set!("mixed.enabled", c.mixed.enabled, parse_bool);
        set!("mixed.mode", c.mixed.mode);
        set!("mixed.sigma", c.mixed.sigma);

        let b = &mut c.baseline;
        set!("baseline.osem", b.osem, parse_bool);
        set!("baseline.fbp", b.fbp, parse_bool);
        set!("baseline.ddim", b.ddim, parse_bool);
        set!("baseline.one_shot", b.one_shot, parse_bool);
        set!("baseline.osem_iters", b.osem_iters);
        set!("baseline.osem_subsets", b.osem_subsets);
        set!("baseline.filter", b.filter);
        set!("baseline.ddim_t_start", b.ddim_t_start);
        set!("baseline.ddim_steps", b.ddim_steps);
        set!("baseline.ddim_beta_start", b.ddim_beta_start);
        set!("baseline.ddim_beta_end", b.ddim_beta_end);

        set!("ablate.seeds", c.ablation.seeds, parse_list);
        set!("ablate.n_test", c.ablation.n_test);
        set!("ablate.no_dc", c.ablation.no_dc, parse_bool);
        set!("ablate.no_sl", c.ablation.no_sl, parse_bool);

        if let Some(v) = take("reconstruct.input") {
            c.reconstruct_input = Some(PathBuf::from(v));
        }
        set!("eval.methods", c.eval_methods, parse_list);
        if let Some(v) = take("eval.mask") {
            c.eval_mask = Some(PathBuf::from(v));
        }

        if let Some(key) = map.keys().next() {
            return Err(config_err(format!("unknown key '{key}'")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RedError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.image_size == 0 || d.n_angles < 2 || d.n_bins < 4 {
            return Err(config_err("grid needs image_size >= 1, n_angles >= 2, n_bins >= 4"));
        }
        if let Some(bad) = d.drfs.iter().chain([&d.train_drf]).find(|&&v| !(v >= 1.0)) {
            return Err(config_err(format!("dose reduction factors must be >= 1, got {bad}")));
        }
        if !d.drfs.contains(&d.train_drf) {
            return Err(config_err(format!("data.train_drf {} is not in data.drfs", d.train_drf)));
        }
        if !(d.count_scale > 0.0) {
            return Err(config_err("data.count_scale must be positive"));
        }
        if self.stages == 0 {
            return Err(config_err("train.stages must be >= 1"));
        }
        let s = &self.schedule;
        if s.t_max == 0 || s.t_s == 0 || s.t_s > s.t_max {
            return Err(config_err("need 1 <= schedule.t_s <= schedule.t_max"));
        }
        if !(0.0..=1.0).contains(&s.beta) {
            return Err(config_err("schedule.beta must lie in [0, 1]"));
        }
        if !(self.mixed.sigma >= 0.0) {
            return Err(config_err("mixed.sigma must be >= 0"));
        }
        let b = &self.baseline;
        if b.osem_subsets == 0 || b.osem_subsets > d.n_angles {
            return Err(config_err("baseline.osem_subsets must lie in [1, n_angles]"));
        }
        if b.ddim_t_start == 0 || b.ddim_t_start > s.t_max || b.ddim_steps == 0 {
            return Err(config_err("need 1 <= baseline.ddim_t_start <= t_max and ddim_steps >= 1"));
        }
        if let Some(m) = self.eval_methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            return Err(config_err(format!("unknown method '{m}' in eval.methods")));
        }
        self.train.validate().map_err(|e| config_err(e.to_string()))
    }

    /// The configuration with the ablation toggles folded in.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if c.ablation.no_dc {
            c.schedule.beta = 0.0;
        }
        if c.ablation.no_sl {
            c.train.w_ssim = 0.0;
        }
        c
    }
}
