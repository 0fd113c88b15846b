//! The commands behind the CLI, plus the in-memory pieces they are built
//! from (training, restoration, scoring) so tests can drive them directly.
//!
//! Output tree under `out_dir`:
//!
//! ```text
//! data/      generate
//! models/    train-ren, train-dcn    <name>.redw, <name>_loss.csv
//! recon/     reconstruct             <stem>_<method>.rsf, <stem>_<method>_fbp.rsf
//! eval/      evaluate                metrics.csv, metrics_meta.csv, preview/*.pgm, profiles/*.csv
//! ablate/    ablate                  ablation.csv, ablation_seeds.csv
//! gradcheck.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::dataset::{derive_seed, drf_label, generate, geometry, load_split, write_dataset, SliceData, Split};
use super::gradcheck::{gradcheck_csv, run_gradchecks, GradCheck};
use super::preview::{profile_csv, write_pgm16};
use super::rsf::{read_image, read_sinogram, write_image, write_sinogram};
use crate::diffusion::ddim::{ddim_reconstruct, NoiseSchedule};
use crate::diffusion::{reconstruct_with, Predictor, ReverseOptions};
use crate::dose::{add_gaussian_noise, denormalize, normalize};
use crate::error::{RedError, Result};
use crate::estimator::{load_checkpoint, save_checkpoint, EstimatorParams, NetPredictor, OptState};
use crate::metrics::{Domain, MetricsRecord, MetricsReport, METRICS_CONVENTIONS};
use crate::schedule::{ResidualSchedule, TimeGrid};
use crate::tomo::{fbp, osem, Image, ProjectionGeometry, Sinogram};
use crate::training::{read_loss_trace, train, train_dcn_from, write_loss_trace, NoisePredictor, Objective, SlicePair, TrainConfig, TrainOutcome};

const REN_TAG: u64 = 0x52_454e;
const DCN_TAG: u64 = 0x44_434e;
const ONE_SHOT_TAG: u64 = 0x31_5348;
const DDIM_TAG: u64 = 0x44_4449;
const NOISE_TAG: u64 = 0x4e_4f49;

/// Paths inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.models().join(format!("{model}.redw"))
    }

    pub fn loss_csv(&self, model: &str) -> PathBuf {
        self.models().join(format!("{model}_loss.csv"))
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| RedError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| RedError::io(path, e))
}

pub fn residual_schedule(cfg: &ExperimentConfig) -> Result<ResidualSchedule> {
    let s = &cfg.schedule;
    ResidualSchedule::new(s.t_max, s.kind, s.beta)
}

pub fn time_grid(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    TimeGrid::new(cfg.schedule.t_s, cfg.schedule.t_max)
}

pub fn noise_schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    let b = &cfg.baseline;
    NoiseSchedule::linear(cfg.schedule.t_max, b.ddim_beta_start, b.ddim_beta_end)
}

// ---------------------------------------------------------------- training

pub fn training_pairs(slices: &[SliceData], drf: f64) -> Result<Vec<SlicePair>> {
    slices
        .par_iter()
        .map(|s| {
            let low = s.low_at(drf).ok_or_else(|| {
                RedError::MissingPrerequisite(format!("{} has no DRF {drf} sinogram", s.name()))
            })?;
            SlicePair::new(&s.full, low)
        })
        .collect()
}

fn train_config(cfg: &ExperimentConfig, tag: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, &[tag]),
        ..cfg.train.clone()
    }
}

/// The drift estimator regresses a drift with pure MSE and has its own
/// step budget.
pub fn dcn_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        n_steps: cfg.dcn_steps,
        w_ssim: 0.0,
        ..train_config(cfg, DCN_TAG)
    }
}

/// Seeds for refresh round `stage`; round 0 keeps the plain seed.
fn staged(mut tc: TrainConfig, stage: usize) -> TrainConfig {
    if stage > 0 {
        tc.seed = derive_seed(tc.seed, &[stage as u64]);
    }
    tc
}

pub fn fit_ren(cfg: &ExperimentConfig, pairs: &[SlicePair]) -> Result<TrainOutcome> {
    fit_ren_stage(cfg, pairs, 0, None)
}

fn fit_ren_stage(
    cfg: &ExperimentConfig,
    pairs: &[SlicePair],
    stage: usize,
    init: Option<EstimatorParams<f32>>,
) -> Result<TrainOutcome> {
    let sched = residual_schedule(cfg)?;
    let mixed = cfg.mixed.enabled.then_some((cfg.mixed.mode, cfg.mixed.sigma));
    let objective = Objective::Residual { sched: &sched, mixed };
    train(pairs, &staged(train_config(cfg, REN_TAG), stage), objective, init)
}

pub fn fit_dcn(cfg: &ExperimentConfig, pairs: &[SlicePair], ren: &NetPredictor) -> Result<TrainOutcome> {
    fit_dcn_stage(cfg, pairs, ren, 0, None)
}

fn fit_dcn_stage(
    cfg: &ExperimentConfig,
    pairs: &[SlicePair],
    ren: &NetPredictor,
    stage: usize,
    init: Option<EstimatorParams<f32>>,
) -> Result<TrainOutcome> {
    let tc = staged(dcn_train_config(cfg), stage);
    train_dcn_from(pairs, ren, &residual_schedule(cfg)?, &tc, init)
}

/// Continues `prev` with `next`, renumbering the appended steps.
fn chain(prev: TrainOutcome, mut next: TrainOutcome) -> TrainOutcome {
    let offset = prev.trace.len();
    for r in &mut next.trace {
        r.step += offset;
    }
    let mut trace = prev.trace;
    trace.append(&mut next.trace);
    TrainOutcome { trace, ..next }
}

/// Drift estimator for a trained residual estimator; with `stages > 1` both
/// are refreshed in alternation, each round continuing from the last.
pub fn fit_staged(
    cfg: &ExperimentConfig,
    pairs: &[SlicePair],
    ren: TrainOutcome,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let sched = residual_schedule(cfg)?;
    let predictor = |o: &TrainOutcome| NetPredictor { params: o.params.clone(), sched: sched.clone() };
    let mut ren = ren;
    let mut dcn = fit_dcn(cfg, pairs, &predictor(&ren))?;
    for stage in 1..cfg.stages {
        let r = fit_ren_stage(cfg, pairs, stage, Some(ren.params.clone()))?;
        ren = chain(ren, r);
        let d = fit_dcn_stage(cfg, pairs, &predictor(&ren), stage, Some(dcn.params.clone()))?;
        dcn = chain(dcn, d);
    }
    Ok((ren, dcn))
}

pub fn fit_one_shot(cfg: &ExperimentConfig, pairs: &[SlicePair]) -> Result<TrainOutcome> {
    let sched = residual_schedule(cfg)?;
    train(pairs, &train_config(cfg, ONE_SHOT_TAG), Objective::OneShot { sched: &sched }, None)
}

pub fn fit_ddim(cfg: &ExperimentConfig, pairs: &[SlicePair]) -> Result<TrainOutcome> {
    let sched = noise_schedule(cfg)?;
    let tc = TrainConfig {
        w_ssim: 0.0,
        ..train_config(cfg, DDIM_TAG)
    };
    train(pairs, &tc, Objective::Noise { sched: &sched }, None)
}

// --------------------------------------------------------------- inference

/// Trained estimators bound to their schedules.
#[derive(Debug, Clone)]
pub struct Models {
    pub ren: NetPredictor,
    pub dcn: Option<NetPredictor>,
    pub one_shot: Option<NetPredictor>,
    pub ddim: Option<NoisePredictor>,
}

impl Models {
    pub fn new(cfg: &ExperimentConfig, ren: EstimatorParams<f32>, dcn: Option<EstimatorParams<f32>>) -> Result<Self> {
        let sched = residual_schedule(cfg)?;
        let bind = |params| NetPredictor {
            params,
            sched: sched.clone(),
        };
        Ok(Self {
            ren: bind(ren),
            dcn: dcn.map(bind),
            one_shot: None,
            ddim: None,
        })
    }
}

/// Seed of the mixed-mode and DDIM noise for one input.
pub fn input_noise_seed(cfg: &ExperimentConfig, slice: &SliceData, drf: f64) -> u64 {
    derive_seed(cfg.seed, &[NOISE_TAG, slice.phantom_seed, drf.to_bits()])
}

/// A low-dose sinogram on the normalized scale, with mixed-mode noise added
/// when enabled.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Sinogram,
    pub record: crate::dose::ScaleRecord,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, low: &Sinogram, noise_seed: u64) -> Result<Self> {
        let (x, record) = normalize(low)?;
        let x = if cfg.mixed.enabled && cfg.mixed.sigma > 0.0 {
            add_gaussian_noise(&x, cfg.mixed.sigma, noise_seed)?
        } else {
            x
        };
        Ok(Self { x, record })
    }

    /// Back to raw scale.
    pub fn restore(&self, x: &Sinogram, clamp: bool) -> Sinogram {
        let mut s = Sinogram {
            scale: None,
            ..x.clone()
        };
        if clamp {
            s.values.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        denormalize(&s, &self.record)
    }

    /// The (possibly noisy) input on the raw scale.
    pub fn input(&self) -> Sinogram {
        self.restore(&self.x, false)
    }
}

/// RED reverse process from a prepared input. `on_step` sees the raw-scale,
/// unclamped states. The result is clamped at 0 and on the raw scale.
pub fn restore_red<F>(cfg: &ExperimentConfig, models: &Models, input: &Prepared, mut on_step: F) -> Result<Sinogram>
where
    F: FnMut(usize, &Sinogram),
{
    let sched = residual_schedule(cfg)?;
    let grid = time_grid(cfg)?;
    let dcn = if cfg.schedule.beta != 0.0 {
        Some(models.dcn.as_ref().ok_or_else(|| {
            RedError::MissingPrerequisite("drift correction is enabled but no drift estimator is loaded".into())
        })? as &dyn Predictor)
    } else {
        None
    };
    let opts = ReverseOptions {
        sign: cfg.schedule.sign,
    };
    let out = reconstruct_with(&input.x, &models.ren, dcn, &sched, &grid, opts, |k, st| {
        on_step(k, &input.restore(&st.x, false))
    })?;
    check_finite(&out, "reconstruction")?;
    Ok(input.restore(&out, true))
}

pub fn restore_one_shot(cfg: &ExperimentConfig, model: &NetPredictor, input: &Prepared) -> Result<Sinogram> {
    let eps = model.predict(&input.x, cfg.schedule.t_max as f64)?;
    let mut x = input.x.clone();
    x.values.iter_mut().zip(&eps.values).for_each(|(v, e)| *v -= e);
    check_finite(&x, "one-shot output")?;
    Ok(input.restore(&x, true))
}

/// DDIM times `t_start = tau_0 > ... > tau_n = 0`, evenly spaced.
pub fn ddim_times(cfg: &ExperimentConfig) -> Vec<f64> {
    let (t0, n) = (cfg.baseline.ddim_t_start as f64, cfg.baseline.ddim_steps);
    (0..=n).map(|k| t0 * (n - k) as f64 / n as f64).collect()
}

pub fn restore_ddim(cfg: &ExperimentConfig, model: &NoisePredictor, input: &Prepared, noise_seed: u64) -> Result<Sinogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ DDIM_TAG);
    let noise: Vec<f32> = (0..input.x.values.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    let out = ddim_reconstruct(&input.x, &noise, model, &noise_schedule(cfg)?, &ddim_times(cfg))?;
    check_finite(&out, "ddim output")?;
    Ok(input.restore(&out, true))
}

fn check_finite(s: &Sinogram, what: &str) -> Result<()> {
    match s.values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(RedError::NonFinite(format!("{what}, bin {i}"))),
        None => Ok(()),
    }
}

/// Sinogram-domain PSNR of the low-dose input and of the RED output for each
/// slice, at dose level `drf`, in slice order.
pub fn sinogram_psnr_pairs(
    cfg: &ExperimentConfig,
    models: &Models,
    test: &[SliceData],
    drf: f64,
) -> Result<Vec<(f64, f64)>> {
    test.par_iter()
        .map(|s| {
            let low = s.low_at(drf).ok_or_else(|| {
                RedError::MissingPrerequisite(format!("{} has no DRF {drf} sinogram", s.name()))
            })?;
            let input = Prepared::new(cfg, low, input_noise_seed(cfg, s, drf))?;
            let out = restore_red(cfg, models, &input, |_, _| {})?;
            let shape = s.full.shape();
            let before = MetricsRecord::score("", Domain::Sinogram, "", &input.input().values, &s.full.values, shape)?;
            let after = MetricsRecord::score("", Domain::Sinogram, "", &out.values, &s.full.values, shape)?;
            Ok((before.psnr.db(), after.psnr.db()))
        })
        .collect()
}

// ---------------------------------------------------------------- commands

/// Generates the dataset; returns the number of manifest rows.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<usize> {
    let ds = generate(cfg, &cfg.data.drfs)?;
    let text = write_dataset(&Layout::new(cfg).data(), &ds)?;
    Ok(text.lines().count() - 1)
}

fn save_model(layout: &Layout, name: &str, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    create_dir(&layout.models())?;
    let (ckpt, csv) = (layout.checkpoint(name), layout.loss_csv(name));
    save_checkpoint(&ckpt, &outcome.params)?;
    write_loss_trace(&csv, &outcome.trace)?;
    Ok(vec![ckpt, csv])
}

/// Loads a checkpoint that must exist and match the configured architecture.
pub fn load_model(cfg: &ExperimentConfig, name: &str) -> Result<EstimatorParams<f32>> {
    let path = Layout::new(cfg).checkpoint(name);
    if !path.is_file() {
        return Err(RedError::MissingPrerequisite(format!(
            "no {name} checkpoint at {}",
            path.display()
        )));
    }
    let params = load_checkpoint(&path)?;
    if params.arch != cfg.train.arch {
        return Err(RedError::ArchMismatch(format!(
            "{} has widths {:?}, kernel {}, time_dim {}; the config asks for widths {:?}, kernel {}, time_dim {}",
            path.display(),
            params.arch.widths,
            params.arch.kernel,
            params.arch.time_dim,
            cfg.train.arch.widths,
            cfg.train.arch.kernel,
            cfg.train.arch.time_dim
        )));
    }
    Ok(params)
}

fn load_train_pairs(cfg: &ExperimentConfig) -> Result<Vec<SlicePair>> {
    let drf = cfg.data.train_drf;
    let slices = load_split(&Layout::new(cfg).data(), Split::Train, Some(&[drf]))?;
    if slices.is_empty() {
        return Err(RedError::MissingPrerequisite("the training split is empty".into()));
    }
    training_pairs(&slices, drf)
}

/// Trains the residual estimator, plus the one-shot and DDIM baselines when
/// toggled. Returns the files written.
pub fn cmd_train_ren(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let cfg = &cfg.effective();
    let layout = Layout::new(cfg);
    let pairs = load_train_pairs(cfg)?;
    let mut files = save_model(&layout, "ren", &fit_ren(cfg, &pairs)?)?;
    if cfg.baseline.one_shot {
        files.extend(save_model(&layout, "one_shot", &fit_one_shot(cfg, &pairs)?)?);
    }
    if cfg.baseline.ddim {
        files.extend(save_model(&layout, "ddim", &fit_ddim(cfg, &pairs)?)?);
    }
    Ok(files)
}

pub fn cmd_train_dcn(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let cfg = &cfg.effective();
    let ren = load_model(cfg, "ren")?;
    let pairs = load_train_pairs(cfg)?;
    let layout = Layout::new(cfg);
    if cfg.stages == 1 {
        let models = Models::new(cfg, ren, None)?;
        return save_model(&layout, "dcn", &fit_dcn(cfg, &pairs, &models.ren)?);
    }
    let trace = read_loss_trace(&layout.loss_csv("ren"))?;
    let prior = TrainOutcome {
        opt: OptState::new(ren.len(), cfg.train.lr, cfg.train.weight_decay, cfg.train.decay_interval),
        params: ren,
        trace,
    };
    let (ren, dcn) = fit_staged(cfg, &pairs, prior)?;
    let mut files = save_model(&layout, "ren", &ren)?;
    files.extend(save_model(&layout, "dcn", &dcn)?);
    Ok(files)
}

/// Loads every checkpoint the configuration needs for inference.
pub fn load_models(cfg: &ExperimentConfig) -> Result<Models> {
    let dcn = if cfg.schedule.beta != 0.0 {
        Some(load_model(cfg, "dcn")?)
    } else {
        None
    };
    let mut models = Models::new(cfg, load_model(cfg, "ren")?, dcn)?;
    let sched = residual_schedule(cfg)?;
    if cfg.baseline.one_shot {
        models.one_shot = Some(NetPredictor {
            params: load_model(cfg, "one_shot")?,
            sched,
        });
    }
    if cfg.baseline.ddim {
        models.ddim = Some(NoisePredictor {
            params: load_model(cfg, "ddim")?,
            t_max: cfg.schedule.t_max,
        });
    }
    Ok(models)
}

struct ReconJob {
    stem: String,
    low: Sinogram,
    noise_seed: u64,
}

/// Reconstructs the held-out split at the training dose level (or the
/// configured single input). Returns the files written.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, trajectory: bool) -> Result<Vec<PathBuf>> {
    let cfg = &cfg.effective();
    let layout = Layout::new(cfg);
    let models = load_models(cfg)?;
    let geom = geometry(cfg)?;
    let drf = cfg.data.train_drf;
    let jobs: Vec<ReconJob> = match &cfg.reconstruct_input {
        Some(path) => vec![ReconJob {
            stem: "input".into(),
            low: read_sinogram(path)?,
            noise_seed: derive_seed(cfg.seed, &[NOISE_TAG]),
        }],
        None => load_split(&layout.data(), Split::Test, Some(&[drf]))?
            .into_iter()
            .map(|s| ReconJob {
                stem: format!("{}_{}", s.name(), drf_label(drf)),
                noise_seed: input_noise_seed(cfg, &s, drf),
                low: s.low.into_iter().next().expect("one dose level loaded").sino,
            })
            .collect(),
    };

    type Outputs = (Vec<(String, Sinogram)>, Vec<Sinogram>);
    let results: Vec<Outputs> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let input = Prepared::new(cfg, &job.low, job.noise_seed)?;
            let mut steps = Vec::new();
            let red = restore_red(cfg, &models, &input, |_, st| {
                if trajectory && i == 0 {
                    steps.push(st.clone());
                }
            })?;
            let mut outs = vec![("red".to_string(), red)];
            if cfg.mixed.enabled {
                outs.push(("noisy".into(), input.input()));
            }
            if let Some(m) = &models.one_shot {
                outs.push(("one_shot".into(), restore_one_shot(cfg, m, &input)?));
            }
            if let Some(m) = &models.ddim {
                outs.push(("ddim".into(), restore_ddim(cfg, m, &input, job.noise_seed)?));
            }
            Ok((outs, steps))
        })
        .collect::<Result<_>>()?;

    create_dir(&layout.recon())?;
    let mut files = Vec::new();
    for (job, (outs, steps)) in jobs.iter().zip(&results) {
        for (method, sino) in outs {
            let base = layout.recon().join(format!("{}_{method}", job.stem));
            let (s_path, i_path) = (base.with_extension("rsf"), PathBuf::from(format!("{}_fbp.rsf", base.display())));
            write_sinogram(&s_path, sino)?;
            write_image(&i_path, &fbp(sino, &geom, cfg.baseline.filter, true)?)?;
            files.extend([s_path, i_path]);
        }
        if !steps.is_empty() {
            let dir = layout.recon().join("trajectory");
            create_dir(&dir)?;
            for (k, st) in steps.iter().enumerate() {
                let p = dir.join(format!("step_{k:02}.rsf"));
                write_sinogram(&p, st)?;
                files.push(p);
            }
        }
    }
    Ok(files)
}

/// Report plus human-readable notes about skipped methods.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub warnings: Vec<String>,
}

const LEARNED: [&str; 4] = ["red", "one_shot", "ddim", "noisy"];

fn masked(values: &[f32], mask: Option<&Image>, shape: (usize, usize)) -> (Vec<f32>, (usize, usize)) {
    match mask {
        Some(m) => {
            let v: Vec<f32> = values.iter().zip(&m.pixels).filter(|(_, &w)| w > 0.0).map(|(&x, _)| x).collect();
            let n = v.len();
            (v, (1, n))
        }
        None => (values.to_vec(), shape),
    }
}

/// Per-slice output of one method at one dose level: `(domain, values)`.
type Scored = Vec<(Domain, Vec<f32>)>;

fn method_outputs(
    cfg: &ExperimentConfig,
    geom: &ProjectionGeometry,
    recon: &Path,
    method: &str,
    stem: &str,
    low: &Sinogram,
) -> std::result::Result<Scored, String> {
    let init = || Image::filled(cfg.data.image_size, cfg.data.image_size, 1.0);
    let run = |r: Result<Scored>| r.map_err(|e| e.to_string());
    match method {
        "low" => Ok(vec![(Domain::Sinogram, low.values.clone())]),
        "osem" if cfg.baseline.osem => run((|| {
            let b = &cfg.baseline;
            let img = osem(low, geom, b.osem_iters, b.osem_subsets, &init())?;
            Ok(vec![(Domain::Image, img.pixels)])
        })()),
        "fbp" if cfg.baseline.fbp => run((|| {
            Ok(vec![(Domain::Image, fbp(low, geom, cfg.baseline.filter, true)?.pixels)])
        })()),
        "osem" | "fbp" => Err(format!("baseline.{method} is off")),
        m if LEARNED.contains(&m) => {
            let s_path = recon.join(format!("{stem}_{m}.rsf"));
            let i_path = recon.join(format!("{stem}_{m}_fbp.rsf"));
            if !s_path.is_file() || !i_path.is_file() {
                return Err(format!("missing {}", s_path.display()));
            }
            run((|| {
                Ok(vec![
                    (Domain::Sinogram, read_sinogram(&s_path)?.values),
                    (Domain::Image, read_image(&i_path)?.pixels),
                ])
            })())
        }
        other => Err(format!("unknown method '{other}'")),
    }
}

/// Scores every configured method at every dose level on the held-out split.
/// Writes `eval/metrics.csv`, previews and profiles of the first slice.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Evaluation> {
    let cfg = &cfg.effective();
    let layout = Layout::new(cfg);
    let geom = geometry(cfg)?;
    let test = load_split(&layout.data(), Split::Test, Some(&cfg.data.drfs))?;
    let mask = cfg.eval_mask.as_deref().map(read_image).transpose()?;
    if let Some(m) = &mask {
        if m.shape() != (cfg.data.image_size, cfg.data.image_size) {
            return Err(RedError::ShapeMismatch {
                expected: (cfg.data.image_size, cfg.data.image_size),
                actual: m.shape(),
            });
        }
    }
    let recon = layout.recon();

    type SliceResult = Vec<(f64, String, std::result::Result<Scored, String>)>;
    let per_slice: Vec<SliceResult> = test
        .par_iter()
        .map(|s| {
            let mut rows = Vec::new();
            for l in &s.low {
                let stem = format!("{}_{}", s.name(), drf_label(l.drf));
                for m in &cfg.eval_methods {
                    rows.push((l.drf, m.clone(), method_outputs(cfg, &geom, &recon, m, &stem, &l.sino)));
                }
            }
            rows
        })
        .collect();

    let mut ev = Evaluation::default();
    for (s, rows) in test.iter().zip(&per_slice) {
        for (drf, method, out) in rows {
            let label = format!("{method}_{}", drf_label(*drf));
            match out {
                Ok(outputs) => {
                    for (domain, values) in outputs {
                        let record = match domain {
                            Domain::Sinogram => {
                                MetricsRecord::score(s.name(), *domain, &label, values, &s.full.values, s.full.shape())?
                            }
                            Domain::Image => {
                                let shape = s.image.shape();
                                let (x, sh) = masked(values, mask.as_ref(), shape);
                                let (r, _) = masked(&s.image.pixels, mask.as_ref(), shape);
                                MetricsRecord::score(s.name(), *domain, &label, &x, &r, sh)?
                            }
                        };
                        ev.report.push(record);
                    }
                }
                Err(why) => {
                    let w = format!("skipping {label}: {why}");
                    if !ev.warnings.iter().any(|x| x.starts_with(&format!("skipping {label}:"))) {
                        ev.warnings.push(w);
                    }
                }
            }
        }
    }

    let dir = layout.eval();
    create_dir(&dir)?;
    ev.report.write_csv(&dir.join("metrics.csv"))?;
    let meta = dir.join("metrics_meta.csv");
    std::fs::write(&meta, METRICS_CONVENTIONS).map_err(|e| RedError::io(&meta, e))?;
    if let (Some(s), Some(rows)) = (test.first(), per_slice.first()) {
        write_previews(&dir, s, rows)?;
    }
    Ok(ev)
}

fn write_previews(dir: &Path, s: &SliceData, rows: &[(f64, String, std::result::Result<Scored, String>)]) -> Result<()> {
    let (pdir, cdir) = (dir.join("preview"), dir.join("profiles"));
    create_dir(&pdir)?;
    create_dir(&cdir)?;
    for l in &s.low {
        let stem = format!("{}_{}", s.name(), drf_label(l.drf));
        for (domain, reference, shape) in [
            (Domain::Sinogram, &s.full.values, s.full.shape()),
            (Domain::Image, &s.image.pixels, s.image.shape()),
        ] {
            let peak = reference.iter().fold(0.0f32, |m, &v| m.max(v));
            let d = domain.as_str();
            write_pgm16(&pdir.join(format!("{stem}_reference_{d}.pgm")), reference, shape, peak)?;
            let mut fields: Vec<(&str, &[f32])> = vec![("reference", reference)];
            for (drf, method, out) in rows {
                if *drf != l.drf {
                    continue;
                }
                for (dm, values) in out.iter().flatten() {
                    if *dm == domain {
                        write_pgm16(&pdir.join(format!("{stem}_{method}_{d}.pgm")), values, shape, peak)?;
                        fields.push((method, values));
                    }
                }
            }
            write_text(&cdir.join(format!("{stem}_{d}.csv")), &profile_csv(&fields, shape)?)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- ablation

pub const ABLATION_VARIANTS: [&str; 4] = ["w/o DC+SL", "w/o DC", "w/o SL", "full"];

/// Mean sinogram-domain scores of one variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantScore {
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

/// Residual and drift estimators trained with and without the SSIM term.
#[derive(Debug, Clone)]
pub struct AblationModels {
    pub with_sl: Models,
    pub without_sl: Models,
}

pub fn fit_ablation_models(cfg: &ExperimentConfig, pairs: &[SlicePair]) -> Result<AblationModels> {
    let fit = |c: &ExperimentConfig| -> Result<Models> {
        let ren = fit_ren(c, pairs)?.params;
        let mut m = Models::new(c, ren, None)?;
        if c.schedule.beta != 0.0 {
            m.dcn = Some(NetPredictor {
                params: fit_dcn(c, pairs, &m.ren)?.params,
                sched: m.ren.sched.clone(),
            });
        }
        Ok(m)
    };
    let mut no_sl = cfg.clone();
    no_sl.train.w_ssim = 0.0;
    Ok(AblationModels {
        with_sl: fit(cfg)?,
        without_sl: fit(&no_sl)?,
    })
}

fn score_variant(cfg: &ExperimentConfig, models: &Models, test: &[SliceData]) -> Result<VariantScore> {
    let drf = cfg.data.train_drf;
    let records: Vec<MetricsRecord> = test
        .par_iter()
        .map(|s| {
            let low = s.low_at(drf).ok_or_else(|| {
                RedError::MissingPrerequisite(format!("{} has no DRF {drf} sinogram", s.name()))
            })?;
            let input = Prepared::new(cfg, low, input_noise_seed(cfg, s, drf))?;
            let out = restore_red(cfg, models, &input, |_, _| {})?;
            MetricsRecord::score(s.name(), Domain::Sinogram, "red", &out.values, &s.full.values, s.full.shape())
        })
        .collect::<Result<_>>()?;
    let report = MetricsReport { records };
    let mean = &report.aggregates()[0];
    Ok(VariantScore {
        psnr: mean.psnr.db(),
        ssim: mean.ssim,
        nrmse: mean.nrmse,
    })
}

/// Scores the four variants in [`ABLATION_VARIANTS`] order.
pub fn score_ablation(cfg: &ExperimentConfig, models: &AblationModels, test: &[SliceData]) -> Result<[VariantScore; 4]> {
    let mut no_dc = cfg.clone();
    no_dc.schedule.beta = 0.0;
    Ok([
        score_variant(&no_dc, &models.without_sl, test)?,
        score_variant(&no_dc, &models.with_sl, test)?,
        score_variant(cfg, &models.without_sl, test)?,
        score_variant(cfg, &models.with_sl, test)?,
    ])
}

pub const ABLATION_HEADER: &str = "variant,drift_correction,ssim_loss,psnr_db,ssim,nrmse";

fn ablation_row(out: &mut String, prefix: &str, variant: usize, s: &VariantScore) {
    let (dc, sl) = (variant >= 2, variant % 2 == 1);
    writeln!(
        out,
        "{prefix}{},{},{},{:.6},{:.6},{:.6}",
        ABLATION_VARIANTS[variant], dc, sl, s.psnr, s.ssim, s.nrmse
    )
    .unwrap();
}

/// Per-seed scores and their means.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub per_seed: Vec<(u64, [VariantScore; 4])>,
    pub mean: [VariantScore; 4],
}

impl Ablation {
    pub fn from_seeds(per_seed: Vec<(u64, [VariantScore; 4])>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mean = std::array::from_fn(|v| VariantScore {
            psnr: per_seed.iter().map(|(_, s)| s[v].psnr).sum::<f64>() / n,
            ssim: per_seed.iter().map(|(_, s)| s[v].ssim).sum::<f64>() / n,
            nrmse: per_seed.iter().map(|(_, s)| s[v].nrmse).sum::<f64>() / n,
        });
        Self { per_seed, mean }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for (v, s) in self.mean.iter().enumerate() {
            ablation_row(&mut out, "", v, s);
        }
        out
    }

    pub fn seeds_csv(&self) -> String {
        let mut out = format!("seed,{ABLATION_HEADER}\n");
        for (seed, scores) in &self.per_seed {
            for (v, s) in scores.iter().enumerate() {
                ablation_row(&mut out, &format!("{seed},"), v, s);
            }
        }
        out
    }
}

/// Trains and scores the four variants for every ablation seed. The seed
/// replaces the training seed; the dataset stays fixed.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Ablation> {
    let layout = Layout::new(cfg);
    let pairs = load_train_pairs(cfg)?;
    let mut test = load_split(&layout.data(), Split::Test, Some(&[cfg.data.train_drf]))?;
    if cfg.ablation.n_test > 0 {
        test.truncate(cfg.ablation.n_test);
    }
    let mut per_seed = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let c = ExperimentConfig { seed, ..cfg.clone() };
        let models = fit_ablation_models(&c, &pairs)?;
        per_seed.push((seed, score_ablation(&c, &models, &test)?));
    }
    let ab = Ablation::from_seeds(per_seed);
    create_dir(&layout.ablate())?;
    write_text(&layout.ablate().join("ablation.csv"), &ab.to_csv())?;
    write_text(&layout.ablate().join("ablation_seeds.csv"), &ab.seeds_csv())?;
    Ok(ab)
}

/// Writes `gradcheck.csv`; any failed check is a numeric failure.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradCheck>> {
    let checks = run_gradchecks(cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("gradcheck.csv"), &gradcheck_csv(&checks))?;
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        return Err(RedError::NonFinite(format!(
            "gradient check {} off by {:.3e}",
            bad.name, bad.max_rel_err
        )));
    }
    Ok(checks)
}
