//! End-to-end stages behind the command-line tool: dataset generation,
//! degradation, training, sampling, baselines and evaluation.
//!
//! Every stage writes into its own output directory. The directory carries an
//! `INCOMPLETE` marker while the stage runs, and on success a `manifest.json`
//! plus a `config.toml` snapshot from which the stage can be re-run.

pub mod config;

pub use config::{DataConfig, EvalConfig, GridConfig, RunConfig, SampleConfig};

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{upsample_envcf, Baseline};
use crate::denoiser::{condition_input, init_params, raster_to_feat, train, Checkpoint, TrainObserver, TrainOutcome, TrainState};
use crate::error::{Error, Result};
use crate::grid::io::{read_envcf, write_envcf, RasterMeta};
use crate::grid::{downsample, EnvCf, Role};
use crate::metrics::{evaluate, Report};
use crate::rng::derive_seed;
use crate::sampler::{sample_batch, sample_with_snapshots, SampleOptions};
use crate::synth::{gen_dataset, Dataset};
use crate::tensor::Feat;

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const TABLE_FILE: &str = "report.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Degrade,
    Train,
    Sample,
    Baseline,
    Eval,
    Bench,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Degrade => "degrade",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Baseline => "baseline",
            Stage::Eval => "eval",
            Stage::Bench => "bench",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failure tagged with the stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// Process exit status: 2 config, 3 data, 4 training, 5 sampling.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Generation(_) | Error::UndefinedReference(_) => 3,
            Error::TrainingFault { .. } => 4,
            Error::SamplingFault { .. } => 5,
            _ => match self.stage {
                Stage::Train => 4,
                Stage::Sample => 5,
                Stage::Bench | Stage::GenData | Stage::Degrade | Stage::Baseline | Stage::Eval => 3,
            },
        }
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Reconstruction methods compared in a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Nearest,
    Bilinear,
    Kriging,
    Rbf,
    Cdiff,
}

impl Method {
    /// Report order.
    pub const ALL: [Method; 5] = [Method::Nearest, Method::Bilinear, Method::Kriging, Method::Rbf, Method::Cdiff];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Nearest => "nearest",
            Method::Bilinear => "bilinear",
            Method::Kriging => "kriging",
            Method::Rbf => "rbf",
            Method::Cdiff => "cdiff",
        }
    }

    pub fn baseline(&self) -> Option<Baseline> {
        match self {
            Method::Nearest => Some(Baseline::Nearest),
            Method::Bilinear => Some(Baseline::Bilinear),
            Method::Kriging => Some(Baseline::Kriging),
            Method::Rbf => Some(Baseline::Rbf),
            Method::Cdiff => None,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected nearest, bilinear, kriging, rbf or cdiff")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metadata written beside every stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    /// Inputs, relative to the output directory where possible.
    pub inputs: Vec<String>,
    /// Command that regenerates this directory from inside it.
    pub rerun: String,
}

impl Manifest {
    fn new(stage: Stage, cfg: &RunConfig, out: &Path, inputs: &[&Path], extra: &str) -> Self {
        let seeds = vec![
            ("data".to_string(), cfg.data.seed),
            ("train".to_string(), cfg.train.seed),
            ("sample".to_string(), cfg.sample.seed),
        ];
        let inputs: Vec<String> = inputs.iter().map(|p| relative_to(p, out)).collect();
        // Baseline outputs live at `run/outputs/{method}` and are produced by
        // `bench`, which takes the run directory.
        let (command, out_arg) = match stage {
            Stage::Baseline => ("bench", "../.."),
            _ => (stage.name(), "."),
        };
        let mut rerun = format!("cdiff {command} --config {CONFIG_FILE}");
        for (flag, v) in stage_input_flags(stage).iter().zip(&inputs) {
            rerun.push_str(&format!(" {flag} {v}"));
        }
        rerun.push_str(&format!(" --out {out_arg}"));
        if !extra.is_empty() {
            rerun.push(' ');
            rerun.push_str(extra);
        }
        Manifest {
            stage,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seeds,
            inputs,
            rerun,
        }
    }
}

fn stage_input_flags(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::GenData => &[],
        Stage::Degrade => &["--input"],
        Stage::Train | Stage::Baseline | Stage::Eval | Stage::Bench => &["--data"],
        Stage::Sample => &["--data", "--checkpoint"],
    }
}

/// `path` expressed relative to the directory `base`; unchanged when one is
/// absolute and the other is not.
fn relative_to(path: &Path, base: &Path) -> String {
    if path.is_absolute() != base.is_absolute() {
        return path.display().to_string();
    }
    let (p, b): (Vec<_>, Vec<_>) = (path.components().collect(), base.components().collect());
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &p[common..] {
        rel.push(c);
    }
    rel.display().to_string()
}

/// Create `dir` and mark it incomplete.
pub fn begin_output(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, b"stage did not finish\n").map_err(|e| Error::io(&marker, e))
}

/// Write the manifest and config snapshot, then clear the marker.
pub fn finish_output(dir: &Path, cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    let m = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&m, text + "\n").map_err(|e| Error::io(&m, e))?;
    let c = dir.join(CONFIG_FILE);
    std::fs::write(&c, cfg.to_toml()).map_err(|e| Error::io(&c, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && !dir.join(INCOMPLETE_MARKER).exists()
}

/// Run `f` on a single-threaded pool when `serial` is set.
pub fn with_parallelism<T: Send>(serial: bool, f: impl FnOnce() -> T + Send) -> T {
    if serial {
        rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("single-thread pool builds").install(f)
    } else {
        f()
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    begin_output(out)?;
    let ds = gen_dataset(cfg.data.n_pairs, cfg.grid.hr()?, cfg.grid.factor, &cfg.data.city(), &cfg.simulator, cfg.data.seed)?;
    ds.write(out)?;
    finish_output(out, cfg, &Manifest::new(Stage::GenData, cfg, out, &[], ""))?;
    Ok(ds)
}

/// Load a dataset and check it against the configured grid and factor.
pub fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    if dir.join(INCOMPLETE_MARKER).exists() {
        return Err(Error::format(dir, "dataset directory is marked incomplete"));
    }
    let ds = Dataset::load(dir)?;
    if ds.is_empty() {
        return Err(Error::format(dir, "dataset has no pairs"));
    }
    for (i, p) in ds.pairs.iter().enumerate() {
        if p.hr.side() != cfg.grid.hr_resolution || p.factor() != cfg.grid.factor {
            return Err(Error::format(
                dir,
                format!(
                    "pair {i} is {}→{} but the config expects {}→{}",
                    p.lr.side(),
                    p.hr.side(),
                    cfg.grid.hr_resolution / cfg.grid.factor,
                    cfg.grid.hr_resolution
                ),
            ));
        }
    }
    Ok(ds)
}

/// Validation indices that are evaluated, in order.
pub fn eval_indices(cfg: &RunConfig, ds: &Dataset) -> Vec<usize> {
    let n = if cfg.eval.max_items == 0 { usize::MAX } else { cfg.eval.max_items };
    ds.split.validation.iter().copied().take(n).collect()
}

fn png_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Decimate HR EnvCF rasters (a file or every PNG in a directory) by the
/// configured factor.
pub fn degrade(cfg: &RunConfig, input: &Path, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let files = png_paths(input)?;
    begin_output(out)?;
    let mapping = cfg.simulator.mapping()?;
    for path in &files {
        let (hr, meta) = read_envcf(path, Role::Hr)?;
        let lr = downsample(&hr, cfg.grid.factor)?;
        let bs = meta.and_then(|m| m.bs_cell).map(|(a, b)| (a / cfg.grid.factor, b / cfg.grid.factor));
        let name = path.file_name().expect("listed files have names");
        write_envcf(&out.join(name), &lr, &RasterMeta::new(&lr, mapping, bs))?;
    }
    finish_output(out, cfg, &Manifest::new(Stage::Degrade, cfg, out, &[input], ""))?;
    Ok(files.len())
}

/// Training pairs `(HR target, bicubic condition)` for the training split.
pub fn training_pairs(ds: &Dataset) -> Vec<(Feat<f32>, Feat<f32>)> {
    ds.train().map(|p| (raster_to_feat(p.hr.pixels()), condition_input(p.lr.pixels(), p.factor()))).collect()
}

struct StageObserver<'a> {
    log: BufWriter<File>,
    log_path: PathBuf,
    started: Instant,
    ckpt_path: PathBuf,
    cfg: &'a RunConfig,
    inner: &'a mut dyn TrainObserver,
}

impl TrainObserver for StageObserver<'_> {
    fn on_step(&mut self, step: u64, loss: f64) -> Result<()> {
        writeln!(self.log, "{step},{loss:.8},{:.3}", self.started.elapsed().as_secs_f64())
            .map_err(|e| Error::io(&self.log_path, e))?;
        self.inner.on_step(step, loss)
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        checkpoint_of(state, self.cfg).save(&self.ckpt_path)?;
        self.inner.on_checkpoint(state)
    }
}

fn checkpoint_of(state: &TrainState, cfg: &RunConfig) -> Checkpoint {
    Checkpoint { state: state.clone(), schedule: cfg.schedule, config_hash: cfg.hash() }
}

/// Train from a fresh initialization. Writes `checkpoint.bin` and the loss
/// log; on a training fault the last good state is saved before returning.
pub fn train_stage(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<(Checkpoint, TrainOutcome)> {
    cfg.validate()?;
    let ds = load_data(cfg, data_dir)?;
    let pairs = training_pairs(&ds);
    let schedule = cfg.schedule.build()?;
    begin_output(out)?;
    let params = init_params::<f32>(&cfg.denoiser, cfg.train.seed)?;
    let mut state = TrainState::new(params, cfg.train.adam, cfg.train.ema);
    let log_path = out.join(LOSS_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "step,loss,wall_s").map_err(|e| Error::io(&log_path, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut obs = StageObserver { log, log_path, started: Instant::now(), ckpt_path: ckpt_path.clone(), cfg, inner: observer };
    let result = train(&pairs, &schedule, &mut state, &cfg.train, &mut obs);
    obs.log.flush().map_err(|e| Error::io(&obs.log_path, e))?;
    let ck = checkpoint_of(&state, cfg);
    ck.save(&ckpt_path)?;
    let outcome = result?;
    finish_output(out, cfg, &Manifest::new(Stage::Train, cfg, out, &[data_dir], ""))?;
    Ok((ck, outcome))
}

fn write_outputs(cfg: &RunConfig, out: &Path, indices: &[usize], outputs: &[EnvCf]) -> Result<()> {
    let mapping = cfg.simulator.mapping()?;
    for (&i, f) in indices.iter().zip(outputs) {
        write_envcf(&out.join(format!("{i}.png")), f, &RasterMeta::new(f, mapping, None))?;
    }
    Ok(())
}

/// Reconstruct the evaluated validation items with the diffusion model.
/// With `snapshot_every = Some(k)`, intermediate states every `k` steps are
/// written under `snapshots/{index}/`.
pub fn sample_stage(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    snapshot_every: Option<usize>,
) -> Result<Vec<EnvCf>> {
    cfg.validate()?;
    let ds = load_data(cfg, data_dir)?;
    let ck = Checkpoint::load_expecting(checkpoint, &cfg.denoiser, &cfg.schedule)?;
    let schedule = cfg.schedule.build()?;
    let model = if cfg.sample.use_ema { &ck.state.ema } else { &ck.state.params };
    let indices = eval_indices(cfg, &ds);
    let inputs: Vec<EnvCf> = indices.iter().map(|&i| ds.pairs[i].lr.clone()).collect();
    let opts = SampleOptions { clamp_x0: cfg.sample.clamp_x0 };
    begin_output(out)?;
    let outputs = match snapshot_every {
        None => sample_batch::<f32, _>(model, &inputs, cfg.grid.factor, &schedule, cfg.sample.seed, opts)?,
        Some(every) => {
            let every = every.max(1);
            let mut outs = Vec::with_capacity(inputs.len());
            for (k, (lr, &idx)) in inputs.iter().zip(&indices).enumerate() {
                let dir = out.join("snapshots").join(idx.to_string());
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let seed = derive_seed(cfg.sample.seed, k as u64);
                let mut on_step = |t: usize, x: &Feat<f32>| -> Result<()> {
                    if t.is_multiple_of(every) {
                        let r = crate::denoiser::feat_to_raster(x)?.map(|v| v.clamp(0.0, 1.0));
                        crate::grid::io::write_gray_png(&dir.join(format!("t{t:04}.png")), &r)?;
                    }
                    Ok(())
                };
                outs.push(sample_with_snapshots::<f32, _>(model, lr, cfg.grid.factor, &schedule, seed, opts, &mut on_step)?);
            }
            outs
        }
    };
    write_outputs(cfg, out, &indices, &outputs)?;
    let extra = snapshot_every.map(|k| format!("--snapshot-every {k}")).unwrap_or_default();
    finish_output(out, cfg, &Manifest::new(Stage::Sample, cfg, out, &[data_dir, checkpoint], &extra))?;
    Ok(outputs)
}

/// Reconstruct the evaluated validation items with a classical method.
pub fn baseline_stage(cfg: &RunConfig, method: Baseline, data_dir: &Path, out: &Path) -> Result<Vec<EnvCf>> {
    cfg.validate()?;
    let ds = load_data(cfg, data_dir)?;
    let indices = eval_indices(cfg, &ds);
    begin_output(out)?;
    use rayon::prelude::*;
    let outputs = indices
        .par_iter()
        .map(|&i| upsample_envcf(method, &ds.pairs[i].lr, cfg.grid.factor, &cfg.baselines))
        .collect::<Result<Vec<_>>>()?;
    write_outputs(cfg, out, &indices, &outputs)?;
    let extra = format!("--method {}", method.name());
    finish_output(out, cfg, &Manifest::new(Stage::Baseline, cfg, out, &[data_dir], &extra))?;
    Ok(outputs)
}

/// Score method output directories (`{index}.png` per evaluated item)
/// against the dataset's HR references.
pub fn eval_stage(cfg: &RunConfig, data_dir: &Path, methods: &[(String, PathBuf)]) -> Result<Report> {
    cfg.validate()?;
    let ds = load_data(cfg, data_dir)?;
    let indices = eval_indices(cfg, &ds);
    let refs: Vec<_> = indices.iter().map(|&i| ds.pairs[i].hr.pixels().clone()).collect();
    let mut outputs = Vec::with_capacity(methods.len());
    for (name, dir) in methods {
        if dir.join(INCOMPLETE_MARKER).exists() {
            return Err(Error::format(dir, "output directory is marked incomplete"));
        }
        let rasters = indices
            .iter()
            .map(|&i| read_envcf(&dir.join(format!("{i}.png")), Role::Hr).map(|(f, _)| f.into_pixels()))
            .collect::<Result<Vec<_>>>()?;
        outputs.push((name.clone(), rasters));
    }
    evaluate(&outputs, &refs, &cfg.eval.ssim, &cfg.short_hash())
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(REPORT_FILE);
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join(TABLE_FILE);
    std::fs::write(&txt, report.render_table()).map_err(|e| Error::io(&txt, e))
}

/// Produce one method's outputs under `run_dir/outputs/{method}` and score
/// them. The diffusion model needs a checkpoint.
pub fn bench(cfg: &RunConfig, method: Method, data_dir: &Path, run_dir: &Path, checkpoint: Option<&Path>) -> Result<Report> {
    let out = run_dir.join("outputs").join(method.name());
    match method.baseline() {
        Some(b) => {
            baseline_stage(cfg, b, data_dir, &out)?;
        }
        None => {
            let ck = checkpoint.ok_or_else(|| Error::Config("bench --method cdiff needs a checkpoint".into()))?;
            sample_stage(cfg, data_dir, ck, &out, None)?;
        }
    }
    let report = eval_stage(cfg, data_dir, &[(method.name().to_string(), out)])?;
    write_report(run_dir, &report)?;
    Ok(report)
}

/// Paths of a pipeline run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.train().join(CHECKPOINT_FILE)
    }
    pub fn outputs(&self, method: Method) -> PathBuf {
        self.root.join("outputs").join(method.name())
    }
}

/// Generate data, train, run every method on the validation items and write
/// the comparison report to `run_dir`.
pub fn pipeline_smoke(
    cfg: &RunConfig,
    run_dir: &Path,
    serial: bool,
    observer: &mut (dyn TrainObserver + Send),
) -> std::result::Result<Report, StageError> {
    with_parallelism(serial, || {
        cfg.validate().stage(Stage::GenData)?;
        let layout = RunLayout::new(run_dir);
        begin_output(run_dir).stage(Stage::GenData)?;
        gen_data(cfg, &layout.data()).stage(Stage::GenData)?;
        train_stage(cfg, &layout.data(), &layout.train(), observer).stage(Stage::Train)?;
        for m in Method::ALL {
            match m.baseline() {
                Some(b) => baseline_stage(cfg, b, &layout.data(), &layout.outputs(m)).stage(Stage::Baseline)?,
                None => sample_stage(cfg, &layout.data(), &layout.checkpoint(), &layout.outputs(m), None).stage(Stage::Sample)?,
            };
        }
        let methods: Vec<(String, PathBuf)> = Method::ALL.iter().map(|m| (m.name().to_string(), layout.outputs(*m))).collect();
        let report = eval_stage(cfg, &layout.data(), &methods).stage(Stage::Eval)?;
        write_report(run_dir, &report).stage(Stage::Eval)?;
        let manifest = Manifest {
            stage: Stage::Eval,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seeds: vec![
                ("data".to_string(), cfg.data.seed),
                ("train".to_string(), cfg.train.seed),
                ("sample".to_string(), cfg.sample.seed),
            ],
            inputs: vec![],
            rerun: format!("cdiff smoke --config {CONFIG_FILE} --out . --serial"),
        };
        finish_output(run_dir, cfg, &manifest).stage(Stage::Eval)?;
        Ok(report)
    })
}
