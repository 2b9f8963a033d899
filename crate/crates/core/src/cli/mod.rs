//! Command-line runner: `gen-data`, `train`, `probe`, `sweep`,
//! `render-masks` and `gradcheck`.
//!
//! Every command resolves a [`RunConfig`] (JSON file, then flags), hashes
//! its canonical form and writes into `<out_dir>/<command>/<hash>/`
//! alongside a `manifest.json`. Exit status: 0 on success, 1 on invalid
//! input or configuration, 2 on a numerical failure.

mod config;
pub mod images;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{GradcheckSpec, RunConfig, SweepSpec};
pub use images::{mask_pgm, overlay_ppm, render_mask_pgm, render_overlay_ppm, to_byte};

use crate::diffcore::gradcheck::{composite_suite, primitive_suite, GradReport};
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::gating::{GateLocation, LambdaSchedule};
use crate::nets::{build_model, Model, NetConfig};
use crate::trainer::{
    lambda_sweep, param_sets, probe_run, resolved_net, train, TrainConfig,
};
use crate::worldgen::{generate_dataset, Dataset};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.igps";
pub const REVERSE_PARAMS_FILE: &str = "reverse.igps";

/// Parses a flag value with the serde name of a config enum.
fn serde_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(json!(s)).map_err(|e| format!("{s:?}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "infogate", version, about = "Learned information gates on DistractorDot")]
pub struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an IGDS dataset.
    GenData(GenDataArgs),
    /// Train networks; writes IGPS parameters and a JSONL log.
    Train(TrainArgs),
    /// Behavior-cloning probe of a trained run.
    Probe(ProbeArgs),
    /// Train and probe over a grid of λ values and seeds.
    Sweep(SweepArgs),
    /// Write gate maps (PGM) and overlays (PPM) of a trained run.
    RenderMasks(RenderArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Probe(_) => "probe",
            Command::Sweep(_) => "sweep",
            Command::RenderMasks(_) => "render-masks",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    /// none | easy | medium | hard
    #[arg(long, value_parser = serde_name::<crate::worldgen::DistractorLevel>)]
    pub level: Option<crate::worldgen::DistractorLevel>,
    #[arg(long)]
    pub horizon_cap: Option<usize>,
    /// Noise-free observations.
    #[arg(long)]
    pub eval_mode: bool,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Training dataset (IGDS).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset for mask statistics and probes.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// inverse | forward | td | bc | simsiam
    #[arg(long, value_parser = serde_name::<crate::objectives::Objective>)]
    pub objective: Option<crate::objectives::Objective>,
    /// cooperative | adversarial
    #[arg(long, value_parser = serde_name::<crate::gating::GateMode>)]
    pub mode: Option<crate::gating::GateMode>,
    /// input | feature
    #[arg(long, value_parser = serde_name::<GateLocation>)]
    pub location: Option<GateLocation>,
    /// Constant sparsity weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(p) = &self.data {
            t.train_data = Some(p.clone());
        }
        if let Some(p) = &self.eval_data {
            t.eval_data = Some(p.clone());
        }
        if let Some(o) = self.objective {
            t.objective = o;
        }
        if let Some(m) = self.mode {
            t.gate.mode = m;
        }
        if let Some(l) = self.location {
            t.gate.location = l;
        }
        if let Some(l) = self.lambda {
            t.gate.lambda = LambdaSchedule::constant(l);
        }
        if let Some(s) = self.steps {
            t.steps = s;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(w) = self.warmup {
            t.gate.warmup_steps = w;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset to render; defaults to the run's eval (else train) data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub composites: Option<usize>,
}

/// Written next to every command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// Network config after data-dependent resolution (`train` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetConfig>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Dataset::load(path)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("{what} is required (config or flag)")))
}

/// All parameters of a model as one IGPS set.
pub fn merged_params(model: &Model<f32>) -> ParamSet<f32> {
    let mut all = ParamSet::new();
    for (_, set) in param_sets(model) {
        for p in set.iter() {
            all.push(p.name.clone(), p.value.clone());
        }
    }
    all
}

fn restore(set: &mut ParamSet<f32>, saved: &ParamSet<f32>) -> Result<()> {
    for p in set.iter_mut() {
        let s = saved
            .find(&p.name)
            .ok_or_else(|| Error::ParamMismatch(format!("{} missing from file", p.name)))?;
        if s.value.shape() != p.value.shape() {
            return Err(Error::ParamMismatch(format!(
                "{}: {:?} vs {:?}",
                p.name,
                p.value.shape(),
                s.value.shape()
            )));
        }
        p.value = s.value.clone();
    }
    Ok(())
}

/// A trained run reloaded from its output directory.
pub struct LoadedRun {
    pub manifest: Manifest,
    pub model: Model<f32>,
    pub reverse: Option<Model<f32>>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = Manifest::load(dir)?;
    let net = manifest
        .net
        .clone()
        .ok_or_else(|| Error::Config(format!("{} is not a train run", dir.display())))?;
    let t = &manifest.config.train;
    let load = |file: &str| -> Result<Model<f32>> {
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let saved = ParamSet::load(&path)?;
        let mut m = build_model(&net, t.gate.location, t.seed)?;
        restore(&mut m.encoder.params, &saved)?;
        restore(&mut m.mask.params, &saved)?;
        restore(&mut m.heads.params, &saved)?;
        Ok(m)
    };
    let model = load(PARAMS_FILE)?;
    let reverse = if t.reverse_encoder {
        Some(load(REVERSE_PARAMS_FILE)?)
    } else {
        None
    };
    Ok(LoadedRun {
        manifest,
        model,
        reverse,
    })
}

fn out_dir(cfg: &RunConfig, command: &str, hash: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(command).join(hash);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.push(name.to_owned());
    Ok(())
}

/// Resolves the run config for `cli` (file, then flags).
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::GenData(a) => {
            if let Some(e) = a.episodes {
                cfg.dataset.episodes = e;
            }
            if let Some(l) = a.level {
                cfg.dataset.env.level = l;
            }
            if let Some(k) = a.horizon_cap {
                cfg.dataset.horizon_cap = k;
            }
            if a.eval_mode {
                cfg.dataset.eval_mode = true;
            }
        }
        Command::Train(a) => a.flags.apply(&mut cfg.train),
        Command::Sweep(a) => {
            a.flags.apply(&mut cfg.train);
            if let Some(l) = &a.lambdas {
                cfg.sweep.lambdas = l.clone();
            }
            if let Some(s) = &a.seeds {
                cfg.sweep.seeds = s.clone();
            }
        }
        Command::Probe(a) => {
            if let Some(p) = &a.data {
                cfg.train.train_data = Some(p.clone());
            }
            if let Some(p) = &a.eval_data {
                cfg.train.eval_data = Some(p.clone());
            }
        }
        Command::RenderMasks(a) => {
            if let Some(c) = a.count {
                cfg.render_count = c;
            }
        }
        Command::Gradcheck(a) => {
            if let Some(c) = a.composites {
                cfg.gradcheck.composites = c;
            }
        }
    }
    cfg.resolve()
}

/// Runs a parsed command; returns the directory it wrote to.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let command = cli.command.name();
    let hash = cfg.hash()?;
    let mut files = Vec::new();
    let mut net = None;
    let dir;
    match &cli.command {
        Command::GenData(_) => {
            let mut data = generate_dataset(&cfg.dataset)?;
            data.meta.config_hash = Some(hash.clone());
            dir = out_dir(&cfg, command, &hash)?;
            write(&dir, "dataset.igds", data.to_bytes()?, &mut files)?;
        }
        Command::Train(_) => {
            let t = &cfg.train;
            let data = load_dataset(required(&t.train_data, "training data")?)?;
            let eval = t.eval_data.as_deref().map(load_dataset).transpose()?;
            let mut out = train(t, &data, eval.as_ref())?;
            out.log.config_hash = hash.clone();
            dir = out_dir(&cfg, command, &hash)?;
            write(&dir, PARAMS_FILE, merged_params(&out.model).to_bytes(), &mut files)?;
            if let Some(r) = &out.reverse {
                write(&dir, REVERSE_PARAMS_FILE, merged_params(r).to_bytes(), &mut files)?;
            }
            write(&dir, "log.jsonl", out.log.to_jsonl()?, &mut files)?;
            if out.log.evals.iter().any(|e| e.masks.is_some()) {
                write(&dir, "masks.csv", out.log.masks_csv(), &mut files)?;
            }
            net = Some(resolved_net(t, &data));
        }
        Command::Probe(a) => {
            let run = load_run(&a.run)?;
            let t = &cfg.train;
            let data = load_dataset(required(&t.train_data, "probe training data")?)?;
            let eval = load_dataset(required(&t.eval_data, "probe eval data")?)?;
            let rc = &run.manifest.config.train;
            let r = probe_run(
                &TrainConfig {
                    probe: t.probe.clone(),
                    ..rc.clone()
                },
                &run.model,
                run.reverse.as_ref(),
                &data,
                &eval,
                cfg.seed,
            )?;
            dir = out_dir(&cfg, command, &hash)?;
            let record = json!({
                "config_hash": hash,
                "run_config_hash": run.manifest.config_hash,
                "accuracy": r.accuracy,
                "chance": r.chance,
            });
            write(&dir, "probe.json", format!("{record}\n"), &mut files)?;
        }
        Command::Sweep(_) => {
            let t = &cfg.train;
            let data = load_dataset(required(&t.train_data, "training data")?)?;
            let eval = load_dataset(required(&t.eval_data, "probe eval data")?)?;
            let table = lambda_sweep(t, &cfg.sweep.lambdas, &cfg.sweep.seeds, &data, &eval)?;
            dir = out_dir(&cfg, command, &hash)?;
            write(&dir, "sweep.csv", table.to_csv(), &mut files)?;
        }
        Command::RenderMasks(a) => {
            let run = load_run(&a.run)?;
            if run.model.mask.location() != GateLocation::Input {
                return Err(Error::Config("render-masks needs an input-space gate".into()));
            }
            let rt = &run.manifest.config.train;
            let path = a
                .data
                .as_ref()
                .or(rt.eval_data.as_ref())
                .or(rt.train_data.as_ref());
            let data = load_dataset(required(&path.cloned(), "dataset to render")?)?;
            let n = cfg.render_count.min(data.len());
            let idx: Vec<usize> = (0..n).collect();
            let batch = data.batch(&idx, None)?;
            let gates = run.model.mask.predict(&batch.obs_t)?;
            let [c, h, w] = data.obs_shape();
            if c != 3 {
                return Err(Error::Config(format!("overlays need 3 channels, got {c}")));
            }
            dir = out_dir(&cfg, command, &hash)?;
            for i in 0..n {
                let m = &gates.data()[i * h * w..(i + 1) * h * w];
                let obs = &batch.obs_t.data()[i * c * h * w..(i + 1) * c * h * w];
                write(&dir, &format!("mask_{i:03}.pgm"), mask_pgm(m, h, w)?, &mut files)?;
                write(
                    &dir,
                    &format!("overlay_{i:03}.ppm"),
                    overlay_ppm(obs, m, h, w)?,
                    &mut files,
                )?;
            }
        }
        Command::Gradcheck(_) => {
            let g = &cfg.gradcheck;
            let mut prim = primitive_suite(cfg.seed)?;
            let comp = composite_suite(cfg.seed, g.composites, g.max_depth)?;
            prim.f64.merge(&comp.f64);
            prim.f32.merge(&comp.f32);
            let side = |r: &GradReport| {
                json!({
                    "max_rel_err": r.max_rel_err,
                    "max_abs_err": r.max_abs_err,
                    "checked": r.checked,
                    "worst": r.worst,
                })
            };
            let pass = prim.f64.passes(g.tol_f64) && prim.f32.passes(g.tol_f32);
            let record = json!({
                "config_hash": hash,
                "cases": prim.cases + comp.cases,
                "f64": side(&prim.f64),
                "f32": side(&prim.f32),
                "pass": pass,
            });
            dir = out_dir(&cfg, command, &hash)?;
            write(&dir, "gradcheck.json", format!("{record}\n"), &mut files)?;
            println!(
                "max rel. err: {:.3e} (64-bit), {:.3e} (32-bit)",
                prim.f64.max_rel_err, prim.f32.max_rel_err
            );
            if !pass {
                return Err(Error::NonFinite(format!(
                    "gradient check failed (tolerances {:e} / {:e})",
                    g.tol_f64, g.tol_f32
                )));
            }
        }
    }
    Manifest {
        command: command.to_owned(),
        config_hash: hash,
        config: cfg,
        net,
        files,
    }
    .save(&dir)?;
    Ok(dir)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalAbort { .. } | Error::NonFinite(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs, reports, and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let cli = Cli::try_parse_from([
            "infogate", "--seed", "5", "train", "--lambda", "0.5", "--mode", "adversarial",
        ])
        .unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.gate.lambda, LambdaSchedule::constant(0.5));
        assert_eq!(cfg.train.gate.mode, crate::gating::GateMode::Adversarial);
    }

    #[test]
    fn bad_enum_values_are_usage_errors() {
        assert!(Cli::try_parse_from(["infogate", "gen-data", "--level", "extreme"]).is_err());
        assert_eq!(main_with_args(["infogate", "frobnicate"]), 1);
    }
}
