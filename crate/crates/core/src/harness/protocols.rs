//! The four experiment protocols. Each expands its spec into independent
//! jobs, runs the ones the progress manifest does not list as complete, and
//! concatenates every job's records in job order.

use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;

use super::jobs::{run_pool, Progress};
use super::output::{self, export_loss_curve, export_png, Logger, MetricsRecord};
use super::spec::{ExperimentSpec, Protocol, Scale};
use crate::analysis::{self, PatternPair};
use crate::error::{Error, Result};
use crate::gridcore::Tensor;
use crate::nca::{self, CellMask};
use crate::prepattern::RGBA;
use crate::rng;
use crate::training::{self, Checkpoint, ModelKind, System, SystemConfig, TrainConfig, Trainer};

const TAG_DEVELOP: u64 = 0xDE7E;
const TAG_EVAL_SEEDS: u64 = 0xE5EE;

/// Outcome of one training job.
#[derive(Debug)]
pub enum TrainResult {
    Done(Box<Checkpoint>),
    Diverged { step: usize, loss: f64 },
}

/// An experiment bound to its output directory.
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub targets: Vec<(String, Tensor)>,
    pub log: Logger,
    progress: Progress,
}

/// Shortest round-trip text of a sweep value: `0.75`, `1`, `16`.
pub fn fmt_value(v: f64) -> String {
    format!("{v}")
}

impl Experiment {
    pub fn open(spec: ExperimentSpec, log: Logger) -> Result<Self> {
        spec.validate()?;
        let targets = spec.load_targets()?;
        if spec.protocol == Protocol::Capacity {
            let need = spec.sweep.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
            if targets.len() < need {
                return Err(Error::Config(format!(
                    "capacity sweep needs {need} targets, {} configured",
                    targets.len()
                )));
            }
        }
        std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
        let progress = Progress::open(&spec.out, &spec.fingerprint()?)?;
        output::write_atomic(&spec.out.join("spec.toml"), spec.to_toml()?.as_bytes())?;
        for (name, t) in &targets {
            export_png(t, &spec.out.join("png/targets").join(format!("{name}.png")))?;
        }
        if spec.scale == Scale::Desk {
            log.warn(
                "desk_scale",
                json!({
                    "grid_size": spec.grid_size,
                    "steps": spec.train.steps,
                    "note": "paper scale (64x64, 100000 steps, 20 targets) needs --paper-scale",
                }),
            );
        }
        log.info(
            "experiment_open",
            json!({
                "protocol": spec.protocol.as_str(),
                "out": spec.out,
                "targets": targets.iter().map(|(n, _)| n).collect::<Vec<_>>(),
                "completed": progress.completed_keys().len(),
            }),
        );
        Ok(Experiment {
            spec,
            targets,
            log,
            progress,
        })
    }

    /// Opens `spec` with a JSON log at `<out>/log.jsonl`, echoed to stderr.
    pub fn open_logged(spec: ExperimentSpec) -> Result<Self> {
        let log = Logger::to_file(&spec.out.join("log.jsonl"), true)?;
        Self::open(spec, log)
    }

    pub fn checkpoint_path(&self, key: &str) -> PathBuf {
        self.spec.out.join("checkpoints").join(format!("{key}.mscf"))
    }

    fn png_path(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.spec.out.join("png"), |p, s| p.join(s))
    }

    fn target_tensors(&self) -> Vec<Tensor> {
        self.targets.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Trains `system` or picks up its checkpoint. A finished checkpoint is
    /// reused; an unfinished one is resumed.
    pub fn train_model(
        &self,
        key: &str,
        system: SystemConfig,
        train: TrainConfig,
        targets: &[Tensor],
    ) -> Result<TrainResult> {
        let path = self.checkpoint_path(key);
        let missing = || Error::MissingCheckpoint {
            path: path.clone(),
            hint: format!(
                "devscaffold experiment {} --out {} (without --require-checkpoints)",
                self.spec.protocol.as_str(),
                self.spec.out.display()
            ),
        };
        let mut trainer = if path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.system.config != system || ck.train != train {
                return Err(Error::Config(format!(
                    "{} was trained under a different configuration",
                    path.display()
                )));
            }
            if ck.step >= train.steps {
                self.log.info("checkpoint_reused", json!({ "job": key, "step": ck.step }));
                return Ok(TrainResult::Done(Box::new(ck)));
            }
            if self.spec.require_checkpoints {
                return Err(missing());
            }
            self.log.info("training_resumed", json!({ "job": key, "step": ck.step }));
            Trainer::resume(ck, targets)?
        } else {
            if self.spec.require_checkpoints {
                return Err(missing());
            }
            Trainer::new(System::init(system, train.seed)?, train, targets)?
        };
        let total = trainer.train.steps;
        let every = self.spec.checkpoint_every;
        let started = Instant::now();
        while trainer.step_count() < total {
            match trainer.step() {
                Ok(_) => {}
                Err(Error::Diverged { step, loss, checkpoint }) => {
                    if let Some(ck) = checkpoint {
                        ck.save(&path.with_extension("diverged.mscf"))?;
                    }
                    self.log.warn("diverged", json!({ "job": key, "step": step, "loss": loss }));
                    return Ok(TrainResult::Diverged { step, loss });
                }
                Err(Error::NonFiniteGradient(name)) => {
                    let step = trainer.step_count();
                    trainer.checkpoint().save(&path.with_extension("diverged.mscf"))?;
                    self.log.warn("diverged", json!({ "job": key, "step": step, "parameter": name }));
                    return Ok(TrainResult::Diverged { step, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            }
            let s = trainer.step_count();
            if every > 0 && s % every == 0 && s < total {
                trainer.checkpoint().save(&path)?;
                self.log.info(
                    "training_progress",
                    json!({ "job": key, "step": s, "loss": trainer.losses().last() }),
                );
            }
        }
        let ck = trainer.checkpoint();
        ck.save(&path)?;
        export_loss_curve(&ck.losses, &self.spec.out.join("curves").join(format!("{key}.csv")))?;
        self.log.info(
            "trained",
            json!({
                "job": key,
                "steps": ck.step,
                "final_loss": ck.losses.last(),
                "seconds": started.elapsed().as_secs_f64(),
            }),
        );
        Ok(TrainResult::Done(Box::new(ck)))
    }

    /// Runs `jobs` through the worker pool, skipping completed ones, and
    /// returns all records in job order.
    pub fn run_jobs<J, K, F>(&self, jobs: &[J], key: K, f: F) -> Result<Vec<MetricsRecord>>
    where
        J: Sync,
        K: Fn(&J) -> String + Sync,
        F: Fn(&J) -> Result<Vec<MetricsRecord>> + Sync,
    {
        let results = run_pool(jobs, self.spec.workers, |job| {
            let k = key(job);
            if let Some(done) = self.progress.completed(&k)? {
                self.log.info("job_skipped", json!({ "job": k }));
                return Ok(done);
            }
            self.log.info("job_started", json!({ "job": k }));
            let records = f(job)?;
            self.progress.complete(&k, &records)?;
            self.log.info("job_completed", json!({ "job": k, "records": records.len() }));
            Ok(records)
        })?;
        Ok(results.into_iter().flatten().collect())
    }

    /// Writes the protocol CSV, `<out>/<protocol>.csv`.
    pub fn finish(&self, records: &[MetricsRecord]) -> Result<PathBuf> {
        let path = self.spec.out.join(format!("{}.csv", self.spec.protocol.as_str()));
        output::export_csv(records, &path)?;
        self.log.info("experiment_done", json!({ "csv": path, "records": records.len() }));
        Ok(path)
    }

    fn develop(
        &self,
        system: &System,
        target: &Tensor,
        index: usize,
        seed: u64,
        fire_rate: f64,
        keep_trajectory: bool,
    ) -> Result<training::Development> {
        let mut r = rng::stream(seed, &[TAG_DEVELOP, index as u64]);
        system.develop(target, system.eval_steps(), fire_rate, &mut r, keep_trajectory)
    }
}

/// Row builder for one job.
struct Rows<'a> {
    protocol: &'a str,
    model: &'a str,
    seed: u64,
    condition: String,
    out: Vec<MetricsRecord>,
}

impl<'a> Rows<'a> {
    fn new(protocol: Protocol, model: ModelKind, seed: u64, condition: String) -> Self {
        Rows {
            protocol: protocol.as_str(),
            model: model.as_str(),
            seed,
            condition,
            out: Vec::new(),
        }
    }

    fn push(&mut self, target: &str, metric: &str, value: f64) {
        self.out.push(MetricsRecord {
            protocol: self.protocol.into(),
            model: self.model.into(),
            seed: self.seed,
            condition: self.condition.clone(),
            target: target.into(),
            metric: metric.into(),
            value,
        });
    }
}

fn visible_mse(a: &Tensor, target: &Tensor) -> Result<f64> {
    let a = a.channels(0, RGBA)?;
    if a.shape() != target.shape() {
        return Err(Error::dim("mse", a.shape(), target.shape()));
    }
    let n = a.len() as f64;
    Ok(a.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Runs the protocol named by `spec`, logging to `<out>/log.jsonl`.
pub fn run_protocol(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    let exp = Experiment::open_logged(spec.clone())?;
    let records = match spec.protocol {
        Protocol::Infotrade => infotrade(&exp)?,
        Protocol::Robustness => robustness(&exp)?,
        Protocol::Capacity => capacity(&exp)?,
        Protocol::Growth => growth(&exp)?,
    };
    exp.finish(&records)?;
    Ok(records)
}

pub fn run_infotrade(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    expect(spec, Protocol::Infotrade)?;
    run_protocol(spec)
}

pub fn run_robustness(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    expect(spec, Protocol::Robustness)?;
    run_protocol(spec)
}

pub fn run_capacity(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    expect(spec, Protocol::Capacity)?;
    run_protocol(spec)
}

pub fn run_growth(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    expect(spec, Protocol::Growth)?;
    run_protocol(spec)
}

fn expect(spec: &ExperimentSpec, p: Protocol) -> Result<()> {
    if spec.protocol == p {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "spec is for {}, not {}",
            spec.protocol.as_str(),
            p.as_str()
        )))
    }
}

/// Pre-pattern and final-state measures per SIREN depth, plus a direct fit
/// of a depth-matched coordinate network.
fn infotrade(exp: &Experiment) -> Result<Vec<MetricsRecord>> {
    let spec = &exp.spec;
    let jobs: Vec<(usize, u64)> = spec
        .sweep
        .iter()
        .flat_map(|&d| spec.seeds.iter().map(move |&s| (d as usize, s)))
        .collect();
    let tensors = exp.target_tensors();
    exp.run_jobs(
        &jobs,
        |&(d, s)| format!("L{d}_s{s}"),
        |&(depth, seed)| {
            let condition = format!("depth={depth}");
            let dir = format!("L{depth}_s{seed}");
            let mut joint = Rows::new(Protocol::Infotrade, ModelKind::Prepattern, seed, condition.clone());
            let mut direct = Rows::new(Protocol::Infotrade, ModelKind::Direct, seed, condition);

            let mut sys = spec.system_config(ModelKind::Prepattern)?;
            sys.siren.layers = depth;
            let train = spec.train_config(&sys, seed, None);
            match exp.train_model(&format!("prepattern_L{depth}_s{seed}"), sys, train, &tensors)? {
                TrainResult::Done(ck) => {
                    for (i, (name, t)) in exp.targets.iter().enumerate() {
                        let dev = exp.develop(&ck.system, t, i, seed, 1.0, false)?;
                        let pre = dev.prepattern.as_ref().expect("pre-patterned system");
                        let pre_pair = PatternPair::new(pre, t)?;
                        let fin_pair = PatternPair::new(&dev.final_state, t)?;
                        let m_pre = analysis::measure(&pre_pair, spec.nmi_bins)?;
                        let m_fin = analysis::measure(&fin_pair, spec.nmi_bins)?;
                        joint.push(name, "prepattern_r2", m_pre.r2);
                        joint.push(name, "prepattern_nmi", m_pre.nmi);
                        joint.push(name, "prepattern_ssim", m_pre.ssim);
                        joint.push(name, "final_r2", m_fin.r2);
                        joint.push(name, "final_nmi", m_fin.nmi);
                        joint.push(name, "final_ssim", m_fin.ssim);
                        joint.push(name, "chance_r2", analysis::shuffled_probe_r2(&pre_pair, seed));
                        joint.push(name, "prepattern_mse", visible_mse(pre, t)?);
                        joint.push(name, "mse", dev.loss);
                        export_png(pre, &exp.png_path(&[&dir, &format!("{name}_prepattern.png")]))?;
                        export_png(&dev.final_state, &exp.png_path(&[&dir, &format!("{name}_final.png")]))?;
                    }
                }
                TrainResult::Diverged { .. } => joint.push("all", "failed", 1.0),
            }

            let mut dsys = spec.system_config(ModelKind::Direct)?;
            dsys.siren.layers = depth;
            let dtrain = spec.train_config(&dsys, seed, None);
            match exp.train_model(&format!("direct_L{depth}_s{seed}"), dsys, dtrain, &tensors)? {
                TrainResult::Done(ck) => {
                    for (i, (name, t)) in exp.targets.iter().enumerate() {
                        let dev = exp.develop(&ck.system, t, i, seed, 1.0, false)?;
                        let m = analysis::measure(&PatternPair::new(&dev.final_state, t)?, spec.nmi_bins)?;
                        direct.push(name, "mse", dev.loss);
                        direct.push(name, "r2", m.r2);
                        direct.push(name, "nmi", m.nmi);
                        direct.push(name, "ssim", m.ssim);
                        export_png(&dev.final_state, &exp.png_path(&[&dir, &format!("{name}_direct.png")]))?;
                    }
                }
                TrainResult::Diverged { .. } => direct.push("all", "failed", 1.0),
            }
            let mut out = joint.out;
            out.extend(direct.out);
            Ok(out)
        },
    )
}

/// Seeds of the stochastic evaluation rollouts of one job.
pub fn eval_seed_list(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| rng::mix(seed, &[TAG_EVAL_SEEDS, i])).collect()
}

/// Train at each fire rate of the sweep, evaluate across the fire-rate grid.
fn robustness(exp: &Experiment) -> Result<Vec<MetricsRecord>> {
    let spec = &exp.spec;
    let jobs: Vec<(ModelKind, f64, u64)> = spec
        .models
        .iter()
        .flat_map(|&m| {
            spec.sweep
                .iter()
                .flat_map(move |&p| spec.seeds.iter().map(move |&s| (m, p, s)))
        })
        .collect();
    let tensors = exp.target_tensors();
    exp.run_jobs(
        &jobs,
        |&(m, p, s)| format!("{}_p{}_s{s}", m.as_str(), fmt_value(p)),
        |&(model, p_train, seed)| {
            let key = format!("{}_p{}_s{seed}", model.as_str(), fmt_value(p_train));
            let sys = spec.system_config(model)?;
            let train = spec.train_config(&sys, seed, Some(p_train));
            let base = format!("p_train={}", fmt_value(p_train));
            match exp.train_model(&key, sys, train, &tensors)? {
                TrainResult::Done(ck) => {
                    let seeds = eval_seed_list(seed, spec.eval_seeds);
                    let mut out = Vec::new();
                    for &p in &spec.eval_fire_rates {
                        let mut rows = Rows::new(
                            Protocol::Robustness,
                            model,
                            seed,
                            format!("{base};p_eval={}", fmt_value(p)),
                        );
                        let stats = training::evaluate(&ck, &tensors, ck.system.eval_steps(), p, &seeds)?;
                        for ((name, _), st) in exp.targets.iter().zip(&stats) {
                            rows.push(name, "mse_mean", st.mean);
                            rows.push(name, "mse_std", st.std);
                        }
                        out.extend(rows.out);
                    }
                    let lo = spec.eval_fire_rates.iter().copied().fold(1.0, f64::min);
                    for p in [lo, 1.0] {
                        for (i, (name, t)) in exp.targets.iter().enumerate() {
                            let dev = exp.develop(&ck.system, t, i, seeds[0], p, false)?;
                            let file = format!("{name}_p{}.png", fmt_value(p));
                            export_png(&dev.final_state, &exp.png_path(&[&key, &file]))?;
                        }
                    }
                    Ok(out)
                }
                TrainResult::Diverged { .. } => {
                    let mut rows = Rows::new(Protocol::Robustness, model, seed, base);
                    rows.push("all", "failed", 1.0);
                    Ok(rows.out)
                }
            }
        },
    )
}

/// Parameters outside the encoder, the quantity compared across models.
pub fn audited_parameters(system: &System) -> usize {
    analysis::parameter_count(&[&system.params], |n| !n.starts_with("encoder."))
}

/// Reduced-width models trained on growing pattern counts.
fn capacity(exp: &Experiment) -> Result<Vec<MetricsRecord>> {
    let spec = &exp.spec;
    for &m in &spec.models {
        let sys = System::init(spec.system_config(m)?, 0)?;
        exp.log.info(
            "parameter_audit",
            json!({
                "model": m.as_str(),
                "parameters": audited_parameters(&sys),
                "with_encoder": sys.params.element_count(),
            }),
        );
    }
    let jobs: Vec<(ModelKind, usize, u64)> = spec
        .models
        .iter()
        .flat_map(|&m| {
            spec.sweep
                .iter()
                .flat_map(move |&n| spec.seeds.iter().map(move |&s| (m, n as usize, s)))
        })
        .collect();
    exp.run_jobs(
        &jobs,
        |&(m, n, s)| format!("{}_n{n}_s{s}", m.as_str()),
        |&(model, count, seed)| {
            let key = format!("{}_n{count}_s{seed}", model.as_str());
            let sys = spec.system_config(model)?;
            let train = spec.train_config(&sys, seed, None);
            let fresh = System::init(sys.clone(), seed)?;
            let named = &exp.targets[..count];
            let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
            let mut rows = Rows::new(Protocol::Capacity, model, seed, format!("patterns={count}"));
            rows.push("all", "parameters", audited_parameters(&fresh) as f64);
            rows.push("all", "parameters_with_encoder", fresh.params.element_count() as f64);
            match exp.train_model(&key, sys, train, &tensors)? {
                TrainResult::Done(ck) => {
                    let mut sum = 0.0;
                    for (i, (name, t)) in named.iter().enumerate() {
                        let dev = exp.develop(&ck.system, t, i, seed, 1.0, false)?;
                        rows.push(name, "mse", dev.loss);
                        sum += dev.loss;
                        export_png(&dev.final_state, &exp.png_path(&[&key, &format!("{name}.png")]))?;
                    }
                    rows.push("all", "mse_mean", sum / count as f64);
                }
                TrainResult::Diverged { .. } => rows.push("all", "failed", 1.0),
            }
            Ok(rows.out)
        },
    )
}

/// Values of `pattern` (mean of the visible channels) along the major axis
/// of the ellipse through the grid centre.
pub fn major_axis_profile(pattern: &Tensor, a: f64, b: f64) -> Vec<f64> {
    let s = pattern.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mean = |i: usize, j: usize| (0..RGBA.min(c)).map(|k| pattern.at3(i, j, k)).sum::<f64>() / RGBA.min(c) as f64;
    if a >= b {
        (0..h).map(|i| mean(i, w / 2)).collect()
    } else {
        (0..w).map(|j| mean(h / 2, j)).collect()
    }
}

/// Whether every frame's non-zero cells stay within `t` rings of the seed.
pub fn respects_locality(frames: &[Tensor], seed: &nca::EllipseSeed) -> bool {
    let mut reach = seed.mask.clone();
    for (t, f) in frames.iter().enumerate() {
        if t > 0 {
            reach = reach.dilate();
        }
        if !CellMask::nonzero(f).is_subset_of(&reach) {
            return false;
        }
    }
    true
}

/// Whether the state is exactly zero wherever `mask` is unset.
pub fn zero_outside(state: &Tensor, mask: &CellMask) -> bool {
    let c = state.shape()[2];
    state
        .data()
        .chunks_exact(c)
        .zip(&mask.cells)
        .all(|(cell, &inside)| inside || cell.iter().all(|&v| v == 0.0))
}

/// Growth from the ellipse substrate with alive masking.
fn growth(exp: &Experiment) -> Result<Vec<MetricsRecord>> {
    let spec = &exp.spec;
    let tensors = exp.target_tensors();
    let g = &spec.growth;
    let n = spec.grid_size;
    let seed_mask = nca::ellipse_seed(n, n, g.a, g.b)?;
    exp.run_jobs(
        &spec.seeds,
        |s| format!("growth_s{s}"),
        |&seed| {
            let key = format!("growth_s{seed}");
            let sys = spec.system_config(ModelKind::Prepattern)?;
            let train = spec.train_config(&sys, seed, None);
            let condition = format!("a={};b={}", fmt_value(g.a), fmt_value(g.b));
            let mut rows = Rows::new(Protocol::Growth, ModelKind::Prepattern, seed, condition);
            let untrained = System::init(sys.clone(), train.seed)?;
            let mut before = Vec::with_capacity(tensors.len());
            for (i, t) in tensors.iter().enumerate() {
                before.push(exp.develop(&untrained, t, i, seed, 1.0, false)?.loss);
            }
            match exp.train_model(&key, sys, train, &tensors)? {
                TrainResult::Done(ck) => {
                    for (i, (name, t)) in exp.targets.iter().enumerate() {
                        let dev = exp.develop(&ck.system, t, i, seed, 1.0, true)?;
                        let frames = dev.trajectory.as_deref().unwrap_or_default();
                        let pre = dev.prepattern.as_ref().expect("pre-patterned system");
                        let (freq, power) = analysis::dominant_frequency(&major_axis_profile(pre, g.a, g.b));
                        rows.push(name, "untrained_mse", before[i]);
                        rows.push(name, "mse", dev.loss);
                        rows.push(name, "improvement", before[i] / dev.loss);
                        rows.push(name, "outside_zero", zero_outside(&dev.initial, &seed_mask.mask) as u8 as f64);
                        rows.push(name, "locality", respects_locality(frames, &seed_mask) as u8 as f64);
                        rows.push(name, "dominant_frequency", freq);
                        rows.push(name, "dominant_power", power);
                        let dir = [key.as_str(), name.as_str()];
                        let at = |file: &str| exp.png_path(&[dir[0], dir[1], file]);
                        export_png(pre, &at("prepattern.png"))?;
                        export_png(&dev.initial, &at("seed.png"))?;
                        export_png(&dev.final_state, &at("final.png"))?;
                        if spec.export_frames {
                            for (t, f) in frames.iter().enumerate() {
                                export_png(f, &at(&format!("frame_{t:03}.png")))?;
                            }
                        }
                    }
                }
                TrainResult::Diverged { .. } => {
                    for (i, (name, _)) in exp.targets.iter().enumerate() {
                        rows.push(name, "untrained_mse", before[i]);
                    }
                    rows.push("all", "failed", 1.0);
                }
            }
            Ok(rows.out)
        },
    )
}
