//! The four subcommands.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gcdm::diffusion::{nll_bound, sample as draw_samples, sample_num_atoms, NoiseSchedule, SampleOptions};
use gcdm::evaluate::{evaluate_samples, BondTable, EvalConfig, GenerationReport, NllSummary, ValenceTable};
use gcdm::gcpnet::GcpNet;
use gcdm::moldata::{
    compute_size_distribution, load_dataset, load_molecules, write_internal, write_xyz, ChargeSource, DatasetFormat,
    MoleculeGraph,
};
use gcdm::training::{
    file_digest, fit, load_checkpoint, save_checkpoint, Checkpoint, FitEvent, OptimizerState, RngState, TrainRng,
};
use rand::SeedableRng;

use crate::config::{RunConfig, CHECKPOINT_FILE};
use crate::output::{write_atomic, write_provenance, OutputLock};
use crate::UsageError;

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const SPLIT_FILE: &str = "split.txt";
pub const SAMPLES_FILE: &str = "samples.mol";
pub const SAMPLES_XYZ_FILE: &str = "samples.xyz";
pub const SAMPLES_META_FILE: &str = "samples.meta";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";

/// Stream of the sampling generator; training uses stream 0.
const SAMPLING_STREAM: u64 = 1;
/// Stream of the likelihood-bound generator.
const NLL_STREAM: u64 = 2;

fn seeded(seed: u64, stream: u64) -> TrainRng {
    let mut rng = TrainRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn loss_line(kind: &str, step: u64, l: &gcdm::diffusion::LossBreakdown, grad_norm: Option<f64>) -> String {
    let gn = grad_norm.map(|g| format!("{g:.6e}")).unwrap_or_default();
    format!("{kind},{step},{:.8e},{:.8e},{:.8e},{:.8e},{gn}\n", l.l_t, l.l_0_x, l.l_0_h, l.l_base)
}

pub fn train(config: &RunConfig, out_flag: Option<&Path>) -> Result<()> {
    config.require_data()?;
    let out = config.output_dir(out_flag)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let resume_from = if config.training.resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path).context("cannot resume")?;
        if ckpt.model != config.model || ckpt.schedule != config.schedule || ckpt.scaler != config.scaler {
            bail!(UsageError(format!(
                "checkpoint {} was trained with a different model, schedule or scaler configuration",
                ckpt_path.display()
            )));
        }
        Some(ckpt)
    } else {
        None
    };
    let _lock = OutputLock::acquire(&out)?;
    let started = Instant::now();
    let split = load_dataset(&config.data.path, config.data.format, config.data.charges, &config.split_strategy())?;
    split.manifest().write(&out.join(SPLIT_FILE))?;
    let sizes = compute_size_distribution(&split.train)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let resuming = resume_from.is_some();
    let (mut net, mut opt, mut rng) = match resume_from {
        Some(ckpt) => {
            let net = ckpt.network()?;
            let mut opt = ckpt.optimizer;
            opt.config = config.optimizer.clone();
            (net, opt, ckpt.rng.restore())
        }
        None => {
            let net = GcpNet::new(config.model.clone(), config.seed)?;
            let opt = OptimizerState::new(config.optimizer.clone(), net.params())?;
            (net, opt, seeded(config.seed, 0))
        }
    };
    write_provenance(
        &out,
        "train",
        config,
        &[
            ("resumed_from_step", opt.step.to_string()),
            ("train_molecules", split.train.len().to_string()),
            ("val_molecules", split.val.len().to_string()),
        ],
    )?;
    let log_path = out.join(LOSS_LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)?;
    if log.metadata()?.len() == 0 {
        log.write_all(b"kind,step,l_t,l_0_x,l_0_h,l_base,grad_norm\n")?;
    }
    eprintln!(
        "training {} parameters on {} molecules ({} validation) from step {}",
        net.params().num_scalars(),
        split.train.len(),
        split.val.len(),
        opt.step
    );
    let snapshot = |net: &GcpNet, opt: &OptimizerState, rng: &TrainRng| Checkpoint {
        model: config.model.clone(),
        params: net.params().clone(),
        optimizer: opt.clone(),
        schedule: config.schedule.clone(),
        scaler: config.scaler,
        sizes: sizes.clone(),
        rng: RngState::capture(rng),
    };
    let append = |log: &mut std::fs::File, line: String| {
        log.write_all(line.as_bytes()).map_err(|source| gcdm::Error::Io {
            path: log_path.clone(),
            source,
        })
    };
    let training = &config.training;
    let summary = fit(
        &mut net,
        &mut opt,
        &split.train,
        &split.val,
        &schedule,
        &config.scaler,
        &mut rng,
        &training.fit(),
        &mut |p| {
            match p.event {
                FitEvent::Step(r) => {
                    append(&mut log, loss_line("train", r.step, &r.loss, Some(r.grad_norm)))?;
                    if training.log_every > 0 && r.step % training.log_every == 0 {
                        eprintln!(
                            "step {:>7}  l_t {:>10.4}  grad_norm {:>9.3}  {:>8.1?}",
                            r.step,
                            r.loss.l_t,
                            r.grad_norm,
                            started.elapsed()
                        );
                    }
                    if training.checkpoint_every > 0 && r.step % training.checkpoint_every == 0 {
                        save_checkpoint(&snapshot(p.net, p.optimizer, p.rng), &ckpt_path)?;
                    }
                }
                FitEvent::Validation { step, loss } => {
                    append(&mut log, loss_line("val", step, &loss, None))?;
                    eprintln!("step {step:>7}  validation l_t {:.4}", loss.l_t);
                }
            }
            Ok(())
        },
    )?;
    save_checkpoint(&snapshot(&net, &opt, &rng), &ckpt_path)?;
    eprintln!(
        "finished at step {} ({} this run{}) in {:.1?}; checkpoint {}",
        summary.final_step,
        summary.steps_run,
        if summary.stopped_early { ", stopped early" } else { "" },
        started.elapsed(),
        ckpt_path.display()
    );
    Ok(())
}

/// Loads the checkpoint a sample or eval run needs, failing early with a
/// usage error if it does not exist.
fn require_checkpoint(config: &RunConfig, out: &Path) -> Result<(Checkpoint, String, std::path::PathBuf)> {
    let path = config.checkpoint_path(out);
    if !path.is_file() {
        bail!(UsageError(format!(
            "checkpoint {} not found; train first or set sampling.checkpoint",
            path.display()
        )));
    }
    let ckpt = load_checkpoint(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let digest = file_digest(&path)?;
    Ok((ckpt, digest, path))
}

struct Sampled {
    molecules: Vec<MoleculeGraph>,
    meta: String,
}

fn sample_from(config: &RunConfig, ckpt: &Checkpoint, digest: &str) -> Result<Sampled> {
    let net = ckpt.network()?;
    let schedule = NoiseSchedule::new(&ckpt.schedule)?;
    let mut rng = seeded(config.seed, SAMPLING_STREAM);
    let sizes: Vec<usize> = (0..config.sampling.count).map(|_| sample_num_atoms(&ckpt.sizes, &mut rng)).collect();
    let started = Instant::now();
    let molecules = draw_samples(
        &sizes,
        &schedule,
        &ckpt.scaler,
        &net,
        &mut rng,
        SampleOptions {
            chunk: config.sampling.chunk,
        },
        "sample_",
        &mut |_, _, _| {},
    )?;
    eprintln!("sampled {} molecules in {:.1?}", molecules.len(), started.elapsed());
    let mut meta = String::new();
    let s = &ckpt.schedule;
    let _ = writeln!(meta, "schedule_kind={}", s.kind);
    let _ = writeln!(meta, "steps={}", s.steps);
    let _ = writeln!(meta, "precision={:e}", s.precision);
    let _ = writeln!(meta, "step_clip={:e}", s.step_clip);
    let _ = writeln!(meta, "seed={}", config.seed);
    let _ = writeln!(meta, "count={}", molecules.len());
    let _ = writeln!(meta, "checkpoint_sha256={digest}");
    let _ = writeln!(meta, "optimizer_step={}", ckpt.optimizer.step);
    let _ = writeln!(meta, "version={}", env!("CARGO_PKG_VERSION"));
    Ok(Sampled { molecules, meta })
}

fn write_samples(out: &Path, sampled: &Sampled) -> Result<()> {
    let mut internal = Vec::new();
    write_internal(&mut internal, &sampled.molecules)?;
    write_atomic(out, SAMPLES_FILE, &internal)?;
    let mut xyz = Vec::new();
    write_xyz(&mut xyz, &sampled.molecules)?;
    write_atomic(out, SAMPLES_XYZ_FILE, &xyz)?;
    write_atomic(out, SAMPLES_META_FILE, sampled.meta.as_bytes())
}

pub fn sample(config: &RunConfig, out_flag: Option<&Path>) -> Result<()> {
    let out = config.output_dir(out_flag)?;
    let (ckpt, digest, path) = require_checkpoint(config, &out)?;
    let _lock = OutputLock::acquire(&out)?;
    write_provenance(
        &out,
        "sample",
        config,
        &[("checkpoint", path.display().to_string()), ("checkpoint_sha256", digest.clone())],
    )?;
    let sampled = sample_from(config, &ckpt, &digest)?;
    write_samples(&out, &sampled)?;
    eprintln!("wrote {}", out.join(SAMPLES_FILE).display());
    Ok(())
}

fn eval_config(config: &RunConfig) -> Result<EvalConfig> {
    let bonds = match &config.evaluation.bonds {
        Some(p) => BondTable::load(p).map_err(|e| UsageError(format!("evaluation.bonds: {e}")))?,
        None => BondTable::standard(),
    };
    let valences = match &config.evaluation.valences {
        Some(p) => ValenceTable::load(p).map_err(|e| UsageError(format!("evaluation.valences: {e}")))?,
        None => ValenceTable::standard(),
    };
    Ok(EvalConfig {
        bonds,
        valences,
        batches: config.evaluation.batches,
    })
}

fn sample_file_format(path: &Path) -> DatasetFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => DatasetFormat::XyzDir,
        Some("sdf") => DatasetFormat::Sdf,
        _ => DatasetFormat::Internal,
    }
}

pub fn eval(config: &RunConfig, out_flag: Option<&Path>) -> Result<()> {
    let out = config.output_dir(out_flag)?;
    let eval_config = eval_config(config)?;
    let needs_checkpoint = config.evaluation.samples.is_none() || config.evaluation.nll_molecules > 0;
    let checkpoint = if needs_checkpoint { Some(require_checkpoint(config, &out)?) } else { None };
    if let Some(p) = &config.evaluation.samples {
        if !p.exists() {
            bail!(UsageError(format!("evaluation.samples {} does not exist", p.display())));
        }
    }
    if config.evaluation.nll_molecules > 0 {
        config.require_data()?;
    }
    let _lock = OutputLock::acquire(&out)?;
    let mut provenance = vec![];
    if let Some((_, digest, path)) = &checkpoint {
        provenance.push(("checkpoint", path.display().to_string()));
        provenance.push(("checkpoint_sha256", digest.clone()));
    }
    write_provenance(&out, "eval", config, &provenance)?;

    let (molecules, source) = match &config.evaluation.samples {
        Some(p) => (load_molecules(p, sample_file_format(p), ChargeSource::AtomicNumber)?, p.display().to_string()),
        None => {
            let (ckpt, digest, _) = checkpoint.as_ref().expect("checked above");
            let sampled = sample_from(config, ckpt, digest)?;
            write_samples(&out, &sampled)?;
            (sampled.molecules, format!("sampled from checkpoint {digest}"))
        }
    };
    let mut report = evaluate_samples(&molecules, &eval_config)?;
    if config.evaluation.nll_molecules > 0 {
        let (ckpt, _, _) = checkpoint.as_ref().expect("checked above");
        report.nll = nll_summary(config, ckpt)?;
    }
    report.provenance.insert("config_sha256".into(), config.hash());
    report.provenance.insert("seed".into(), config.seed.to_string());
    report.provenance.insert("samples".into(), source);
    report.provenance.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    if let Some((_, digest, _)) = &checkpoint {
        report.provenance.insert("checkpoint_sha256".into(), digest.clone());
    }
    write_report(&out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn nll_summary(config: &RunConfig, ckpt: &Checkpoint) -> Result<Option<NllSummary>> {
    let split = load_dataset(&config.data.path, config.data.format, config.data.charges, &config.split_strategy())?;
    let net = ckpt.network()?;
    let schedule = NoiseSchedule::new(&ckpt.schedule)?;
    let mut rng = seeded(config.seed, NLL_STREAM);
    let mut values = Vec::new();
    for mol in split.test.iter().take(config.evaluation.nll_molecules) {
        let est = nll_bound(mol, &schedule, &ckpt.scaler, &net, config.evaluation.nll_t_samples, &mut rng)?;
        values.push(est.total);
    }
    Ok(NllSummary::from_values(&values))
}

fn write_report(out: &Path, report: &GenerationReport) -> Result<()> {
    write_atomic(out, REPORT_FILE, report.to_text().as_bytes())?;
    write_atomic(out, REPORT_KV_FILE, report.to_kv().as_bytes())
}

pub fn inspect(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    config.require_data()?;
    let molecules = load_molecules(&config.data.path, config.data.format, config.data.charges)?;
    let dist = compute_size_distribution(&molecules)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    writeln!(out, "# dataset {} ({} molecules)", config.data.path.display(), molecules.len())?;
    writeln!(out, "# size distribution")?;
    writeln!(out, "n\tcount\tp")?;
    for (n, p) in dist.probs() {
        writeln!(out, "{n}\t{}\t{p:.10}", dist.counts()[n])?;
    }
    writeln!(out, "# schedule {}", schedule.descriptor())?;
    writeln!(out, "t\talpha\tsigma\tsnr\tlog_snr")?;
    for t in 0..=schedule.steps() {
        writeln!(
            out,
            "{t}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}",
            schedule.alpha(t),
            schedule.sigma(t),
            schedule.snr(t),
            schedule.log_snr(t)
        )?;
    }
    Ok(())
}
