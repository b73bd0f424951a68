//! The full training run: schedule, batching, step reports and checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_DIR};
use super::{check_compatible, train_step, StepReport, TrainState};
use crate::config::TrainConfig;
use crate::data::{sample_batch_pairs, SourcePool, TargetPool};
use crate::encoders::TextEncoder;
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

/// Step-report stream inside a run directory, one JSON object per line.
pub const STEPS_FILE: &str = "steps.jsonl";
const DIAGNOSTIC_DIR: &str = "diagnostic";

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Run directory for checkpoints and reports. `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `out_dir` if there is one.
    pub resume: bool,
    /// Stop once this many iterations are complete, without a final checkpoint.
    /// Used to simulate an interrupted run.
    pub halt_after: Option<usize>,
    /// Backend description stored in checkpoints.
    pub backend: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub state: TrainState<T>,
    /// Reports for every completed iteration, including ones before a resume.
    pub reports: Vec<StepReport>,
    pub resumed_from: Option<usize>,
}

pub fn read_step_reports(path: &Path) -> Result<Vec<StepReport>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_reports(path: &Path, reports: &[StepReport]) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in reports {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Trains `state` for `cfg.total_iterations` iterations.
pub fn fit<T: Scalar, E: TextEncoder<T> + Sync>(
    mut state: TrainState<T>,
    text: &E,
    source: &SourcePool<T>,
    target: &TargetPool<T>,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome<T>> {
    cfg.check()?;
    check_compatible(&state, text)?;
    if source.is_empty() || target.is_empty() {
        return Err(validation("training needs non-empty source and target pools"));
    }
    for (name, d) in [("source", source.features.ncols()), ("target", target.features.ncols())] {
        if d != state.feature_dim() {
            return Err(Error::Dimension {
                context: format!("{name} pool features"),
                expected: state.feature_dim(),
                found: d,
            });
        }
    }

    let mut reports = Vec::new();
    let mut resumed_from = None;
    let mut writer = None;
    if let Some(out) = &opts.out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let ckpt = out.join(CHECKPOINT_DIR);
        let steps = out.join(STEPS_FILE);
        if opts.resume {
            match load_checkpoint(&ckpt, &mut state) {
                Ok(meta) => {
                    if &meta.config != cfg {
                        return Err(validation("checkpoint was written with a different config"));
                    }
                    resumed_from = Some(state.iteration);
                    if steps.is_file() {
                        reports = read_step_reports(&steps)?;
                        reports.retain(|r| r.iteration < state.iteration);
                    }
                    info!("resuming from iteration {}", state.iteration);
                }
                Err(Error::Io { .. }) => warn!("no checkpoint under {}, starting fresh", out.display()),
                Err(e) => return Err(e),
            }
        }
        writer = Some((write_reports(&steps, &reports)?, steps));
    }

    let mut sampler = sample_batch_pairs(source.len(), target.len(), cfg.batch_size, cfg.seed)?;
    sampler.fast_forward(state.iteration);
    while state.iteration < cfg.total_iterations {
        if opts.halt_after.is_some_and(|h| state.iteration >= h) {
            if let Some((w, path)) = writer.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            return Ok(FitOutcome {
                state,
                reports,
                resumed_from,
            });
        }
        let batch = sampler.next().expect("sampler is endless");
        let report = match train_step(&mut state, text, source, target, &batch, cfg) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(out) = &opts.out_dir {
                    save_checkpoint(&state, cfg, &opts.backend, &out.join(DIAGNOSTIC_DIR))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((w, path)) = writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if report.iteration % 100 == 0 {
            info!(
                "iter {} lr {:.2e} L_source {:.4} L_target {:.4} known/unknown/discarded {}/{}/{}",
                report.iteration,
                report.lr,
                report.l_source,
                report.l_target,
                report.counts.known,
                report.counts.unknown,
                report.counts.discarded
            );
        }
        reports.push(report);
        let every = cfg.checkpoint_every;
        if let Some(out) = &opts.out_dir {
            if every > 0 && state.iteration.is_multiple_of(every) && state.iteration < cfg.total_iterations {
                if let Some((w, path)) = writer.as_mut() {
                    w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                save_checkpoint(&state, cfg, &opts.backend, &out.join(CHECKPOINT_DIR))?;
            }
        }
    }
    if let Some((mut w, path)) = writer.take() {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(out) = &opts.out_dir {
        save_checkpoint(&state, cfg, &opts.backend, &out.join(CHECKPOINT_DIR))?;
    }
    Ok(FitOutcome {
        state,
        reports,
        resumed_from,
    })
}
