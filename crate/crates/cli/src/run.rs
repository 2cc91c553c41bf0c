//! Loading data and running one solver under a `RunConfig`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use nomad_core::baselines::{run_als, run_ccdpp, run_dsgd, run_serial_sgd, DsgdConfig, SerialConfig};
use nomad_core::data::split_train_test;
use nomad_core::eval::{gnuplot_script, throughput, write_csv};
use nomad_core::nomad::{run_hybrid, run_hybrid_inproc, run_nomad, write_trace, HybridConfig, NomadConfig, TraceRecord};
use nomad_core::transport::{Endpoint, DEFAULT_BATCH_CAPACITY, DEFAULT_MAX_DELAY};
use nomad_core::{partition_rows, CheckpointInterval, ConvergenceLog, FactorMatrix, Rating, Real, RunControl, ShardedRatings};

use crate::config::{DataSource, RunConfig, Solver};
use crate::files::{load_ratings, write_model};

#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub train: Vec<Rating>,
    pub test: Vec<Rating>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (meta, train, test) = match &cfg.source {
        DataSource::Split { train, test } => {
            let (meta, entries) = load_ratings(train, cfg.one_based)?;
            let (test_meta, test_entries) = match test {
                Some(p) => {
                    let (m, e) = load_ratings(p, cfg.one_based)?;
                    (Some(m), e)
                }
                None => (None, Vec::new()),
            };
            let mut meta = meta;
            if let Some(t) = test_meta {
                meta.m = meta.m.max(t.m);
                meta.n = meta.n.max(t.n);
            }
            (meta, entries, test_entries)
        }
        DataSource::Single { data, test_fraction } => {
            let (meta, entries) = load_ratings(data, cfg.one_based)?;
            let (train, test) = split_train_test(&entries, *test_fraction, cfg.seed);
            (meta, train, test)
        }
    };
    if train.is_empty() {
        bail!("training set `{}` has no ratings", meta.name);
    }
    Ok(Dataset {
        name: meta.name,
        m: meta.m as usize,
        n: meta.n as usize,
        train,
        test,
    })
}

/// One cell of a run: solver and degree of parallelism.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub solver: Solver,
    pub threads: usize,
    pub machines: usize,
}

impl Cell {
    /// Workers the throughput figure is divided by.
    pub fn workers(&self) -> usize {
        match self.solver {
            Solver::Nomad => self.threads * self.machines,
            Solver::Dsgd => self.threads,
            _ => 1,
        }
    }

    pub fn tag(&self) -> String {
        format!("{}_t{}_m{}", self.solver, self.threads, self.machines)
    }
}

#[derive(Debug)]
pub struct CellResult {
    pub w: FactorMatrix,
    pub h: FactorMatrix,
    pub log: ConvergenceLog,
    pub trace: Vec<TraceRecord>,
}

pub fn control_for(cfg: &RunConfig, nnz: usize) -> RunControl {
    let every = cfg.checkpoint.unwrap_or(CheckpointInterval::Updates(nnz.max(1) as u64));
    RunControl::new(cfg.budget, every)
}

fn hybrid_config(cfg: &RunConfig, threads: usize) -> HybridConfig {
    HybridConfig {
        threads,
        balancing: cfg.balancing,
        trace: cfg.trace.is_some(),
        batch_capacity: cfg.batch_capacity.unwrap_or(DEFAULT_BATCH_CAPACITY),
        max_delay: cfg.max_delay_ms.map(Duration::from_millis).unwrap_or(DEFAULT_MAX_DELAY),
        ..HybridConfig::default()
    }
}

// `Real` is f32 under the single-precision feature.
#[allow(clippy::unnecessary_cast)]
pub fn run_cell(cfg: &RunConfig, data: &Dataset, cell: Cell) -> Result<CellResult> {
    if cell.machines > 1 && cell.solver != Solver::Nomad {
        bail!("{} runs on one machine only", cell.solver);
    }
    if cfg.trace.is_some() && cell.solver != Solver::Nomad {
        bail!("traces are only recorded by the nomad solver");
    }
    let (params, seed, test) = (&cfg.params, cfg.seed, &data.test[..]);
    let control = control_for(cfg, data.train.len());
    let single = || ShardedRatings::single(data.m, data.n, &data.train);
    let result = match cell.solver {
        Solver::Nomad => {
            let p = cell.threads * cell.machines;
            let sharded = ShardedRatings::new(data.m, data.n, &data.train, partition_rows(data.m, p)?)?;
            if cell.machines == 1 {
                let config = NomadConfig {
                    balancing: cfg.balancing,
                    trace: cfg.trace.is_some(),
                    ..NomadConfig::default()
                };
                let out = run_nomad(&sharded, params, &config, &control, seed, test)?;
                CellResult {
                    w: out.w,
                    h: out.h,
                    log: out.log,
                    trace: out.trace,
                }
            } else {
                let hc = hybrid_config(cfg, cell.threads);
                let out = run_hybrid_inproc(&sharded, params, &hc, &control, seed, test, cell.machines)?;
                if let Some(e) = out.aborted {
                    return Err(e).context("multi-machine run aborted");
                }
                let (w, h) = out.model.context("rank 0 returned no model")?;
                CellResult {
                    w,
                    h,
                    log: out.log,
                    trace: out.trace,
                }
            }
        }
        Solver::SerialSgd => {
            let out = run_serial_sgd(&single()?, params, &SerialConfig::default(), &control, seed, test)?;
            plain(out.w, out.h, out.log)
        }
        Solver::Dsgd => {
            let config = DsgdConfig::new(cell.threads, cfg.dsgd_step as Real);
            let out = run_dsgd(&single()?, params, &config, &control, seed, test)?.result;
            plain(out.w, out.h, out.log)
        }
        Solver::Ccdpp => {
            let out = run_ccdpp(&single()?, params, &control, seed, test, cfg.inner_iters)?;
            plain(out.w, out.h, out.log)
        }
        Solver::Als => {
            let out = run_als(&single()?, params, &control, seed, test)?;
            plain(out.w, out.h, out.log)
        }
    };
    Ok(result)
}

fn plain(w: FactorMatrix, h: FactorMatrix, log: ConvergenceLog) -> CellResult {
    CellResult {
        w,
        h,
        log,
        trace: Vec::new(),
    }
}

/// Stamps the dataset and every effective config entry onto the log.
pub fn annotate(log: &mut ConvergenceLog, cfg: &RunConfig, data: &Dataset, cell: Cell) {
    log.set_meta("dataset", &data.name);
    log.set_meta("m", data.m);
    log.set_meta("n", data.n);
    log.set_meta("train_nnz", data.train.len());
    log.set_meta("test_nnz", data.test.len());
    log.set_meta("threads", cell.threads);
    log.set_meta("machines", cell.machines);
    for (k, v) in cfg.effective.iter() {
        log.set_meta(format!("config.{k}"), v);
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn save_log(log: &ConvergenceLog, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    write_csv(log, path).with_context(|| format!("writing log {}", path.display()))
}

/// Writes the outputs `train` promises: log, model, and the optional trace
/// and gnuplot script. Returns the log path.
pub fn save_outputs(cfg: &RunConfig, cell: Cell, result: &CellResult) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    let log_path = cfg.log.clone().unwrap_or_else(|| dir.join(format!("{}.csv", cell.tag())));
    save_log(&result.log, &log_path)?;
    let model_path = cfg.model.clone().unwrap_or_else(|| dir.join(format!("{}.nmfm", cell.tag())));
    ensure_parent(&model_path)?;
    write_model(&model_path, &result.w, &result.h)?;
    if let Some(path) = &cfg.trace {
        ensure_parent(path)?;
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace(&result.trace, BufWriter::new(file)).with_context(|| format!("writing trace {}", path.display()))?;
    }
    if let Some(path) = &cfg.gnuplot {
        save_gnuplot(path, &[&log_path], &cell.tag())?;
    }
    Ok(log_path)
}

pub fn save_gnuplot(path: &Path, logs: &[&Path], title: &str) -> Result<()> {
    ensure_parent(path)?;
    let names: Vec<String> = logs.iter().map(|p| p.display().to_string()).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    fs::write(path, gnuplot_script(&refs, title)).with_context(|| format!("writing {}", path.display()))
}

/// Updates per worker per second, or `None` when the log is too short.
pub fn cell_throughput(log: &ConvergenceLog, cell: Cell) -> Option<f64> {
    throughput(log, cell.workers()).ok()
}

/// One machine of a socket mesh; the data must be split the same way on
/// every rank.
pub fn run_peer(cfg: &RunConfig, data: &Dataset, threads: usize, endpoint: Endpoint) -> Result<nomad_core::nomad::HybridOutcome> {
    let p = threads * endpoint.machines;
    let sharded = ShardedRatings::new(data.m, data.n, &data.train, partition_rows(data.m, p)?)?;
    let control = control_for(cfg, data.train.len());
    let hc = hybrid_config(cfg, threads);
    Ok(run_hybrid(&sharded, &cfg.params, &hc, &control, cfg.seed, &data.test, endpoint)?)
}
