mod config;
mod files;
mod run;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nomad_core::data::{generate_synthetic, parse_degree_histogram, write_binary, DegreeModel, SyntheticSpec};
use nomad_core::eval::test_rmse;
use nomad_core::transport::{connect_mesh, MeshConfig};
use nomad_core::DatasetMeta;

use config::{Entries, RunConfig, Solver};
use files::{load_ratings, read_model, write_model, write_text};
use run::{annotate, cell_throughput, ensure_parent, load_dataset, run_cell, run_peer, save_gnuplot, save_log, save_outputs, Cell};

#[derive(Parser, Debug)]
#[command(name = "nomad", version, about = "Matrix completion with nomadic parallel SGD and reference solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic low-rank rating matrix.
    Generate(GenerateArgs),
    /// Convert between text and binary rating files.
    Convert(ConvertArgs),
    /// Train one solver and write its log and model.
    Train(RunArgs),
    /// Test RMSE of a saved model.
    Eval(EvalArgs),
    /// Run every solver x threads x machines cell and summarize.
    Bench(RunArgs),
    /// Join a multi-process run as one machine.
    ServePeer(RunArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, required = true)]
    users: usize,
    #[arg(long, required = true)]
    items: usize,
    /// Rank of the ground-truth factors.
    #[arg(long, required = true)]
    rank: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, required = true)]
    noise: f64,
    /// Target number of ratings (power-law degrees).
    #[arg(long, required_unless_present = "user_degrees", conflicts_with = "user_degrees")]
    nnz: Option<usize>,
    /// Pareto density exponent of the power-law degrees.
    #[arg(long, default_value_t = 5.0)]
    exponent: f64,
    /// `degree count` histogram for users; needs --item-degrees too.
    #[arg(long, requires = "item_degrees")]
    user_degrees: Option<PathBuf>,
    #[arg(long, requires = "user_degrees")]
    item_degrees: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write train.bin / test.bin split with this test fraction.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Text ids start at 1.
    #[arg(long)]
    one_based: bool,
    /// Write text instead of binary.
    #[arg(long)]
    to_text: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    one_based: bool,
}

/// Every option here has a config-file key: the long name, with `-` or `_`.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// `key = value` file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// nomad, serial_sgd, dsgd, ccdpp or als (comma list for bench).
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Single ratings file, split here by --test-fraction.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Text ids start at 1.
    #[arg(long)]
    one_based: bool,
    /// synthetic (default), netflix, yahoo or hugewiki.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// weighted or plain.
    #[arg(long)]
    reg_mode: Option<String>,
    /// Threads per machine (comma list for bench).
    #[arg(long)]
    threads: Option<String>,
    /// In-process machines (comma list for bench).
    #[arg(long)]
    machines: Option<String>,
    /// uniform or two_choice.
    #[arg(long)]
    balancing: Option<String>,
    #[arg(long)]
    batch_capacity: Option<usize>,
    #[arg(long)]
    max_delay_ms: Option<u64>,
    #[arg(long)]
    checkpoint_secs: Option<f64>,
    #[arg(long)]
    checkpoint_updates: Option<u64>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long)]
    max_updates: Option<u64>,
    #[arg(long)]
    target_rmse: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// CCD++ inner iterations per coordinate.
    #[arg(long)]
    inner_iters: Option<usize>,
    /// Initial bold-driver step for DSGD.
    #[arg(long)]
    dsgd_step: Option<f64>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write a gnuplot script plotting the log(s).
    #[arg(long)]
    gnuplot: Option<PathBuf>,
    /// Default directory for outputs; falls back to NOMAD_LOG_DIR.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    /// host:port of every rank, in rank order.
    #[arg(long)]
    hosts: Option<String>,
    /// Seconds to wait for peers.
    #[arg(long)]
    connect_timeout: Option<f64>,
}

macro_rules! overlay {
    ($e:ident, $args:ident; $($field:ident),* $(,)?) => {
        $(if let Some(v) = &$args.$field {
            $e.set(stringify!($field), v.to_string());
        })*
    };
}

impl RunArgs {
    /// Config file entries with the flags laid over them.
    fn entries(&self) -> Result<Entries> {
        let mut e = Entries::default();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let paths = [
            ("train", path(&self.train)),
            ("test", path(&self.test)),
            ("data", path(&self.data)),
            ("log", path(&self.log)),
            ("model", path(&self.model)),
            ("trace", path(&self.trace)),
            ("gnuplot", path(&self.gnuplot)),
            ("out_dir", path(&self.out_dir)),
        ];
        for (key, value) in paths {
            if let Some(v) = value {
                e.set(key, v);
            }
        }
        if self.one_based {
            e.set("one_based", "true");
        }
        overlay!(e, self;
            solver, test_fraction, preset, k, lambda, alpha, beta, reg_mode, threads, machines,
            balancing, batch_capacity, max_delay_ms, checkpoint_secs, checkpoint_updates, epochs,
            seconds, max_updates, target_rmse, seed, inner_iters, dsgd_step, rank, hosts, connect_timeout,
        );
        let mut merged = match &self.config {
            Some(path) => Entries::load(path)?,
            None => Entries::default(),
        };
        merged.overlay(&e);
        Ok(merged)
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::from_entries(self.entries()?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Train(a) => a.resolve().and_then(|c| cmd_train(&c)),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => a.resolve().and_then(|c| cmd_bench(&c)),
        Command::ServePeer(a) => a.resolve().and_then(|c| cmd_serve_peer(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let degrees = match (&a.user_degrees, &a.item_degrees, a.nnz) {
        (Some(u), Some(i), _) => {
            let read = |p: &Path| -> Result<_> {
                let file = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
                parse_degree_histogram(std::io::BufReader::new(file)).with_context(|| format!("in {}", p.display()))
            };
            DegreeModel::Empirical {
                users: read(u)?,
                items: read(i)?,
            }
        }
        (_, _, Some(nnz)) => DegreeModel::PowerLaw {
            nnz,
            exponent: a.exponent,
        },
        _ => bail!("need --nnz or both degree histograms"),
    };
    if let Some(f) = a.test_fraction {
        if !(0.0..1.0).contains(&f) {
            bail!("--test-fraction {f} must lie in [0, 1)");
        }
    }
    let spec = SyntheticSpec {
        n_users: a.users,
        n_items: a.items,
        k_true: a.rank,
        noise_sd: a.noise,
        degrees,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let ratings = a.out.join("ratings.bin");
    write_binary(&ratings, &data.meta, &data.entries).with_context(|| format!("writing {}", ratings.display()))?;
    write_model(&a.out.join("truth.nmfm"), &data.w_star, &data.h_star)?;
    if let Some(f) = a.test_fraction {
        let (train, test) = nomad_core::data::split_train_test(&data.entries, f, a.seed);
        for (name, part) in [("train", &train), ("test", &test)] {
            let meta = DatasetMeta {
                name: name.into(),
                nnz: part.len() as u64,
                ..data.meta.clone()
            };
            let path = a.out.join(format!("{name}.bin"));
            write_binary(&path, &meta, part).with_context(|| format!("writing {}", path.display()))?;
        }
    }

    let mut meta = String::new();
    let _ = writeln!(meta, "users = {}", a.users);
    let _ = writeln!(meta, "items = {}", a.items);
    let _ = writeln!(meta, "rank = {}", a.rank);
    let _ = writeln!(meta, "noise = {}", a.noise);
    match &spec.degrees {
        DegreeModel::PowerLaw { nnz, exponent } => {
            let _ = writeln!(meta, "degree_model = power_law");
            let _ = writeln!(meta, "target_nnz = {nnz}");
            let _ = writeln!(meta, "exponent = {exponent}");
        }
        DegreeModel::Empirical { .. } => {
            let _ = writeln!(meta, "degree_model = empirical");
        }
    }
    let _ = writeln!(meta, "seed = {}", a.seed);
    let _ = writeln!(meta, "nnz = {}", data.entries.len());
    if let Some(f) = a.test_fraction {
        let _ = writeln!(meta, "test_fraction = {f}");
    }
    fs::write(a.out.join("meta.txt"), meta)?;
    println!(
        "wrote {} ratings ({} x {}) to {}",
        data.entries.len(),
        data.meta.m,
        data.meta.n,
        a.out.display()
    );
    Ok(())
}

fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let (meta, entries) = load_ratings(&a.input, a.one_based)?;
    ensure_parent(&a.output)?;
    if a.to_text {
        write_text(&a.output, &meta, &entries)?;
    } else {
        write_binary(&a.output, &meta, &entries).with_context(|| format!("writing {}", a.output.display()))?;
    }
    println!("{} ratings ({} x {}) -> {}", entries.len(), meta.m, meta.n, a.output.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (w, h) = read_model(&a.model)?;
    let (_, test) = load_ratings(&a.test, a.one_based)?;
    let rmse = test_rmse(&w, &h, &test)?;
    println!("test RMSE: {rmse:.6} over {} ratings", test.len());
    Ok(())
}

fn single_value(key: &str, values: &[usize]) -> Result<usize> {
    match values {
        [v] => Ok(*v),
        _ => bail!("`{key}` takes one value here; lists are for bench"),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let [solver] = cfg.solvers[..] else {
        bail!("train runs one solver; use bench for several");
    };
    let cell = Cell {
        solver,
        threads: single_value("threads", &cfg.threads)?,
        machines: single_value("machines", &cfg.machines)?,
    };
    let data = load_dataset(cfg)?;
    train_cell(cfg, &data, cell)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

fn bench_cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &solver in &cfg.solvers {
        match solver {
            Solver::Nomad => {
                for &machines in &cfg.machines {
                    for &threads in &cfg.threads {
                        cells.push(Cell { solver, threads, machines });
                    }
                }
            }
            Solver::Dsgd => {
                for &threads in &cfg.threads {
                    cells.push(Cell { solver, threads, machines: 1 });
                }
            }
            // Serial solvers ignore the thread count; one cell each.
            _ => cells.push(Cell {
                solver,
                threads: 1,
                machines: 1,
            }),
        }
    }
    cells
}

pub const SUMMARY_HEADER: &str = "solver,threads,machines,final_rmse,throughput,time_to_target,status";

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    if cfg.log.is_some() || cfg.model.is_some() || cfg.trace.is_some() {
        bail!("bench names its outputs itself; use --out-dir instead of --log/--model/--trace");
    }
    let data = load_dataset(cfg)?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut logs = Vec::new();
    let mut failures = 0;
    for cell in bench_cells(cfg) {
        let outcome = run_cell(cfg, &data, cell).and_then(|mut r| {
            annotate(&mut r.log, cfg, &data, cell);
            let path = dir.join(format!("{}.csv", cell.tag()));
            save_log(&r.log, &path)?;
            Ok((r.log, path))
        });
        let (rmse, tput, ttt, status) = match outcome {
            Ok((log, path)) => {
                logs.push(path);
                let rmse = log.final_rmse().map(|r| r.to_string()).unwrap_or_default();
                let tput = cell_throughput(&log, cell).map(|t| t.to_string()).unwrap_or_default();
                let ttt = cfg
                    .budget
                    .target_rmse
                    .and_then(|t| log.time_to_rmse(t))
                    .map(|s| s.to_string())
                    .unwrap_or_default();
                (rmse, tput, ttt, "ok".to_string())
            }
            Err(e) => {
                failures += 1;
                eprintln!("cell {} failed: {e:#}", cell.tag());
                (String::new(), String::new(), String::new(), format!("failed: {e:#}"))
            }
        };
        println!("{:<24} rmse {:<12} throughput {}", cell.tag(), rmse, tput);
        let _ = writeln!(
            summary,
            "{},{},{},{rmse},{tput},{ttt},{}",
            cell.solver,
            cell.threads,
            cell.machines,
            csv_field(&status)
        );
    }
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary).with_context(|| format!("writing {}", summary_path.display()))?;
    if let Some(path) = &cfg.gnuplot {
        let refs: Vec<&Path> = logs.iter().map(PathBuf::as_path).collect();
        save_gnuplot(path, &refs, "bench")?;
    }
    println!("summary: {}", summary_path.display());
    if failures > 0 {
        bail!("{failures} bench cell(s) failed; see the status column of {}", summary_path.display());
    }
    Ok(())
}

fn cmd_serve_peer(cfg: &RunConfig) -> Result<()> {
    if cfg.solvers != [Solver::Nomad] {
        bail!("serve-peer only runs the nomad solver");
    }
    let threads = single_value("threads", &cfg.threads)?;
    if cfg.hosts.is_empty() {
        bail!("serve-peer needs --hosts host:port,... (one per rank)");
    }
    let machines = cfg.hosts.len();
    if cfg.effective.get("machines").is_some() && cfg.machines != [machines] {
        bail!("--machines {:?} disagrees with {machines} hosts", cfg.machines);
    }
    let rank = cfg.rank.context("serve-peer needs --rank")?;
    if rank >= machines {
        bail!("rank {rank} is out of range for {machines} hosts");
    }
    let data = load_dataset(cfg)?;
    let cell = Cell {
        solver: Solver::Nomad,
        threads,
        machines,
    };
    if machines == 1 {
        return train_cell(cfg, &data, cell);
    }

    let mesh = MeshConfig {
        rank,
        hosts: cfg.hosts.clone(),
        k: cfg.params.k,
        timeout: Duration::from_secs_f64(cfg.connect_timeout_secs),
    };
    let endpoint = connect_mesh(&mesh).with_context(|| format!("rank {rank} joining the mesh"))?;
    let mut outcome = run_peer(cfg, &data, threads, endpoint)?;
    if rank != 0 {
        if let Some(e) = outcome.aborted {
            return Err(e).context(format!("rank {rank}: run aborted"));
        }
        println!("rank {rank}: {} local updates", outcome.local_updates);
        return Ok(());
    }

    annotate(&mut outcome.log, cfg, &data, cell);
    let dir = cfg.output_dir();
    let log_path = cfg.log.clone().unwrap_or_else(|| dir.join(format!("{}.csv", cell.tag())));
    save_log(&outcome.log, &log_path)?;
    if let Some(e) = outcome.aborted {
        return Err(e).context(format!("run aborted; partial log in {}", log_path.display()));
    }
    let (w, h) = outcome.model.take().context("rank 0 returned no model")?;
    let result = run::CellResult {
        w,
        h,
        log: outcome.log,
        trace: outcome.trace,
    };
    save_outputs(cfg, cell, &result)?;
    report(&result, cell, &log_path);
    Ok(())
}

fn train_cell(cfg: &RunConfig, data: &run::Dataset, cell: Cell) -> Result<()> {
    let mut result = run_cell(cfg, data, cell)?;
    annotate(&mut result.log, cfg, data, cell);
    let log_path = save_outputs(cfg, cell, &result)?;
    report(&result, cell, &log_path);
    Ok(())
}

fn report(result: &run::CellResult, cell: Cell, log_path: &Path) {
    let rmse = result.log.final_rmse().unwrap_or(f64::NAN);
    println!("final test RMSE: {rmse:.6}");
    match cell_throughput(&result.log, cell) {
        Some(t) => println!("throughput: {t:.0} updates/worker/s"),
        None => println!("throughput: n/a"),
    }
    println!("log: {}", log_path.display());
}
