use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use nomad_core::data::read_binary;
use nomad_core::eval::{read_csv, throughput};
use tempfile::TempDir;

fn nomad() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nomad"));
    cmd.env_remove("NOMAD_LOG_DIR");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn nomad")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "nomad failed ({}):\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic dataset with a train/test split in `dir/data`.
fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(nomad().args([
        "generate", "--users", "200", "--items", "60", "--rank", "3", "--noise", "0.1", "--nnz", "4000", "--seed",
        "11", "--test-fraction", "0.1", "--out",
    ])
    .arg(&data));
    data
}

/// Independent reader for the model file layout.
fn read_nmfm(path: &Path) -> (usize, usize, usize, Vec<f64>) {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..4], b"NMFM");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    let dim = |at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap()) as usize;
    let (m, n, k) = (dim(8), dim(16), dim(24));
    let vals: Vec<f64> = b[32..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(vals.len(), (m + n) * k);
    (m, n, k, vals)
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn generate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let args = ["generate", "--users", "150", "--items", "40", "--rank", "4", "--noise", "0.1", "--nnz", "2000", "--seed", "7"];
    ok(nomad().args(args).arg("--out").arg(tmp.path().join("a")));
    ok(nomad().args(args).arg("--out").arg(tmp.path().join("b")));
    for file in ["ratings.bin", "truth.nmfm", "meta.txt"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
}

#[test]
fn noiseless_generation_is_exactly_low_rank() {
    let tmp = TempDir::new().unwrap();
    ok(nomad()
        .args(["generate", "--users", "80", "--items", "30", "--rank", "2", "--noise", "0", "--nnz", "600", "--out"])
        .arg(tmp.path()));
    let (_, ratings) = read_binary(tmp.path().join("ratings.bin")).unwrap();
    let (m, n, k, vals) = read_nmfm(&tmp.path().join("truth.nmfm"));
    assert_eq!((m, n, k), (80, 30, 2));
    let (w, h) = vals.split_at(m * k);
    for r in &ratings {
        let (u, i) = (r.user as usize, r.item as usize);
        let dot: f64 = (0..k).map(|l| w[u * k + l] * h[i * k + l]).sum();
        assert!((dot - r.value).abs() < 1e-12, "rating {r:?} vs {dot}");
    }
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(nomad().args(["generate", "--users", "10", "--items", "5", "--rank", "2", "--nnz", "20"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--noise"), "{}", stderr(&out));
}

#[test]
fn train_needs_a_data_source_and_a_budget() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let out = run(nomad().args(["train", "--epochs", "1"]).current_dir(tmp.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("data source"), "{}", stderr(&out));
    let out = run(nomad().args(["train", "--train"]).arg(data.join("train.bin")).current_dir(tmp.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("budget"), "{}", stderr(&out));
}

#[test]
fn same_seed_single_thread_models_are_identical() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    for name in ["one", "two"] {
        ok(nomad()
            .args(["train", "--solver", "nomad", "--threads", "1", "--epochs", "5", "--seed", "3", "--train"])
            .arg(data.join("train.bin"))
            .arg("--test")
            .arg(data.join("test.bin"))
            .arg("--out-dir")
            .arg(tmp.path().join(name)));
    }
    let a = fs::read(tmp.path().join("one/nomad_t1_m1.nmfm")).unwrap();
    let b = fs::read(tmp.path().join("two/nomad_t1_m1.nmfm")).unwrap();
    assert!(a == b, "model files differ");
}

#[test]
fn train_writes_log_model_and_plot_and_reports() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let log = tmp.path().join("out/run.csv");
    let model = tmp.path().join("out/run.nmfm");
    let plot = tmp.path().join("out/run.gp");
    let out = ok(nomad()
        .args(["train", "--solver", "ccdpp", "--epochs", "4", "--train"])
        .arg(data.join("train.bin"))
        .arg("--test")
        .arg(data.join("test.bin"))
        .arg("--log")
        .arg(&log)
        .arg("--model")
        .arg(&model)
        .arg("--gnuplot")
        .arg(&plot));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final test RMSE"), "{stdout}");
    assert!(stdout.contains("throughput"), "{stdout}");
    let parsed = read_csv(&log).unwrap();
    assert_eq!(parsed.records.len(), 5);
    assert_eq!(parsed.meta("solver"), Some("ccdpp"));
    assert!(fs::read_to_string(&plot).unwrap().contains("run.csv"));

    let out = ok(nomad().args(["eval", "--model"]).arg(&model).arg("--test").arg(data.join("test.bin")));
    let printed: f64 = String::from_utf8_lossy(&out.stdout)
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!((printed - parsed.final_rmse().unwrap()).abs() < 1e-6);
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# serial baseline\nsolver = serial_sgd\nepochs = 2\nseed = 3\ntrain = {}\ntest-fraction = 0.2\n",
            data.join("train.bin").display()
        ),
    )
    .unwrap();
    // `test_fraction` only applies to a single data file.
    let out = run(nomad().args(["train", "--config"]).arg(&cfg).current_dir(tmp.path()));
    assert_eq!(out.status.code(), Some(1));

    fs::write(
        &cfg,
        format!(
            "solver = serial_sgd\nepochs = 2\nseed = 3\ndata = {}\ntest_fraction = 0.2\n",
            data.join("ratings.bin").display()
        ),
    )
    .unwrap();
    let log = tmp.path().join("serial.csv");
    ok(nomad().args(["train", "--seed", "5", "--config"]).arg(&cfg).arg("--log").arg(&log).current_dir(tmp.path()));
    let parsed = read_csv(&log).unwrap();
    assert_eq!(parsed.meta("seed"), Some("5"));
    assert_eq!(parsed.meta("config.seed"), Some("5"));
    assert_eq!(parsed.meta("config.epochs"), Some("2"));
    assert_eq!(parsed.meta("config.test_fraction"), Some("0.2"));
    assert_eq!(parsed.meta("test_nnz"), Some("800"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "train = x.bin\nepochs = 1\nepoch = 2\n").unwrap();
    let out = run(nomad().args(["train", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("`epoch`"), "{}", stderr(&out));
}

#[test]
fn log_dir_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let logs = tmp.path().join("env-logs");
    ok(nomad()
        .env("NOMAD_LOG_DIR", &logs)
        .args(["train", "--solver", "als", "--epochs", "1", "--train"])
        .arg(data.join("train.bin")));
    assert!(logs.join("als_t1_m1.csv").is_file());
    assert!(logs.join("als_t1_m1.nmfm").is_file());
}

#[test]
fn als_without_regularization_names_the_empty_column() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("gap.txt");
    // Item 2 of 4 has no ratings.
    fs::write(&path, "%%meta 3 4 4\n0 0 1\n1 1 2\n2 3 1\n0 3 2\n").unwrap();
    let out = run(nomad()
        .args(["train", "--solver", "als", "--lambda", "0", "--k", "1", "--epochs", "2", "--train"])
        .arg(&path)
        .arg("--out-dir")
        .arg(tmp.path()));
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("singular") && err.contains("item 2"), "{err}");
}

#[test]
fn convert_text_to_binary_and_back() {
    let tmp = TempDir::new().unwrap();
    let text = tmp.path().join("r.txt");
    fs::write(&text, "# one-based\n1 1 5\n2 3 1.5\n3 2 4\n").unwrap();
    let bin = tmp.path().join("r.bin");
    ok(nomad().args(["convert", "--one-based", "--input"]).arg(&text).arg("--output").arg(&bin));
    let (meta, entries) = read_binary(&bin).unwrap();
    assert_eq!((meta.m, meta.n, meta.nnz), (3, 3, 3));
    assert_eq!((entries[1].user, entries[1].item, entries[1].value), (1, 2, 1.5));

    let back = tmp.path().join("back.txt");
    ok(nomad().args(["convert", "--to-text", "--input"]).arg(&bin).arg("--output").arg(&back));
    assert_eq!(fs::read_to_string(&back).unwrap(), "%%meta 3 3 3\n0 0 5\n1 2 1.5\n2 1 4\n");
}

#[test]
fn bench_thread_sweep_emits_three_logs_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let out_dir = tmp.path().join("bench");
    ok(nomad()
        .args(["bench", "--solver", "nomad", "--threads", "1,2,4", "--epochs", "3", "--target-rmse", "1e-6", "--train"])
        .arg(data.join("train.bin"))
        .arg("--test")
        .arg(data.join("test.bin"))
        .arg("--out-dir")
        .arg(&out_dir));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("solver,threads,machines,final_rmse,throughput,time_to_target,status")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (row, threads) in rows.iter().zip([1usize, 2, 4]) {
        assert_eq!(row[0], "nomad");
        assert_eq!(row[1], threads.to_string());
        assert_eq!(row[6], "ok");
        // Target unreachable: the time-to-target cell stays empty.
        assert_eq!(row[5], "");
        let log = read_csv(out_dir.join(format!("nomad_t{threads}_m1.csv"))).unwrap();
        let expected = throughput(&log, threads).unwrap();
        assert_eq!(row[4].parse::<f64>().unwrap(), expected);
        assert_eq!(row[3].parse::<f64>().unwrap(), log.final_rmse().unwrap());
    }
}

#[test]
fn bench_records_a_failing_cell_and_continues() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let out_dir = tmp.path().join("bench");
    // DSGD cannot split 60 items 100 ways; the nomad cell still runs.
    let out = run(nomad()
        .args(["bench", "--solver", "dsgd,nomad", "--threads", "100", "--epochs", "1", "--train"])
        .arg(data.join("train.bin"))
        .arg("--out-dir")
        .arg(&out_dir));
    assert_eq!(out.status.code(), Some(1));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("dsgd,100,1,,,,") && rows[0].contains("failed"), "{}", rows[0]);
    assert!(rows[1].starts_with("nomad,100,1,") && rows[1].ends_with(",ok"), "{}", rows[1]);
    assert!(out_dir.join("nomad_t100_m1.csv").is_file());
}

#[test]
fn two_peers_over_loopback_complete_and_log() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let hosts = format!("127.0.0.1:{},127.0.0.1:{}", free_port(), free_port());
    let peer = |rank: &str| {
        let mut cmd = nomad();
        cmd.args(["serve-peer", "--threads", "2", "--epochs", "5", "--seed", "2", "--hosts", &hosts, "--rank", rank])
            .arg("--train")
            .arg(data.join("train.bin"))
            .arg("--test")
            .arg(data.join("test.bin"))
            .arg("--out-dir")
            .arg(tmp.path().join(format!("rank{rank}")));
        cmd
    };
    let child = peer("1").stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let root = ok(&mut peer("0"));
    let other = child.wait_with_output().unwrap();
    assert!(other.status.success(), "rank 1: {}", stderr(&other));
    assert!(String::from_utf8_lossy(&root.stdout).contains("final test RMSE"));

    let log = read_csv(tmp.path().join("rank0/nomad_t2_m2.csv")).unwrap();
    assert_eq!(log.meta("machines"), Some("2"));
    assert!(log.final_rmse().unwrap().is_finite());
    // Machines learn each other's counts from periodic progress messages,
    // so a multi-machine run may overshoot its update limit slightly.
    let last = log.last().unwrap();
    assert!((5 * 3600..2 * 5 * 3600).contains(&last.total_updates), "{}", last.total_updates);
    assert!(tmp.path().join("rank0/nomad_t2_m2.nmfm").is_file());
    // Only rank 0 writes outputs.
    assert!(!tmp.path().join("rank1").exists());
}

#[test]
fn peer_with_a_different_k_is_rejected_at_handshake() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let hosts = format!("127.0.0.1:{},127.0.0.1:{}", free_port(), free_port());
    let peer = |rank: &str, k: &str| {
        let mut cmd = nomad();
        cmd.args(["serve-peer", "--epochs", "1", "--connect-timeout", "5", "--hosts", &hosts])
            .args(["--rank", rank, "--k", k])
            .arg("--train")
            .arg(data.join("train.bin"))
            .arg("--out-dir")
            .arg(tmp.path());
        cmd
    };
    let child = peer("1", "4").stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let root = run(&mut peer("0", "3"));
    let other = child.wait_with_output().unwrap();
    assert_eq!(root.status.code(), Some(1));
    assert_eq!(other.status.code(), Some(1));
    assert!(stderr(&root).contains("k mismatch"), "{}", stderr(&root));
    assert!(stderr(&other).contains("k mismatch"), "{}", stderr(&other));
}

#[test]
fn single_host_peer_runs_the_plain_engine() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    ok(nomad()
        .args(["serve-peer", "--rank", "0", "--threads", "2", "--epochs", "2", "--hosts"])
        .arg(format!("127.0.0.1:{}", free_port()))
        .arg("--train")
        .arg(data.join("train.bin"))
        .arg("--out-dir")
        .arg(tmp.path()));
    let log = read_csv(tmp.path().join("nomad_t2_m1.csv")).unwrap();
    assert_eq!(log.meta("machines"), Some("1"));
    assert_eq!(log.meta("p"), Some("2"));
}
