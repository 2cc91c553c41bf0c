//! Run configuration: `key = value` files overlaid by command-line flags.
//!
//! Keys are the long flag names with `-` or `_` interchangeable, so every
//! flag can also live in a file. Values are kept as strings until the whole
//! overlay is done; [`RunConfig::from_entries`] then parses them in one go.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use nomad_core::{Balancing, Budget, CheckpointInterval, HyperParams, RegMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Nomad,
    SerialSgd,
    Dsgd,
    Ccdpp,
    Als,
}

impl FromStr for Solver {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match normalize(s).as_str() {
            "nomad" => Solver::Nomad,
            "serial_sgd" | "sgd" | "serial" => Solver::SerialSgd,
            "dsgd" => Solver::Dsgd,
            "ccdpp" | "ccd++" | "ccd" => Solver::Ccdpp,
            "als" => Solver::Als,
            other => bail!("unknown solver `{other}` (nomad, serial_sgd, dsgd, ccdpp, als)"),
        })
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Nomad => "nomad",
            Solver::SerialSgd => "serial_sgd",
            Solver::Dsgd => "dsgd",
            Solver::Ccdpp => "ccdpp",
            Solver::Als => "als",
        })
    }
}

pub fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Raw `key -> value` pairs, later entries overriding earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Entries(BTreeMap<String, String>);

impl Entries {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{t}`", idx + 1))?;
            let v = v.trim().trim_matches('"');
            out.set(k, v);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(normalize(key), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn overlay(&mut self, other: &Entries) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("bad value `{v}` for `{key}`: {e}")))
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        Ok(match self.get(key) {
            None => false,
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "" | "true" | "yes" | "1" | "on" => true,
                "false" | "no" | "0" | "off" => false,
                _ => bail!("bad value `{v}` for `{key}`: expected true or false"),
            },
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|e| anyhow!("bad entry `{s}` in `{key}`: {e}")))
                    .collect()
            })
            .transpose()
    }
}

/// Where the ratings come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Split { train: PathBuf, test: Option<PathBuf> },
    /// One file, split here with a seeded uniform split.
    Single { data: PathBuf, test_fraction: f64 },
}

/// Everything `train`, `bench` and `serve-peer` need.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub solvers: Vec<Solver>,
    pub source: DataSource,
    /// Index base of text inputs.
    pub one_based: bool,
    pub params: HyperParams,
    pub threads: Vec<usize>,
    pub machines: Vec<usize>,
    pub balancing: Balancing,
    pub batch_capacity: Option<usize>,
    pub max_delay_ms: Option<u64>,
    /// `None` means one checkpoint per epoch.
    pub checkpoint: Option<CheckpointInterval>,
    pub budget: Budget,
    pub seed: u64,
    pub inner_iters: usize,
    pub dsgd_step: f64,
    pub log: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub gnuplot: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub rank: Option<usize>,
    pub hosts: Vec<String>,
    pub connect_timeout_secs: f64,
    /// The merged entries, echoed into log metadata.
    pub effective: Entries,
}

/// Keys `RunConfig` understands; anything else is rejected as a typo.
pub const KNOWN_KEYS: &[&str] = &[
    "solver",
    "train",
    "test",
    "data",
    "test_fraction",
    "one_based",
    "preset",
    "k",
    "lambda",
    "alpha",
    "beta",
    "reg_mode",
    "threads",
    "machines",
    "balancing",
    "batch_capacity",
    "max_delay_ms",
    "checkpoint_secs",
    "checkpoint_updates",
    "epochs",
    "seconds",
    "max_updates",
    "target_rmse",
    "seed",
    "inner_iters",
    "dsgd_step",
    "log",
    "model",
    "trace",
    "gnuplot",
    "out_dir",
    "rank",
    "hosts",
    "connect_timeout",
];

impl RunConfig {
    pub fn from_entries(e: Entries) -> Result<Self> {
        if let Some((k, _)) = e.iter().find(|(k, _)| !KNOWN_KEYS.contains(k)) {
            bail!("unknown configuration key `{k}`");
        }

        let solvers = e.list::<Solver>("solver")?.unwrap_or_else(|| vec![Solver::Nomad]);
        if solvers.is_empty() {
            bail!("`solver` lists no solver");
        }

        let train = e.get("train").map(PathBuf::from);
        let test = e.get("test").map(PathBuf::from);
        let data = e.get("data").map(PathBuf::from);
        let source = match (train, data) {
            (Some(_), Some(_)) => bail!("give either `train` (with optional `test`) or `data`, not both"),
            (None, None) => bail!("no data source: pass --train FILE or --data FILE"),
            (Some(train), None) => {
                if e.get("test_fraction").is_some() {
                    bail!("`test_fraction` only applies to `data`");
                }
                DataSource::Split { train, test }
            }
            (None, Some(data)) => {
                if test.is_some() {
                    bail!("`test` cannot be combined with `data`; use `train` instead");
                }
                let test_fraction = e.parsed::<f64>("test_fraction")?.unwrap_or(0.1);
                if !(0.0..1.0).contains(&test_fraction) {
                    bail!("test_fraction = {test_fraction} must lie in [0, 1)");
                }
                DataSource::Single { data, test_fraction }
            }
        };

        let preset = e.get("preset").unwrap_or("synthetic");
        let mut params = HyperParams::preset(preset)?;
        if let Some(k) = e.parsed("k")? {
            params.k = k;
        }
        if let Some(v) = e.parsed("lambda")? {
            params.lambda = v;
        }
        if let Some(v) = e.parsed("alpha")? {
            params.alpha = v;
        }
        if let Some(v) = e.parsed("beta")? {
            params.beta = v;
        }
        if let Some(v) = e.parsed::<RegMode>("reg_mode")? {
            params.reg_mode = v;
        }
        params.validate()?;

        let threads = e.list::<usize>("threads")?.unwrap_or_else(|| vec![1]);
        let machines = e.list::<usize>("machines")?.unwrap_or_else(|| vec![1]);
        if threads.is_empty() || threads.contains(&0) {
            bail!("`threads` must list positive counts");
        }
        if machines.is_empty() || machines.contains(&0) {
            bail!("`machines` must list positive counts");
        }

        let checkpoint = match (e.parsed::<f64>("checkpoint_secs")?, e.parsed::<u64>("checkpoint_updates")?) {
            (Some(_), Some(_)) => bail!("set at most one of `checkpoint_secs` and `checkpoint_updates`"),
            (Some(s), None) if s.is_nan() || s <= 0.0 => bail!("checkpoint_secs = {s} must be positive"),
            (Some(s), None) => Some(CheckpointInterval::Seconds(s)),
            (None, Some(0)) => bail!("checkpoint_updates must be positive"),
            (None, Some(u)) => Some(CheckpointInterval::Updates(u)),
            (None, None) => None,
        };

        let budget = Budget {
            max_seconds: e.parsed("seconds")?,
            max_epochs: e.parsed("epochs")?,
            max_updates: e.parsed("max_updates")?,
            target_rmse: e.parsed("target_rmse")?,
        };
        budget
            .validate()
            .context("budget is empty: pass --epochs, --seconds or --max-updates")?;

        let inner_iters = e.parsed("inner_iters")?.unwrap_or(1);
        let dsgd_step = e.parsed("dsgd_step")?.unwrap_or(0.01);
        let hosts = e.list::<String>("hosts")?.unwrap_or_default();

        Ok(Self {
            solvers,
            source,
            one_based: e.flag("one_based")?,
            params,
            threads,
            machines,
            balancing: e.parsed("balancing")?.unwrap_or_default(),
            batch_capacity: e.parsed("batch_capacity")?,
            max_delay_ms: e.parsed("max_delay_ms")?,
            checkpoint,
            budget,
            seed: e.parsed("seed")?.unwrap_or(1),
            inner_iters,
            dsgd_step,
            log: e.get("log").map(PathBuf::from),
            model: e.get("model").map(PathBuf::from),
            trace: e.get("trace").map(PathBuf::from),
            gnuplot: e.get("gnuplot").map(PathBuf::from),
            out_dir: e.get("out_dir").map(PathBuf::from),
            rank: e.parsed("rank")?,
            hosts,
            connect_timeout_secs: e.parsed("connect_timeout")?.unwrap_or(30.0),
            effective: e,
        })
    }

    /// Directory for outputs whose path was not given: `--out-dir`, then
    /// `NOMAD_LOG_DIR`, then the working directory.
    pub fn output_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("NOMAD_LOG_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(pairs: &[(&str, &str)]) -> Entries {
        let mut e = Entries::default();
        for (k, v) in pairs {
            e.set(k, *v);
        }
        e
    }

    #[test]
    fn file_syntax() {
        let e = Entries::parse("# comment\nsolver = als\n\ntarget-rmse= 0.2\nlog = \"out dir/x.csv\"\n").unwrap();
        assert_eq!(e.get("solver"), Some("als"));
        assert_eq!(e.get("target_rmse"), Some("0.2"));
        assert_eq!(e.get("log"), Some("out dir/x.csv"));
        assert!(Entries::parse("no equals sign").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut file = Entries::parse("solver = als\nepochs = 3\nseed = 5").unwrap();
        file.overlay(&entries(&[("seed", "9")]));
        file.set("train", "a.bin");
        let cfg = RunConfig::from_entries(file).unwrap();
        assert_eq!(cfg.solvers, vec![Solver::Als]);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.budget.max_epochs, Some(3.0));
    }

    #[test]
    fn exactly_one_source() {
        let both = entries(&[("train", "a"), ("data", "b"), ("epochs", "1")]);
        assert!(RunConfig::from_entries(both).is_err());
        let none = entries(&[("epochs", "1")]);
        let err = RunConfig::from_entries(none).unwrap_err().to_string();
        assert!(err.contains("data source"), "{err}");
        let single = entries(&[("data", "b"), ("test_fraction", "0.2"), ("epochs", "1")]);
        let cfg = RunConfig::from_entries(single).unwrap();
        assert_eq!(
            cfg.source,
            DataSource::Single {
                data: "b".into(),
                test_fraction: 0.2
            }
        );
    }

    #[test]
    fn budget_must_be_nonempty() {
        let e = entries(&[("train", "a"), ("target_rmse", "0.1")]);
        assert!(RunConfig::from_entries(e).is_err());
    }

    #[test]
    fn preset_then_overrides() {
        let e = entries(&[("train", "a"), ("epochs", "1"), ("preset", "netflix"), ("lambda", "0.5")]);
        let cfg = RunConfig::from_entries(e).unwrap();
        assert_eq!(cfg.params.k, 100);
        assert_eq!(cfg.params.alpha, 0.012);
        assert_eq!(cfg.params.lambda, 0.5);
    }

    #[test]
    fn lists_and_typos() {
        let e = entries(&[("train", "a"), ("epochs", "1"), ("threads", "1, 2,4"), ("solver", "nomad,als")]);
        let cfg = RunConfig::from_entries(e).unwrap();
        assert_eq!(cfg.threads, vec![1, 2, 4]);
        assert_eq!(cfg.solvers, vec![Solver::Nomad, Solver::Als]);
        let typo = entries(&[("train", "a"), ("epochs", "1"), ("epoch", "2")]);
        assert!(RunConfig::from_entries(typo).unwrap_err().to_string().contains("epoch"));
    }
}
