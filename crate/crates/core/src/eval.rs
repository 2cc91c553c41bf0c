//! Test RMSE, throughput, and the checkpoint log written as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::data::{Rating, ShardedRatings};
use crate::error::{Error, Result};
use crate::model::{objective, squared_error, FactorMatrix, HyperParams};

pub const CSV_HEADER: &str = "elapsed_sec,total_updates,train_objective,test_rmse";

/// Root mean squared prediction error over `test`. Predictions are not
/// clipped to any rating range.
pub fn test_rmse(w: &FactorMatrix, h: &FactorMatrix, test: &[Rating]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok((squared_error(w, h, test)? as f64 / test.len() as f64).sqrt())
}

/// Training objective and test RMSE (NaN without a test set).
pub fn evaluate(
    w: &FactorMatrix,
    h: &FactorMatrix,
    train: &ShardedRatings,
    params: &HyperParams,
    test: &[Rating],
) -> Result<(f64, f64)> {
    let obj = objective(w, h, train, params)? as f64;
    let rmse = if test.is_empty() {
        f64::NAN
    } else {
        test_rmse(w, h, test)?
    };
    Ok((obj, rmse))
}

/// Wall clock that only runs between `start` and `stop`, so evaluation
/// pauses can be left out of reported times.
#[derive(Debug, Default)]
pub struct Stopwatch {
    since: Option<Instant>,
    banked: Duration,
}

impl Stopwatch {
    pub fn start(&mut self) {
        self.since.get_or_insert_with(Instant::now);
    }

    pub fn stop(&mut self) {
        if let Some(t) = self.since.take() {
            self.banked += t.elapsed();
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.banked + self.since.map_or(Duration::ZERO, |t| t.elapsed())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    /// Wall-clock seconds of optimization, excluding checkpoint pauses.
    pub elapsed_sec: f64,
    pub total_updates: u64,
    pub train_objective: f64,
    /// NaN when the run had no test set.
    pub test_rmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceLog {
    pub meta: Vec<(String, String)>,
    pub records: Vec<LogRecord>,
}

impl ConvergenceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Appends a record unless it would break the strictly increasing
    /// elapsed/update sequence; returns whether it was kept.
    pub fn push(&mut self, record: LogRecord) -> bool {
        if let Some(last) = self.records.last() {
            if record.total_updates <= last.total_updates || record.elapsed_sec <= last.elapsed_sec {
                return false;
            }
        }
        self.records.push(record);
        true
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn final_rmse(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_rmse)
    }

    /// Elapsed seconds of the first record whose test RMSE is at or below
    /// `target`.
    pub fn time_to_rmse(&self, target: f64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.test_rmse <= target)
            .map(|r| r.elapsed_sec)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "#{k}={v}");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.elapsed_sec, r.total_updates, r.train_objective, r.test_rmse
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut log = Self::new();
        let mut header_seen = false;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if let Some(kv) = line.strip_prefix('#') {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("metadata line without `=`: `{line}`"),
                })?;
                log.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line.trim() != CSV_HEADER {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expected header `{CSV_HEADER}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let bad = |what: &str| Error::Parse {
                line: lineno,
                msg: format!("bad {what}"),
            };
            log.records.push(LogRecord {
                elapsed_sec: fields[0].parse().map_err(|_| bad("elapsed_sec"))?,
                total_updates: fields[1].parse().map_err(|_| bad("total_updates"))?,
                train_objective: fields[2].parse().map_err(|_| bad("train_objective"))?,
                test_rmse: fields[3].parse().map_err(|_| bad("test_rmse"))?,
            });
        }
        if !header_seen {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: "missing CSV header".into(),
            });
        }
        Ok(log)
    }
}

pub fn write_csv(log: &ConvergenceLog, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, log.to_csv())?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<ConvergenceLog> {
    ConvergenceLog::from_csv(&fs::read_to_string(path)?)
}

/// Updates per worker per second between the first and last record.
pub fn throughput(log: &ConvergenceLog, workers: usize) -> Result<f64> {
    let (first, last) = match (log.records.first(), log.records.last()) {
        (Some(a), Some(b)) if log.records.len() >= 2 => (a, b),
        _ => return Err(Error::Throughput("need at least two records".into())),
    };
    let dt = last.elapsed_sec - first.elapsed_sec;
    if !(dt > 0.0) {
        return Err(Error::Throughput("no elapsed time between records".into()));
    }
    if workers == 0 {
        return Err(Error::Throughput("zero workers".into()));
    }
    Ok((last.total_updates - first.total_updates) as f64 / dt / workers as f64)
}

/// gnuplot script plotting test RMSE against seconds for the given CSVs.
pub fn gnuplot_script(csv_paths: &[&str], title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set datafile commentschars '#'");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set title '{title}'");
    let _ = writeln!(s, "set xlabel 'seconds'");
    let _ = writeln!(s, "set ylabel 'test RMSE'");
    let plots: Vec<String> = csv_paths
        .iter()
        .map(|p| format!("'{p}' using 1:4 with lines title '{p}'"))
        .collect();
    let _ = writeln!(s, "plot {}", plots.join(", \\\n     "));
    s
}
