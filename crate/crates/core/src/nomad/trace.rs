//! Per-event traces of a run and the audits replayed over them.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{step_size, HyperParams, Partition};
use crate::Real;

pub const TRACE_HEADER: &str = "event,worker,item,version,user,update_count";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    /// A worker took a parcel off its queue; `version` is the parcel's
    /// version before processing.
    Pop,
    /// One rating update inside a pop; `update_count` is the pair's count
    /// after the update.
    Update,
    /// A parcel started a circulation on machine `worker`.
    Arrive,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceEvent::Pop => "pop",
            TraceEvent::Update => "update",
            TraceEvent::Arrive => "arrive",
        })
    }
}

impl FromStr for TraceEvent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pop" => Ok(TraceEvent::Pop),
            "update" => Ok(TraceEvent::Update),
            "arrive" => Ok(TraceEvent::Arrive),
            other => Err(Error::Format(format!("unknown trace event `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub event: TraceEvent,
    pub worker: u32,
    pub item: u32,
    pub version: u64,
    pub user: u32,
    pub update_count: u32,
    /// Step size used by an update. Kept in memory only; NaN when read back
    /// from a file.
    pub step: Real,
}

impl TraceRecord {
    pub fn pop(worker: u32, item: u32, version: u64) -> Self {
        Self {
            event: TraceEvent::Pop,
            worker,
            item,
            version,
            user: 0,
            update_count: 0,
            step: 0.0,
        }
    }

    pub fn arrive(machine: u32, item: u32, version: u64) -> Self {
        Self {
            event: TraceEvent::Arrive,
            ..Self::pop(machine, item, version)
        }
    }
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        match r.event {
            TraceEvent::Update => writeln!(
                out,
                "{},{},{},{},{},{}",
                r.event, r.worker, r.item, r.version, r.user, r.update_count
            )?,
            _ => writeln!(out, "{},{},{},{},,", r.event, r.worker, r.item, r.version)?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.is_empty() || line == TRACE_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::Parse {
            line: lineno,
            msg: msg.to_string(),
        };
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let event: TraceEvent = f[0].parse().map_err(|_| bad("bad event"))?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad number"));
        let (user, update_count) = match event {
            TraceEvent::Update => (num(f[4])? as u32, num(f[5])? as u32),
            _ => (0, 0),
        };
        out.push(TraceRecord {
            event,
            worker: num(f[1])? as u32,
            item: num(f[2])? as u32,
            version: num(f[3])?,
            user,
            update_count,
            step: Real::NAN,
        });
    }
    Ok(out)
}

/// Per-column versions observed at pops must be exactly 0, 1, 2, ... with
/// no repeats, and every update must belong to the pop preceding it on the
/// same worker. Returns the number of violations.
pub fn audit_versions(records: &[TraceRecord]) -> usize {
    let mut violations = 0;
    let mut per_item: HashMap<u32, Vec<u64>> = HashMap::new();
    let mut current: HashMap<u32, (u32, u64)> = HashMap::new();
    for r in records {
        match r.event {
            TraceEvent::Pop => {
                per_item.entry(r.item).or_default().push(r.version);
                current.insert(r.worker, (r.item, r.version));
            }
            TraceEvent::Update => {
                if current.get(&r.worker) != Some(&(r.item, r.version)) {
                    violations += 1;
                }
            }
            TraceEvent::Arrive => {}
        }
    }
    for versions in per_item.values_mut() {
        versions.sort_unstable();
        for (expect, &v) in versions.iter().enumerate() {
            if v != expect as u64 {
                violations += 1;
            }
        }
    }
    violations
}

/// Updates whose user row is not owned by the updating worker.
pub fn audit_ownership(records: &[TraceRecord], partition: &Partition) -> usize {
    records
        .iter()
        .filter(|r| r.event == TraceEvent::Update)
        .filter(|r| {
            (r.user as usize) >= partition.m() || partition.owner(r.user as usize) != r.worker as usize
        })
        .count()
}

/// The t-th update of each pair must use exactly `step_size(t - 1)`, and a
/// pair's counts must run 1, 2, 3, ... in trace order. Records read back
/// from a file (NaN steps) only get the count check.
pub fn audit_step_sizes(records: &[TraceRecord], params: &HyperParams) -> usize {
    let mut violations = 0;
    let mut last: HashMap<(u32, u32), u32> = HashMap::new();
    for r in records.iter().filter(|r| r.event == TraceEvent::Update) {
        let prev = last.insert((r.user, r.item), r.update_count).unwrap_or(0);
        if r.update_count != prev + 1 || r.update_count == 0 {
            violations += 1;
            continue;
        }
        if !r.step.is_nan() && r.step != step_size(params, (r.update_count - 1) as u64) {
            violations += 1;
        }
    }
    violations
}

/// Within a machine visit a parcel must be processed by distinct local
/// workers, `threads` of them unless the run ended mid-visit. Worker ids are
/// global, machine `r` owning `r * threads .. (r + 1) * threads`.
pub fn audit_circulation(records: &[TraceRecord], threads: usize) -> usize {
    let mut violations = 0;
    let mut arrivals: HashMap<u32, Vec<(u64, u32)>> = HashMap::new();
    let mut pops: HashMap<u32, HashMap<u64, u32>> = HashMap::new();
    for r in records {
        match r.event {
            TraceEvent::Arrive => arrivals.entry(r.item).or_default().push((r.version, r.worker)),
            TraceEvent::Pop => {
                if pops.entry(r.item).or_default().insert(r.version, r.worker).is_some() {
                    violations += 1;
                }
            }
            TraceEvent::Update => {}
        }
    }
    let empty = HashMap::new();
    for (item, mut visits) in arrivals {
        visits.sort_unstable();
        let item_pops = pops.get(&item).unwrap_or(&empty);
        for (idx, &(start, machine)) in visits.iter().enumerate() {
            let end = visits.get(idx + 1).map(|v| v.0);
            let mut seen = Vec::with_capacity(threads);
            let mut v = start;
            while seen.len() < threads && end.is_none_or(|e| v < e) {
                let Some(&worker) = item_pops.get(&v) else { break };
                if worker as usize / threads != machine as usize || seen.contains(&worker) {
                    violations += 1;
                }
                seen.push(worker);
                v += 1;
            }
            // a later visit must start exactly where this one completed
            if let Some(next) = end {
                if next != start + threads as u64 || seen.len() != threads {
                    violations += 1;
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::partition_rows;

    fn upd(worker: u32, item: u32, version: u64, user: u32, count: u32, step: Real) -> TraceRecord {
        TraceRecord {
            event: TraceEvent::Update,
            worker,
            item,
            version,
            user,
            update_count: count,
            step,
        }
    }

    #[test]
    fn file_roundtrip() {
        let recs = vec![
            TraceRecord::arrive(0, 3, 0),
            TraceRecord::pop(1, 3, 0),
            upd(1, 3, 0, 7, 1, 0.5),
        ];
        let mut buf = Vec::new();
        write_trace(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "event,worker,item,version,user,update_count\narrive,0,3,0,,\npop,1,3,0,,\nupdate,1,3,0,7,1\n");
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].user, 7);
        assert!(back[2].step.is_nan());
        assert!(read_trace(&b"pop,1,2\n"[..]).is_err());
    }

    #[test]
    fn version_audit_detects_gaps_and_repeats() {
        let good = vec![
            TraceRecord::pop(0, 1, 0),
            upd(0, 1, 0, 0, 1, 0.1),
            TraceRecord::pop(1, 1, 1),
            TraceRecord::pop(1, 2, 0),
        ];
        assert_eq!(audit_versions(&good), 0);
        let gap = vec![TraceRecord::pop(0, 1, 0), TraceRecord::pop(0, 1, 2)];
        assert_eq!(audit_versions(&gap), 1);
        let dup = vec![TraceRecord::pop(0, 1, 0), TraceRecord::pop(1, 1, 0)];
        assert!(audit_versions(&dup) > 0);
        let stray = vec![TraceRecord::pop(0, 1, 0), upd(0, 2, 0, 0, 1, 0.1)];
        assert_eq!(audit_versions(&stray), 1);
    }

    #[test]
    fn ownership_and_steps() {
        let part = partition_rows(4, 2).unwrap();
        let params = HyperParams::new(1, 0.1, 0.012, 0.05).unwrap();
        let s0 = step_size(&params, 0);
        let s1 = step_size(&params, 1);
        let recs = vec![upd(0, 0, 0, 1, 1, s0), upd(0, 0, 1, 1, 2, s1), upd(1, 0, 2, 3, 1, s0)];
        assert_eq!(audit_ownership(&recs, &part), 0);
        assert_eq!(audit_step_sizes(&recs, &params), 0);
        let bad = vec![upd(1, 0, 0, 0, 1, s0), upd(0, 0, 0, 1, 1, s1), upd(0, 0, 0, 1, 3, s0)];
        assert_eq!(audit_ownership(&bad, &part), 1);
        assert_eq!(audit_step_sizes(&bad, &params), 2);
    }

    #[test]
    fn circulation_audit() {
        // machine 1 owns workers 2 and 3
        let ok = vec![
            TraceRecord::arrive(1, 5, 0),
            TraceRecord::pop(3, 5, 0),
            TraceRecord::pop(2, 5, 1),
            TraceRecord::arrive(0, 5, 2),
            TraceRecord::pop(0, 5, 2),
        ];
        assert_eq!(audit_circulation(&ok, 2), 0);
        let repeat = vec![
            TraceRecord::arrive(1, 5, 0),
            TraceRecord::pop(3, 5, 0),
            TraceRecord::pop(3, 5, 1),
        ];
        assert_eq!(audit_circulation(&repeat, 2), 1);
        let foreign = vec![TraceRecord::arrive(1, 5, 0), TraceRecord::pop(0, 5, 0)];
        assert_eq!(audit_circulation(&foreign, 2), 1);
        let short = vec![
            TraceRecord::arrive(1, 5, 0),
            TraceRecord::pop(3, 5, 0),
            TraceRecord::arrive(0, 5, 1),
        ];
        assert_eq!(audit_circulation(&short, 2), 1);
    }
}
