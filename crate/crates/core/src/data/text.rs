use std::collections::HashMap;
use std::io::BufRead;

use super::{DatasetMeta, Rating, SourceFormat};
use crate::error::{Error, Result};
use crate::Real;

/// Whether user/item ids in a text file start at 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexBase {
    Zero,
    One,
}

fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | ';' | ':')
}

/// Parses `user item rating` lines. Blank lines and `#` comments are
/// skipped; fields may be separated by whitespace, commas, semicolons or
/// `::`. A `%%meta m n nnz` header fixes the matrix shape.
pub fn parse_text<R: BufRead>(
    reader: R,
    base: IndexBase,
    name: &str,
) -> Result<(DatasetMeta, Vec<Rating>)> {
    let offset: i64 = match base {
        IndexBase::Zero => 0,
        IndexBase::One => 1,
    };
    let mut declared: Option<(u64, u64, u64)> = None;
    let mut entries = Vec::new();
    let mut seen: HashMap<(u32, u32), usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("%%meta") {
            let nums: Vec<u64> = rest
                .split(is_delimiter)
                .filter(|s| !s.is_empty())
                .map(|s| s.replace('_', "").parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad %%meta header: {e}"),
                })?;
            if nums.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "%%meta header needs `m n nnz`".into(),
                });
            }
            declared = Some((nums[0], nums[1], nums[2]));
            continue;
        }
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(is_delimiter).filter(|s| !s.is_empty()).collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `user item rating`, got `{trimmed}`"),
            });
        }
        let parse_index = |s: &str, what: &str| -> Result<u32> {
            let raw: i64 = s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad {what} index `{s}`"),
            })?;
            let shifted = raw - offset;
            if shifted < 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("{what} index {raw} underflows the index base"),
                });
            }
            u32::try_from(shifted).map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("{what} index {raw} too large"),
            })
        };
        let user = parse_index(fields[0], "user")?;
        let item = parse_index(fields[1], "item")?;
        let value: Real = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad rating `{}`", fields[2]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite rating `{}`", fields[2]),
            });
        }
        if let Some(&first) = seen.get(&(user, item)) {
            return Err(Error::Duplicate {
                line: lineno,
                first,
                user,
                item,
            });
        }
        seen.insert((user, item), lineno);
        entries.push(Rating::new(user, item, value));
    }

    let mut meta = DatasetMeta::from_entries(name, &entries, SourceFormat::Text);
    if let Some((m, n, nnz)) = declared {
        if m < meta.m || n < meta.n {
            return Err(Error::Format(format!(
                "header declares {m}x{n} but indices reach {}x{}",
                meta.m, meta.n
            )));
        }
        meta.m = m;
        meta.n = n;
        meta.declared_nnz = Some(nnz);
    }
    Ok((meta, entries))
}
