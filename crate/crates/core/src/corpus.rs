//! Plain-text corpus files.
//!
//! ```text
//! alpaca-corpus 1
//! meta generator=sinusoid seed=7 horizon=50
//! records 2
//! record 0 1 1 50 2
//! theta 2.5 0.3
//! <τ rows of n_x + n_y floats>
//! record 1 ...
//! ```
//!
//! Each `record` line carries its index, `n_x`, `n_y`, `τ` and the number of
//! latent parameters; a `theta` line follows only when that count is
//! non-zero. Floats are written in shortest round-trip form, so a save/load
//! cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tasks::TaskDataset;

pub const CORPUS_MAGIC: &str = "alpaca-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub meta: BTreeMap<String, String>,
    pub tasks: Vec<TaskDataset>,
}

impl Corpus {
    pub fn new(tasks: Vec<TaskDataset>) -> Self {
        Corpus {
            meta: BTreeMap::new(),
            tasks,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CORPUS_MAGIC} {CORPUS_VERSION}").unwrap();
        out.push_str("meta");
        for (k, v) in &self.meta {
            write!(out, " {k}={v}").unwrap();
        }
        out.push('\n');
        writeln!(out, "records {}", self.tasks.len()).unwrap();
        for (i, task) in self.tasks.iter().enumerate() {
            let theta = task.theta.as_deref().unwrap_or(&[]);
            writeln!(
                out,
                "record {i} {} {} {} {}",
                task.input_dim(),
                task.output_dim(),
                task.len(),
                theta.len()
            )
            .unwrap();
            if !theta.is_empty() {
                out.push_str("theta");
                for v in theta {
                    write!(out, " {v}").unwrap();
                }
                out.push('\n');
            }
            for t in 0..task.len() {
                let mut first = true;
                for v in task.xs.row(t).iter().chain(task.ys.row(t)) {
                    if !first {
                        out.push(' ');
                    }
                    write!(out, "{v}").unwrap();
                    first = false;
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Corpus> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let header_err = |message: String| Error::Parse {
            context: "corpus header".into(),
            message,
        };

        let (_, magic) = lines.next().ok_or_else(|| header_err("empty file".into()))?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(CORPUS_MAGIC) {
            return Err(header_err(format!("expected '{CORPUS_MAGIC}' magic line")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| header_err("missing format version".into()))?;
        if version != CORPUS_VERSION {
            return Err(header_err(format!("unsupported version {version}")));
        }

        let (_, meta_line) = lines.next().ok_or_else(|| header_err("missing meta line".into()))?;
        let mut fields = meta_line.split_whitespace();
        if fields.next() != Some("meta") {
            return Err(header_err("expected 'meta' line".into()));
        }
        let mut meta = BTreeMap::new();
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| header_err(format!("malformed meta entry '{kv}'")))?;
            meta.insert(k.to_string(), v.to_string());
        }

        let (_, count_line) =
            lines.next().ok_or_else(|| header_err("missing records line".into()))?;
        let count: usize = count_line
            .strip_prefix("records ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| header_err(format!("malformed records line '{count_line}'")))?;

        let mut tasks = Vec::with_capacity(count);
        for index in 0..count {
            let rec_err = |line: usize, message: String| Error::Parse {
                context: format!("record {index} (line {line})"),
                message,
            };
            let (ln, head) = lines
                .next()
                .ok_or_else(|| rec_err(0, "unexpected end of file".into()))?;
            let nums: Vec<usize> = head
                .strip_prefix("record ")
                .map(|rest| rest.split_whitespace().filter_map(|t| t.parse().ok()).collect())
                .unwrap_or_default();
            if nums.len() != 5 || head.split_whitespace().count() != 6 {
                return Err(rec_err(ln, format!("malformed record header '{head}'")));
            }
            if nums[0] != index {
                return Err(rec_err(ln, format!("record index {} out of order", nums[0])));
            }
            let (n_x, n_y, tau, n_theta) = (nums[1], nums[2], nums[3], nums[4]);

            let theta = if n_theta > 0 {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| rec_err(ln, "missing theta line".into()))?;
                let vals = line
                    .strip_prefix("theta")
                    .ok_or_else(|| rec_err(ln, "expected theta line".into()))
                    .and_then(|rest| parse_floats(rest).map_err(|m| rec_err(ln, m)))?;
                if vals.len() != n_theta {
                    return Err(rec_err(
                        ln,
                        format!("expected {n_theta} theta values, got {}", vals.len()),
                    ));
                }
                Some(vals)
            } else {
                None
            };

            let mut xs = Vec::with_capacity(tau * n_x);
            let mut ys = Vec::with_capacity(tau * n_y);
            for _ in 0..tau {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| rec_err(ln, "unexpected end of file in data rows".into()))?;
                let vals = parse_floats(line).map_err(|m| rec_err(ln, m))?;
                if vals.len() != n_x + n_y {
                    return Err(rec_err(
                        ln,
                        format!("expected {} values per row, got {}", n_x + n_y, vals.len()),
                    ));
                }
                xs.extend_from_slice(&vals[..n_x]);
                ys.extend_from_slice(&vals[n_x..]);
            }
            let mut task =
                TaskDataset::new(Matrix::from_vec(tau, n_x, xs)?, Matrix::from_vec(tau, n_y, ys)?)?;
            task.theta = theta;
            tasks.push(task);
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Parse {
                context: format!("line {ln}"),
                message: format!("trailing content after {count} records: '{extra}'"),
            });
        }
        Ok(Corpus { meta, tasks })
    }
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| format!("invalid number '{t}'"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite value '{t}'"))
            }
        })
        .collect()
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_text(&text)
}
