//! Output writers and small input parsers shared by the subcommands. All
//! emitted files are plain CSV or JSON with round-trip float formatting, so
//! identical runs produce byte-identical artifacts.

use gntk_core::error::{Error, Result};
use gntk_core::kernel::TraceSample;
use ndarray::Array2;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root)?;
        Ok(OutDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, contents)?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<V: Serialize>(&self, name: &str, value: &V) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::InvalidParameter(format!("json serialization: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// Dense matrix as text: one row per line, space-separated round-trip floats.
pub fn matrix_to_text(matrix: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in matrix.rows() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn trace_to_csv(samples: &[TraceSample<f64>]) -> String {
    let mut out = String::from("depth,min,max,mean,spread\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.depth, s.theta.min, s.theta.max, s.theta.mean, s.theta.spread
        );
    }
    out
}

/// Comma-separated floats, with a `log:start,end,count` form for log grids.
pub fn parse_time_grid(spec: &str) -> Result<Vec<f64>> {
    if let Some(rest) = spec.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidParameter(format!(
                "log grid needs start,end,count, got {rest:?}"
            )));
        }
        let start: f64 = parts[0]
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad number {:?}", parts[0])))?;
        let end: f64 = parts[1]
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad number {:?}", parts[1])))?;
        let count: usize = parts[2]
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad count {:?}", parts[2])))?;
        if start <= 0.0 || end <= start || count < 2 {
            return Err(Error::InvalidParameter(
                "log grid needs 0 < start < end and count >= 2".into(),
            ));
        }
        let ratio = (end / start).powf(1.0 / (count as f64 - 1.0));
        Ok((0..count).map(|k| start * ratio.powi(k as i32)).collect())
    } else {
        spec.split(',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("bad time {t:?}")))
            })
            .collect()
    }
}

/// Probability tokens: plain floats or multiples of the critical probability
/// `pc = 1/(n-1)`, written like `pc`, `0.5pc`, `2pc`.
pub fn parse_p_values(spec: &str, n: usize) -> Result<Vec<f64>> {
    let pc = gntk_core::sampling::critical_probability(n);
    spec.split(',')
        .filter(|t| !t.is_empty())
        .map(|tok| {
            let t = tok.trim();
            if let Some(mult) = t.strip_suffix("pc") {
                let m: f64 = if mult.is_empty() {
                    1.0
                } else {
                    mult.parse().map_err(|_| {
                        Error::InvalidParameter(format!("bad pc multiplier {t:?}"))
                    })?
                };
                Ok(m * pc)
            } else {
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("bad probability {t:?}")))
            }
        })
        .collect()
}

/// Comma-separated usize list.
pub fn parse_usize_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidParameter(format!("bad integer {t:?}")))
        })
        .collect()
}

/// Flat `key = value` config file mirroring long flag names; `#` comments.
/// Returns CLI-style tokens to splice in front of the user's flags.
pub fn config_file_to_args(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut args = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k.trim(), v.trim()),
                None => (line, ""),
            },
        };
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "empty key".into(),
            });
        }
        match value {
            "" | "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.push(v.to_string());
            }
        }
    }
    Ok(args)
}
