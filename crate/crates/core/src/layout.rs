//! Architecture layout files for parameter counting.
//!
//! A layout is a line-oriented text file. `#` starts a comment; directives are
//! `name <id>`, `unit M|K`, and `layers <count>`; every other line is
//! `<module> <rows> <cols>` and describes one adapted matrix per layer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::adapter::{param_count, AdapterMethod};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CountUnit {
    #[serde(rename = "K")]
    Thousands,
    #[serde(rename = "M")]
    Millions,
}

impl CountUnit {
    pub fn divisor(self) -> u64 {
        match self {
            CountUnit::Thousands => 1_000,
            CountUnit::Millions => 1_000_000,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            CountUnit::Thousands => "K",
            CountUnit::Millions => "M",
        }
    }
}

impl FromStr for CountUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" => Ok(CountUnit::Thousands),
            "M" => Ok(CountUnit::Millions),
            other => Err(Error::format("layout", format!("unknown unit {other:?}, expected K or M"))),
        }
    }
}

/// `count` in `unit` with two decimals, rounding half up: 2,064,384 → "2.06 M".
pub fn format_count(count: u64, unit: CountUnit) -> String {
    let d = u128::from(unit.divisor());
    let hundredths = (u128::from(count) * 100 + d / 2) / d;
    format!("{}.{:02} {}", hundredths / 100, hundredths % 100, unit.suffix())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Module {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub name: String,
    pub unit: CountUnit,
    pub layers: usize,
    /// Adapted matrices of one layer.
    pub modules: Vec<Module>,
}

/// Layouts shipped with the crate, by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("mistral7b", include_str!("../layouts/mistral7b.layout")),
    ("gemma2-9b", include_str!("../layouts/gemma2-9b.layout")),
    ("llama3.2-3b", include_str!("../layouts/llama3.2-3b.layout")),
    ("roberta-large", include_str!("../layouts/roberta-large.layout")),
];

impl Layout {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::format("layout", format!("line {line}: {msg}"));
        let mut name = None;
        let mut unit = CountUnit::Millions;
        let mut layers = None;
        let mut modules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let dim = |s: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(bad(lineno, format!("expected a positive integer, found {s:?}"))),
                }
            };
            match fields.as_slice() {
                ["name", id] => name = Some((*id).to_string()),
                ["unit", u] => unit = u.parse().map_err(|_| bad(lineno, format!("unknown unit {u:?}")))?,
                ["layers", n] => layers = Some(dim(n)?),
                [module, rows, cols] => modules.push(Module {
                    name: (*module).to_string(),
                    rows: dim(rows)?,
                    cols: dim(cols)?,
                }),
                _ => return Err(bad(lineno, format!("cannot parse {line:?}"))),
            }
        }
        let layers = layers.ok_or_else(|| Error::format("layout", "missing `layers` directive"))?;
        if modules.is_empty() {
            return Err(Error::format("layout", "no modules listed"));
        }
        Ok(Self {
            name: name.unwrap_or_else(|| "unnamed".into()),
            unit,
            layers,
            modules,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("bundled layouts parse"))
    }

    /// A bundled name, or else a path on disk.
    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::bundled(spec) {
            Some(l) => Ok(l),
            None => Self::load(Path::new(spec)),
        }
    }

    /// Every adapted matrix of the model, layer by layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .flat_map(|_| self.modules.iter().map(|m| (m.rows, m.cols)))
            .collect()
    }

    pub fn count(&self, method: AdapterMethod, rank: usize) -> Result<u64> {
        param_count(method, &self.shapes(), rank)
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} layers × {} modules)", self.name, self.layers, self.modules.len())
    }
}
