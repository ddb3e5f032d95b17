use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::NnError;
use crate::numfmt::f17;

/// A named, shaped parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            name: name.to_string(),
            shape,
            data,
        }
    }

    pub fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }
}

const MAGIC: &str = "# gatecluster parameters v1";

/// Writes tensors as text: a magic line, `key value` header lines, then per
/// tensor a manifest line `tensor <name> <d1>x<d2>…` followed by its
/// row-major values on one line.
pub fn write_params<W: Write>(tensors: &[Tensor], header: &[(&str, String)], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{MAGIC}")?;
    for (key, value) in header {
        writeln!(sink, "{key} {value}")?;
    }
    for t in tensors {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        writeln!(sink, "tensor {} {}", t.name, shape.join("x"))?;
        let values: Vec<String> = t.data.iter().map(|&v| f17(v)).collect();
        writeln!(sink, "{}", values.join(" "))?;
    }
    Ok(())
}

/// Reads a file produced by [`write_params`], returning tensors and header.
pub fn read_params<R: BufRead>(source: R) -> Result<(Vec<Tensor>, BTreeMap<String, String>), NnError> {
    let bad = |msg: String| NnError::Format(msg);
    let mut lines = source.lines();
    let mut next = || -> Result<Option<String>, NnError> {
        lines.next().transpose().map_err(|e| bad(e.to_string()))
    };
    if next()?.as_deref() != Some(MAGIC) {
        return Err(bad("missing header".into()));
    }
    let mut header = BTreeMap::new();
    let mut tensors = Vec::new();
    while let Some(line) = next()? {
        if line.is_empty() {
            continue;
        }
        if !line.starts_with("tensor ") {
            if !tensors.is_empty() {
                return Err(bad(format!("header line {line:?} after tensors")));
            }
            let (key, value) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            header.insert(key.to_string(), value.to_string());
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some("tensor"), Some(name), Some(shape)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("bad manifest line {line:?}")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
            .collect::<Result<_, _>>()?;
        let values = next()?.ok_or_else(|| bad(format!("no values for {name}")))?;
        let data: Vec<f64> = values
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad value {v:?} in {name}"))))
            .collect::<Result<_, _>>()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(bad(format!("{name}: shape {shape:?} does not match {} values", data.len())));
        }
        tensors.push(Tensor::new(name, shape, data));
    }
    Ok((tensors, header))
}
