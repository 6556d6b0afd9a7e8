use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const HEADER: &str = "ussl-params v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named trainable tensors with their gradient buffers.
///
/// Entries iterate in name order, which keeps updates and saved files
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.insert(name, Parameter { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.grad)
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Matrix) -> Result<()> {
        self.get_mut(name)?.grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Text form: a header line, then per entry a `name rows cols` line
    /// followed by one line of row-major values. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n{}\n", self.entries.len());
        for (name, p) in &self.entries {
            out.push_str(&format!("{} {} {}\n", name, p.value.rows(), p.value.cols()));
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(parse_err(1, "missing parameter file header")),
        }
        let (line, count) = lines.next().ok_or_else(|| parse_err(2, "missing entry count"))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| parse_err(line, "invalid entry count"))?;

        let mut store = ParameterStore::new();
        for _ in 0..count {
            let (line, head) = lines.next().ok_or_else(|| parse_err(0, "truncated file"))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(parse_err(line, "expected `name rows cols`"));
            }
            let rows: usize = parts[1].parse().map_err(|_| parse_err(line, "invalid rows"))?;
            let cols: usize = parts[2].parse().map_err(|_| parse_err(line, "invalid cols"))?;
            let (line, body) = lines.next().unwrap_or((line + 1, ""));
            let data = body
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err(line, "invalid value"))?;
            let value = Matrix::new(rows, cols, data).map_err(|e| parse_err(line, &e.to_string()))?;
            store
                .insert(parts[0], value)
                .map_err(|e| parse_err(line, &e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParameterStore::from_text(&text)
    }

    /// Copies values for every name present in both stores.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, p) in &mut self.entries {
            let src = other.value(name)?;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("copy_values_from", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
