//! Parameter checkpoints: a single JSON document mapping parameter name to
//! its shape and flat data. Keys are sorted, so identical parameters always
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::NamedParams;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, params: &NamedParams) -> Result<()> {
    let map: BTreeMap<String, Entry> = params
        .iter()
        .map(|(name, t)| (name.to_string(), Entry { shape: t.shape(), data: t.data() }))
        .collect();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &map)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Load a checkpoint into an existing parameter set. The checkpoint must
/// contain exactly the expected names with matching shapes.
pub fn load_checkpoint(path: &Path, params: &NamedParams) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let map: BTreeMap<String, Entry> = serde_json::from_str(&text)?;
    for (name, tensor) in params.iter() {
        let entry = map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} does not match expected {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.data.len() != numel {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: {} values for shape {:?}",
                entry.data.len(),
                entry.shape
            )));
        }
        tensor.set_data(entry.data.clone())?;
    }
    if map.len() != params.len() {
        let expected: std::collections::BTreeSet<&str> = params.iter().map(|(n, _)| n).collect();
        let extra: Vec<&String> =
            map.keys().filter(|k| !expected.contains(k.as_str())).collect();
        return Err(Error::Checkpoint(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}
