//! Checkpoint files: one line of JSON manifest followed by the concatenated
//! binary tensors it describes.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PhenoNet, PhenoNetConfig, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, DType, Scalar, Tensor};
use crate::util::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "phenokit-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dtype: DType,
    config: PhenoNetConfig,
    stats_ready: bool,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    /// Byte offset of the tensor record relative to the end of the manifest line.
    offset: usize,
    length: usize,
}

fn records<T: Scalar>(net: &PhenoNet<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> = net.param_names().iter().cloned().zip(net.params()).collect();
    for (name, run) in net.bn_names().iter().zip(net.running_stats()) {
        out.push((format!("{name}.running_mean"), &run.mean));
        out.push((format!("{name}.running_var"), &run.var));
    }
    out
}

pub fn save_checkpoint<T: Scalar>(net: &PhenoNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in records(net) {
        let offset = payload.len();
        write_tensor_to(&mut payload, t)?;
        tensors.push(Entry { name, offset, length: payload.len() - offset });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: T::DTYPE,
        config: net.config().clone(),
        stats_ready: net.stats_ready(),
        tensors,
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PhenoNet<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::input(path, e.to_string()))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let manifest: Manifest =
        serde_json::from_slice(&line).map_err(|e| Error::input(path, format!("checkpoint manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::input(path, format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::input(path, format!("checkpoint stores {:?}, requested {:?}", manifest.dtype, T::DTYPE)));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    let mut net = PhenoNet::<T>::new(manifest.config)?;
    let expected: Vec<(String, Vec<usize>)> = records(&net).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Checkpoint { param: name.clone(), detail: "missing".into() })?;
        let bytes = payload.get(entry.offset..entry.offset + entry.length).ok_or_else(|| Error::Checkpoint {
            param: name.clone(),
            detail: "record extends past end of file".into(),
        })?;
        let t: Tensor<T> =
            read_tensor_from(bytes).map_err(|e| Error::Checkpoint { param: name.clone(), detail: e.to_string() })?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint {
                param: name.clone(),
                detail: format!("shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        loaded.push(t);
    }
    if let Some(extra) = manifest.tensors.iter().find(|e| !expected.iter().any(|(n, _)| n == &e.name)) {
        return Err(Error::Checkpoint { param: extra.name.clone(), detail: "not part of this architecture".into() });
    }
    let n_params = net.params().len();
    let rest = loaded.split_off(n_params);
    net.params_mut().iter_mut().zip(loaded).for_each(|(p, t)| *p = t);
    let mut running = Vec::new();
    let mut stats = rest.into_iter();
    while let (Some(mean), Some(var)) = (stats.next(), stats.next()) {
        running.push(RunningStats { mean, var });
    }
    net.set_running_stats(running, manifest.stats_ready)?;
    Ok(net)
}
