//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `DUNCKPT1`, a little-endian `u64` header
//! length, a UTF-8 header of `key=value` lines, then every tensor as
//! row-major little-endian `f64` in the order the header lists them
//! (`tensor=<name> <rows> <cols>` lines).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::baselines::{EnsembleKind, EnsembleModel};
use crate::error::{Error, Result};
use crate::model::{DepthDistribution, DunModel};
use crate::nn::{ArchitectureConfig, Task};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"DUNCKPT1";
const MAX_HEADER: u64 = 1 << 24;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn tensors(model: &DunModel<f64>) -> Vec<(String, Matrix<f64>)> {
    let mut out = Vec::new();
    for block in &model.blocks {
        out.push((block.weight.name.clone(), block.weight.value.clone()));
        out.push((block.bias.name.clone(), block.bias.value.clone()));
        if let Some(bn) = &block.norm {
            let prefix = block.weight.name.trim_end_matches(".weight");
            out.push((bn.scale.name.clone(), bn.scale.value.clone()));
            out.push((bn.shift.name.clone(), bn.shift.value.clone()));
            out.push((format!("{prefix}.running_mean"), Matrix::row_vector(bn.running_mean.clone())));
            out.push((format!("{prefix}.running_var"), Matrix::row_vector(bn.running_var.clone())));
        }
    }
    out.push(("prior_logits".into(), Matrix::row_vector(model.prior().logits().to_vec())));
    out.push((model.variational.name.clone(), model.variational.value.clone()));
    if let Some(p) = &model.noise_log_std {
        out.push((p.name.clone(), p.value.clone()));
    }
    out
}

/// Serializes a model.
pub fn to_bytes(model: &DunModel<f64>) -> Vec<u8> {
    let c = &model.config;
    let mut header = format!(
        "format=1\ntask={}\ninput_dim={}\nhidden_width={}\nmax_depth={}\noutput_dim={}\nresidual={}\nbatchnorm={}\ndropout={}\nseed={}\nvariational_frozen={}\n",
        c.task.as_str(),
        c.input_dim,
        c.hidden_width,
        c.max_depth,
        c.output_dim,
        c.residual,
        c.batchnorm,
        c.dropout,
        model.seed,
        model.variational.frozen
    );
    let tensors = tensors(model);
    for (name, m) in &tensors {
        header.push_str(&format!("tensor={name} {} {}\n", m.rows(), m.cols()));
    }
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model_size(&tensors));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, m) in &tensors {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn model_size(tensors: &[(String, Matrix<f64>)]) -> usize {
    tensors.iter().map(|(_, m)| m.len()).sum()
}

fn parse<V: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<V> {
    let raw = map.get(key).ok_or_else(|| bad(format!("header is missing `{key}`")))?;
    raw.parse().map_err(|_| bad(format!("bad value for `{key}`: {raw}")))
}

/// Parses a model written by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<DunModel<f64>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a DUN checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER || 16 + header_len as usize > bytes.len() {
        return Err(bad("header length out of range"));
    }
    let header_end = 16 + header_len as usize;
    let header = std::str::from_utf8(&bytes[16..header_end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut map = HashMap::new();
    let mut layout = Vec::new();
    for line in header.lines() {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        if key == "tensor" {
            let parts: Vec<&str> = value.split(' ').collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(format!("malformed tensor line `{line}`")));
            };
            let rows: usize = rows.parse().map_err(|_| bad(format!("bad rows in `{line}`")))?;
            let cols: usize = cols.parse().map_err(|_| bad(format!("bad cols in `{line}`")))?;
            layout.push((name.to_string(), rows, cols));
        } else {
            map.insert(key, value);
        }
    }
    if parse::<u32>(&map, "format")? != 1 {
        return Err(bad("unsupported checkpoint format"));
    }
    let task_name: String = parse(&map, "task")?;
    let task = Task::parse(&task_name).ok_or_else(|| bad(format!("unknown task `{task_name}`")))?;
    let config = ArchitectureConfig {
        input_dim: parse(&map, "input_dim")?,
        hidden_width: parse(&map, "hidden_width")?,
        max_depth: parse(&map, "max_depth")?,
        output_dim: parse(&map, "output_dim")?,
        residual: parse(&map, "residual")?,
        batchnorm: parse(&map, "batchnorm")?,
        task,
        dropout: parse(&map, "dropout")?,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    let seed: u64 = parse(&map, "seed")?;
    let frozen: bool = parse(&map, "variational_frozen")?;

    let payload = &bytes[header_end..];
    let expected: usize = layout.iter().map(|(_, r, c)| r * c).sum();
    if payload.len() != 8 * expected {
        return Err(bad(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            8 * expected
        )));
    }
    let mut values: HashMap<String, Matrix<f64>> = HashMap::new();
    let mut offset = 0;
    for (name, rows, cols) in &layout {
        let data: Vec<f64> = payload[offset..offset + 8 * rows * cols]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * rows * cols;
        values.insert(name.clone(), Matrix::from_vec(*rows, *cols, data)?);
    }

    let prior_logits = values
        .remove("prior_logits")
        .ok_or_else(|| bad("missing tensor prior_logits"))?;
    let prior = DepthDistribution::from_logits(prior_logits.into_vec()).map_err(|e| bad(e.to_string()))?;
    let mut model = DunModel::with_prior(config, seed, prior).map_err(|e| bad(e.to_string()))?;
    let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix<f64>> {
        let m = values.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if m.shape() != shape {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", m.shape())));
        }
        Ok(m)
    };
    for block in &mut model.blocks {
        block.weight.value = take(&block.weight.name, block.weight.value.shape())?;
        block.bias.value = take(&block.bias.name, block.bias.value.shape())?;
        let prefix = block.weight.name.trim_end_matches(".weight").to_string();
        if let Some(bn) = &mut block.norm {
            bn.scale.value = take(&bn.scale.name, bn.scale.value.shape())?;
            bn.shift.value = take(&bn.shift.name, bn.shift.value.shape())?;
            let w = bn.running_mean.len();
            bn.running_mean = take(&format!("{prefix}.running_mean"), (1, w))?.into_vec();
            bn.running_var = take(&format!("{prefix}.running_var"), (1, w))?.into_vec();
        }
    }
    let shape = model.variational.value.shape();
    model.variational.value = take("depth_logits", shape)?;
    model.variational.frozen = frozen;
    if let Some(p) = &mut model.noise_log_std {
        p.value = take("noise_log_std", (1, 1))?;
    }
    if let Some(extra) = values.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    DepthDistribution::from_logits(model.variational.value.as_slice().to_vec())
        .map_err(|e| bad(format!("depth logits: {e}")))?;
    Ok(model)
}

pub fn save_model(model: &DunModel<f64>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DunModel<f64>> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Writes `member_<i>.ckpt` files plus `manifest.txt` into `dir`.
pub fn save_ensemble(ens: &EnsembleModel<f64>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let seeds: Vec<String> = ens.seeds.iter().map(u64::to_string).collect();
    let manifest = format!(
        "kind={}\nmembers={}\nseeds={}\n",
        ens.kind.as_str(),
        ens.len(),
        seeds.join(",")
    );
    for (i, m) in ens.members.iter().enumerate() {
        save_model(m, &dir.join(format!("member_{i}.ckpt")))?;
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<EnsembleModel<f64>> {
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| bad(format!("{}: {e}", dir.join("manifest.txt").display())))?;
    let map: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let kind_name: String = parse(&map, "kind")?;
    let kind = EnsembleKind::parse(&kind_name).ok_or_else(|| bad(format!("unknown ensemble kind `{kind_name}`")))?;
    let members: usize = parse(&map, "members")?;
    let seeds = map
        .get("seeds")
        .ok_or_else(|| bad("manifest is missing `seeds`"))?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| bad(format!("bad seed `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.len() != members {
        return Err(bad(format!("manifest lists {} seeds for {members} members", seeds.len())));
    }
    let members = (0..members)
        .map(|i| load_model(&dir.join(format!("member_{i}.ckpt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel { kind, members, seeds })
}
