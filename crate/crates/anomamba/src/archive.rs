//! Named-tensor archive and checkpoints.
//!
//! Layout, so external converters can produce it:
//!
//! ```text
//! anomamba-tensors v1\n
//! tensors <count>\n
//! <name> f32 <d0,d1,...> <byte-offset>\n   (one line per tensor)
//! data\n
//! <tightly packed little-endian f32 blobs in manifest order>
//! ```
//!
//! Offsets are relative to the byte after `data\n` and must equal the
//! running size, which doubles as a corruption check. Names must be free
//! of whitespace. A checkpoint is the same archive with `param.`,
//! `adam.m.`, `adam.v.` and `meta.` entries.

use std::fs;
use std::path::Path;

use anomamba_core::optim::{AdamConfig, AdamState};
use anomamba_core::{ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

const MAGIC: &str = "anomamba-tensors v1";

fn corrupt(m: impl Into<String>) -> Error {
    Error::Archive(m.into())
}

pub fn write_tensors(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut manifest = format!("{MAGIC}\ntensors {}\n", entries.len());
    let mut offset = 0usize;
    for (name, t) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(corrupt(format!("tensor name '{name}' must be non-empty, no whitespace")));
        }
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        };
        manifest.push_str(&format!("{name} f32 {dims} {offset}\n"));
        offset += t.numel() * 4;
    }
    manifest.push_str("data\n");
    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset);
    for (_, t) in entries {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_archive(&bytes).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

fn parse_archive(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0usize;
    let mut line = || -> std::result::Result<&str, String> {
        let rest = bytes.get(pos..).ok_or("truncated header")?;
        let end = rest.iter().position(|&b| b == b'\n').ok_or("unterminated header line")?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| "non-utf8 header".to_string())?;
        pos += end + 1;
        Ok(s)
    };
    if line()? != MAGIC {
        return Err("bad magic".into());
    }
    let count: usize = line()?
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or("bad tensor count line")?;
    let mut meta = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for _ in 0..count {
        let entry = line()?.to_string();
        let mut fields = entry.split_ascii_whitespace();
        let name = fields.next().ok_or("missing name")?.to_string();
        match fields.next() {
            Some("f32") => {}
            other => return Err(format!("{name}: unsupported dtype {other:?}")),
        }
        let dims_field = fields.next().ok_or_else(|| format!("{name}: missing dims"))?;
        let shape: Vec<usize> = if dims_field == "-" {
            Vec::new()
        } else {
            dims_field
                .split(',')
                .map(|d| d.parse().map_err(|_| format!("{name}: bad dim '{d}'")))
                .collect::<std::result::Result<_, _>>()?
        };
        let offset: usize = fields
            .next()
            .and_then(|o| o.parse().ok())
            .ok_or_else(|| format!("{name}: bad offset"))?;
        if fields.next().is_some() {
            return Err(format!("{name}: trailing manifest fields"));
        }
        if offset != expected_offset {
            return Err(format!(
                "{name}: offset {offset} does not match running size {expected_offset}"
            ));
        }
        expected_offset += shape.iter().product::<usize>() * 4;
        meta.push((name, shape));
    }
    if line()? != "data" {
        return Err("missing data marker".into());
    }
    let blob = &bytes[pos..];
    if blob.len() != expected_offset {
        return Err(format!("blob is {} bytes, manifest expects {expected_offset}", blob.len()));
    }
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for (name, shape) in meta {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = blob[cursor..cursor + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += n * 4;
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

// ------------------------------------------------------------ checkpoints

pub fn save_checkpoint(path: &Path, store: &ParamStore, opt: &AdamState) -> Result<()> {
    let mut names: Vec<(String, &Tensor)> = Vec::new();
    for (name, value, _) in store.iter() {
        names.push((format!("param.{name}"), value));
    }
    let moments: Vec<(String, &Tensor, &Tensor)> = opt
        .moments()
        .map(|(id, m, v)| (store.name(id).to_string(), m, v))
        .collect();
    for (name, m, _) in &moments {
        names.push((format!("adam.m.{name}"), m));
    }
    for (name, _, v) in &moments {
        names.push((format!("adam.v.{name}"), v));
    }
    let step = Tensor::scalar(opt.step_count() as f32);
    names.push(("meta.adam_step".to_string(), &step));
    write_tensors(path, &names)
}

/// Restores parameter values into a store built with the same
/// architecture. Entries beyond the parameters are ignored here.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<()> {
    let entries = read_tensors(path)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = entries
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix("param.").map(|n| (n.to_string(), t)))
        .collect();
    for id in store.ids() {
        let name = store.name(id).to_string();
        let t = by_name
            .remove(&name)
            .ok_or_else(|| corrupt(format!("checkpoint is missing parameter '{name}'")))?;
        if t.shape() != store.value(id).shape() {
            return Err(corrupt(format!(
                "parameter '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(corrupt(format!("checkpoint has unknown parameter '{extra}'")));
    }
    Ok(())
}

/// Restores parameters and optimizer state for resumed training.
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore,
    cfg: AdamConfig,
) -> Result<AdamState> {
    load_params(path, store)?;
    let entries = read_tensors(path)?;
    let mut m_by: std::collections::HashMap<String, Tensor> = Default::default();
    let mut v_by: std::collections::HashMap<String, Tensor> = Default::default();
    let mut step = None;
    for (name, t) in entries {
        if let Some(n) = name.strip_prefix("adam.m.") {
            m_by.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam.v.") {
            v_by.insert(n.to_string(), t);
        } else if name == "meta.adam_step" {
            step = t.as_scalar();
        }
    }
    let step = step.ok_or_else(|| corrupt("checkpoint has no meta.adam_step"))? as u64;
    let state = AdamState::restore(store, cfg, step, |id| {
        let name = store.name(id);
        match (m_by.get(name), v_by.get(name)) {
            (Some(m), Some(v)) => Some((m.clone(), v.clone())),
            _ => None,
        }
    })?;
    Ok(state)
}
