//! Binary model files.
//!
//! Layout (little-endian): magic `QFLW`, `u32` version, `u64` length plus the
//! experiment config as JSON, `u32` entry count, then per entry a `u16` name
//! length, the UTF-8 name, a `u8` rank, `u64` dims and the `f64` values.
//! Entries prefixed `model.` hold the live model and `polyak.` the averaged
//! one; each covers parameters, spectral states and actnorm init flags.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::builders::build_chain;
use crate::experiments::config::ExperimentConfig;
use crate::experiments::write_atomic;
use crate::flows::chain::{FlowChain, FlowStep};
use crate::numerics::rng::RngState;

pub const MAGIC: &[u8; 4] = b"QFLW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SavedModel {
    pub config: ExperimentConfig,
    pub model: FlowChain,
    pub polyak: FlowChain,
}

fn chain_entries(prefix: &str, chain: &FlowChain) -> Vec<Entry> {
    let mut out = Vec::new();
    chain.visit_params(&mut |name, dims, values| {
        out.push(Entry { name: format!("{prefix}.{name}"), dims: dims.to_vec(), values: values.to_vec() });
    });
    chain.visit_spectral(&mut |name, st| {
        let base = format!("{prefix}.{name}.spectral");
        out.push(Entry { name: format!("{base}.u"), dims: vec![st.u.len()], values: st.u.clone() });
        out.push(Entry { name: format!("{base}.v"), dims: vec![st.v.len()], values: st.v.clone() });
        out.push(Entry {
            name: format!("{base}.state"),
            dims: vec![2],
            values: vec![st.sigma_estimate, st.noise_scale],
        });
    });
    for (i, step) in chain.steps.iter().enumerate() {
        if let FlowStep::ActNorm(a) = step {
            out.push(Entry {
                name: format!("{prefix}.steps.{i}.actnorm.initialized"),
                dims: vec![1],
                values: vec![if a.initialized { 1.0 } else { 0.0 }],
            });
        }
    }
    out
}

fn take<'a>(entries: &'a HashMap<String, Entry>, name: &str, dims: &[usize]) -> Result<&'a Entry> {
    let e = entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
    if e.dims != dims {
        return Err(Error::ParamShape { name: name.to_string(), expected: dims.to_vec(), found: e.dims.clone() });
    }
    Ok(e)
}

fn restore_chain(prefix: &str, chain: &mut FlowChain, entries: &HashMap<String, Entry>) -> Result<()> {
    let mut shapes = Vec::new();
    chain.visit_params(&mut |name, dims, _| shapes.push((name.to_string(), dims.to_vec())));
    let mut found = Vec::with_capacity(shapes.len());
    for (name, dims) in &shapes {
        found.push(take(entries, &format!("{prefix}.{name}"), dims)?.values.clone());
    }
    let mut it = found.into_iter();
    chain.visit_params_mut(&mut |_, dst| dst.copy_from_slice(&it.next().expect("one entry per param")));

    let mut states = Vec::new();
    chain.visit_spectral(&mut |name, st| states.push((name.to_string(), st.u.len(), st.v.len())));
    let mut restored = Vec::with_capacity(states.len());
    for (name, nu, nv) in &states {
        let base = format!("{prefix}.{name}.spectral");
        let u = take(entries, &format!("{base}.u"), &[*nu])?.values.clone();
        let v = take(entries, &format!("{base}.v"), &[*nv])?.values.clone();
        let s = &take(entries, &format!("{base}.state"), &[2])?.values;
        restored.push((u, v, s[0], s[1]));
    }
    let mut it = restored.into_iter();
    chain.visit_spectral_mut(&mut |_, st| {
        let (u, v, sigma, noise) = it.next().expect("one entry per state");
        st.u = u;
        st.v = v;
        st.sigma_estimate = sigma;
        st.noise_scale = noise;
    });

    for (i, step) in chain.steps.iter_mut().enumerate() {
        if let FlowStep::ActNorm(a) = step {
            a.initialized = take(entries, &format!("{prefix}.steps.{i}.actnorm.initialized"), &[1])?.values[0] != 0.0;
        }
    }
    Ok(())
}

pub fn encode(config: &ExperimentConfig, model: &FlowChain, polyak: &FlowChain) -> Vec<u8> {
    let json = config.to_json();
    let mut entries = chain_entries("model", model);
    entries.extend(chain_entries("polyak", polyak));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.dims.len() as u8);
        for d in &e.dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    fn u64_len(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?)).map_err(|_| Error::Truncated)
    }
}

/// The config and raw entries of an encoded model.
pub fn decode(buf: &[u8]) -> Result<(ExperimentConfig, Vec<Entry>)> {
    let mut c = Cursor { buf, pos: 0 };
    if buf.len() >= 4 && &buf[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    c.bytes(4)?;
    let found = u32::from_le_bytes(c.array()?);
    if found != FORMAT_VERSION {
        return Err(Error::Version { found, expected: FORMAT_VERSION });
    }
    let json_len = c.u64_len()?;
    let json = std::str::from_utf8(c.bytes(json_len)?)
        .map_err(|e| Error::Config(format!("embedded config is not UTF-8: {e}")))?;
    let config = ExperimentConfig::from_json(json)?;
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.array()?) as usize;
        let name = String::from_utf8(c.bytes(name_len)?.to_vec())
            .map_err(|e| Error::Config(format!("entry name is not UTF-8: {e}")))?;
        let rank = c.array::<1>()?[0] as usize;
        let dims = (0..rank).map(|_| c.u64_len()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated)?;
        let raw = c.bytes(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        entries.push(Entry { name, dims, values });
    }
    Ok((config, entries))
}

/// Rebuilds both chains from `config_override` (or the embedded config) and
/// fills them from the entries.
pub fn from_bytes(buf: &[u8], config_override: Option<&ExperimentConfig>) -> Result<SavedModel> {
    let (embedded, entries) = decode(buf)?;
    let config = config_override.cloned().unwrap_or(embedded);
    let map: HashMap<String, Entry> = entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut model = build_chain(&config.model, &mut RngState::new(config.seed))?;
    let mut polyak = model.clone();
    restore_chain("model", &mut model, &map)?;
    restore_chain("polyak", &mut polyak, &map)?;
    Ok(SavedModel { config, model, polyak })
}

pub fn save_model(path: &Path, config: &ExperimentConfig, model: &FlowChain, polyak: &FlowChain) -> Result<()> {
    let buf = encode(config, model, polyak);
    write_atomic(path, |f| f.write_all(&buf))
}

pub fn load_model(path: &Path, config_override: Option<&ExperimentConfig>) -> Result<SavedModel> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, config_override)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::ModelSpec;

    const TINY: &str = r#"{
        "seed": 3,
        "dataset": {"kind": {"type": "eight_gaussians", "radius": 2.0, "std": 0.5}, "train_size": 64, "heldout_size": 16, "seed": 3},
        "model": {"kind": "quar", "dim": 2, "flows": 2, "multipliers": [4], "sigma": 0.9, "theta": "learnable", "reverse": true},
        "train": {"updates": 5, "batch_size": 8, "learning_rate": 0.001, "optimizer": "adam", "polyak_decay": 0.99, "power_iters": 5, "power_tol": 0.0001},
        "eval": {"grid_bounds": [-4.0, 4.0, -4.0, 4.0], "grid_resolution": 16, "trace_points_per_mode": 2, "samples": 10, "bench_terms": 5, "bench_batch": 4}
    }"#;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(TINY).unwrap()
    }

    fn perturbed(cfg: &ExperimentConfig) -> FlowChain {
        let mut chain = build_chain(&cfg.model, &mut RngState::new(99)).unwrap();
        let mut rng = RngState::new(7);
        chain.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v += 0.1 * rng.normal()));
        chain
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = small_config();
        let model = perturbed(&cfg);
        let mut polyak = model.clone();
        polyak.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v *= 0.5));
        let loaded = from_bytes(&encode(&cfg, &model, &polyak), None).unwrap();
        assert_eq!(loaded.model.flat_params(), model.flat_params());
        assert_eq!(loaded.polyak.flat_params(), polyak.flat_params());
        let x = [0.3, -1.2];
        assert_eq!(loaded.model.log_prob(&x).unwrap().0.to_bits(), model.log_prob(&x).unwrap().0.to_bits());
    }

    #[test]
    fn corrupt_files() {
        let cfg = small_config();
        let model = perturbed(&cfg);
        let buf = encode(&cfg, &model, &model);
        assert!(matches!(from_bytes(&buf[..buf.len() - 3], None), Err(Error::Truncated)));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, None), Err(Error::BadMagic)));
        let mut old = buf.clone();
        old[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(from_bytes(&old, None), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn override_with_other_width_names_the_param() {
        let cfg = small_config();
        let model = perturbed(&cfg);
        let buf = encode(&cfg, &model, &model);
        let mut other = cfg.clone();
        if let ModelSpec::Quar { multipliers, .. } = &mut other.model {
            multipliers[0] = 5;
        }
        match from_bytes(&buf, Some(&other)) {
            Err(Error::ParamShape { name, .. }) => assert!(name.contains("layers.0.weight"), "{name}"),
            other => panic!("{other:?}"),
        }
        let mut more = cfg.clone();
        if let ModelSpec::Quar { flows, .. } = &mut more.model {
            *flows = 3;
        }
        assert!(matches!(from_bytes(&buf, Some(&more)), Err(Error::MissingParam(_))));
    }
}
