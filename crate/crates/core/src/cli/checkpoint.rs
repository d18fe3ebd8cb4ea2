//! Binary checkpoints: `FANCKPT1`, a little-endian `u64` manifest length,
//! the UTF-8 manifest, then every tensor listed in it as little-endian
//! `f64` values in manifest order.
//!
//! Manifest lines:
//!
//! ```text
//! version=1
//! step=<updates applied>
//! optimizer=adadelta <rho> <eps> <lr>      (or optimizer=none)
//! config=<one config line>                 (repeated)
//! tensor=<name> <d0>x<d1>x...              (repeated)
//! ```

use std::fs;
use std::path::Path;

use crate::adcore::{AdadeltaState, Tensor};
use crate::error::{FanError, Result};
use crate::model::FanModel;

use super::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"FANCKPT1";

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: FanModel,
    pub opt: Option<AdadeltaState>,
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> FanError {
    FanError::Checkpoint(msg.into())
}

pub fn encode(config: &RunConfig, model: &FanModel, opt: Option<&AdadeltaState>, step: u64) -> Vec<u8> {
    let mut config = config.clone();
    config.model = model.config.clone();
    let mut manifest = format!("version=1\nstep={step}\n");
    match opt {
        Some(o) => manifest.push_str(&format!("optimizer=adadelta {} {} {}\n", o.rho, o.eps, o.lr)),
        None => manifest.push_str("optimizer=none\n"),
    }
    for line in config.to_text().lines() {
        manifest.push_str(&format!("config={line}\n"));
    }
    let mut tensors: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect();
    if let Some(o) = opt {
        tensors.extend(o.export(&model.store));
    }
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("tensor={name} {}\n", dims.join("x")));
    }
    let mut out = MAGIC.to_vec();
    out.extend((manifest.len() as u64).to_le_bytes());
    out.extend(manifest.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing FANCKPT1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
    let mut payload = &bytes[16 + len..];

    let mut step = None;
    let mut optimizer = None;
    let mut config_text = String::new();
    let mut tensors = Vec::new();
    for line in manifest.lines() {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("bad manifest line {line:?}")))?;
        match key {
            "version" if value == "1" => {}
            "version" => return Err(bad(format!("unsupported version {value}"))),
            "step" => step = Some(value.parse::<u64>().map_err(|_| bad("bad step"))?),
            "optimizer" => optimizer = Some(value.to_string()),
            "config" => {
                config_text.push_str(value);
                config_text.push('\n');
            }
            "tensor" => {
                let (name, dims) = value.rsplit_once(' ').ok_or_else(|| bad(format!("bad tensor line {value:?}")))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape {dims:?}"))))
                    .collect::<Result<_>>()?;
                let n: usize = shape.iter().product();
                if payload.len() < 8 * n {
                    return Err(bad(format!("payload truncated at {name}")));
                }
                let data = payload[..8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                payload = &payload[8 * n..];
                tensors.push((name.to_string(), Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?));
            }
            _ => return Err(bad(format!("unknown manifest key {key:?}"))),
        }
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing payload bytes", payload.len())));
    }
    let step = step.ok_or_else(|| bad("missing step"))?;
    let config = RunConfig::parse(&config_text).map_err(|e| bad(format!("config echo: {e}")))?;
    let mut model = FanModel::new(config.model.clone(), 0).map_err(|e| bad(format!("rebuilding model: {e}")))?;

    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = by_name.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        model.store.set(id, t).map_err(|e| bad(format!("{name}: {e}")))?;
    }
    let opt = match optimizer.as_deref() {
        None | Some("none") => None,
        Some(spec) => {
            let parts: Vec<&str> = spec.split(' ').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad optimizer line {spec:?}")));
            let [kind, rho, eps, lr] = parts[..] else {
                return Err(bad(format!("bad optimizer line {spec:?}")));
            };
            if kind != "adadelta" {
                return Err(bad(format!("unknown optimizer {kind}")));
            }
            let mut o = AdadeltaState::new(&model.store, num(rho)?, num(eps)?)?;
            o.lr = num(lr)?;
            for (id, name, t) in model.store.iter() {
                for (which, slot) in [("sq_grad", &mut o.sq_grad[id.0]), ("sq_delta", &mut o.sq_delta[id.0])] {
                    let key = format!("adadelta.{which}.{name}");
                    let acc = by_name.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                    if acc.shape() != t.shape() {
                        return Err(bad(format!("{key} has shape {:?}", acc.shape())));
                    }
                    *slot = acc.into_vec();
                }
            }
            Some(o)
        }
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config,
        model,
        opt,
        step,
    })
}

pub fn save(path: &Path, config: &RunConfig, model: &FanModel, opt: Option<&AdadeltaState>, step: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(config, model, opt, step)).map_err(|e| FanError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FanError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| FanError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Size2;

    #[test]
    fn round_trip_restores_parameters_and_optimizer() {
        let mut model = FanModel::new(crate::model::FanConfig::toy(), 5).unwrap();
        model.set_crop(Size2::new(10, 7));
        let mut opt = AdadeltaState::with_defaults(&model.store);
        opt.sq_grad[0][0] = 0.125;
        let cfg = RunConfig::default();
        let back = decode(&encode(&cfg, &model, Some(&opt), 17)).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.opt.as_ref(), Some(&opt));
        assert_eq!(back.model.config, model.config);
        for ((_, a, ta), (_, b, tb)) in model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a, b);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = FanModel::new(crate::model::FanConfig::toy(), 5).unwrap();
        let bytes = encode(&RunConfig::default(), &model, None, 0);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
