//! Versioned checkpoint container.
//!
//! Layout: the magic line, the manifest length in bytes on its own line, the
//! text manifest, then every tensor as little-endian `f32` in manifest order.

use std::fmt::Write as _;
use std::path::Path;

use super::params::{ModelConfig, ParamStore, Params};
use super::standardize::Standardizer;
use crate::error::{Error, Result};

pub const MAGIC: &str = "LAGAT-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub phase: String,
    /// 1-based epoch the weights come from; 0 when untrained.
    pub best_epoch: usize,
    pub rmax: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub stats: Standardizer,
    pub meta: CheckpointMeta,
}

fn config_line(c: &ModelConfig) -> String {
    format!(
        "config input_dim={} lstm_hidden={} heads={} head_dim={} gat_layers={} edge_dim={} decoder_hidden={}",
        c.input_dim, c.lstm_hidden, c.heads, c.head_dim, c.gat_layers, c.edge_dim, c.decoder_hidden
    )
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.store.params;
        let mut manifest = String::new();
        writeln!(manifest, "{}", config_line(&self.store.config)).unwrap();
        writeln!(manifest, "stats {}", join(self.stats.to_values())).unwrap();
        writeln!(
            manifest,
            "lambda {}",
            join(params.lane_bias.data.iter().map(|v| *v as f32 as f64))
        )
        .unwrap();
        writeln!(
            manifest,
            "meta best_epoch={} phase={} rmax={}",
            self.meta.best_epoch, self.meta.phase, self.meta.rmax
        )
        .unwrap();
        for (name, t) in params.tensors() {
            let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(
                manifest,
                "tensor {name} {shape} frozen={}",
                u8::from(self.store.is_frozen(&name))
            )
            .unwrap();
        }
        let mut out = format!("{MAGIC}\n{}\n{manifest}", manifest.len()).into_bytes();
        for (_, t) in params.tensors() {
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let header_end = MAGIC.len() + 1;
        if bytes.len() < header_end || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
            return Err("not a checkpoint (bad magic line)".into());
        }
        let rest = &bytes[header_end..];
        let nl = rest.iter().position(|b| *b == b'\n').ok_or("missing manifest length")?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad manifest length")?;
        let body = &rest[nl + 1..];
        if body.len() < len {
            return Err("truncated manifest".into());
        }
        let manifest = std::str::from_utf8(&body[..len]).map_err(|_| "manifest is not UTF-8")?;
        let mut data = &body[len..];

        let mut config = None;
        let mut stats = None;
        let mut meta = None;
        let mut tensors: Vec<(String, Vec<usize>, bool)> = Vec::new();
        for line in manifest.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("config") => config = Some(parse_config(parts)?),
                Some("stats") => {
                    let values = parts
                        .map(|p| p.parse::<f64>().map_err(|_| format!("bad stats value `{p}`")))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    stats = Some(Standardizer::from_values(&values).ok_or("stats need 16 values")?);
                }
                Some("lambda") => {}
                Some("meta") => meta = Some(parse_meta(parts)?),
                Some("tensor") => {
                    let name = parts.next().ok_or("tensor line without name")?.to_string();
                    let shape = parts
                        .next()
                        .ok_or("tensor line without shape")?
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| format!("bad shape for {name}")))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let frozen = match parts.next() {
                        Some("frozen=1") => true,
                        Some("frozen=0") => false,
                        _ => return Err(format!("bad frozen flag for {name}")),
                    };
                    tensors.push((name, shape, frozen));
                }
                _ => return Err(format!("unrecognised manifest line `{line}`")),
            }
        }
        let config = config.ok_or("manifest lacks config")?;
        config.validate().map_err(|e| e.to_string())?;
        let mut params = Params::zeros(&config);
        let mut frozen_names = Vec::new();
        {
            let slots = params.tensors_mut();
            if slots.len() != tensors.len() {
                return Err(format!("expected {} tensors, manifest lists {}", slots.len(), tensors.len()));
            }
            for ((name, t), (m_name, m_shape, frozen)) in slots.into_iter().zip(&tensors) {
                if &name != m_name || &t.shape != m_shape {
                    return Err(format!("tensor {m_name} {m_shape:?} does not match model tensor {name} {:?}", t.shape));
                }
                let need = t.len() * 4;
                if data.len() < need {
                    return Err(format!("truncated data for tensor {name}"));
                }
                for (v, chunk) in t.data.iter_mut().zip(data[..need].chunks_exact(4)) {
                    *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                }
                data = &data[need..];
                if *frozen {
                    frozen_names.push(name);
                }
            }
        }
        if !data.is_empty() {
            return Err(format!("{} trailing bytes after tensor data", data.len()));
        }
        let mut store = ParamStore::new(config, params);
        for n in frozen_names {
            store.set_frozen(&n, true);
        }
        Ok(Self {
            store,
            stats: stats.ok_or("manifest lacks stats")?,
            meta: meta.ok_or("manifest lacks meta")?,
        })
    }
}

fn parse_config<'a>(parts: impl Iterator<Item = &'a str>) -> std::result::Result<ModelConfig, String> {
    let mut c = ModelConfig::default();
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad config entry `{kv}`"))?;
        let v: usize = v.parse().map_err(|_| format!("bad config value `{kv}`"))?;
        match k {
            "input_dim" => c.input_dim = v,
            "lstm_hidden" => c.lstm_hidden = v,
            "heads" => c.heads = v,
            "head_dim" => c.head_dim = v,
            "gat_layers" => c.gat_layers = v,
            "edge_dim" => c.edge_dim = v,
            "decoder_hidden" => c.decoder_hidden = v,
            _ => return Err(format!("unknown config key `{k}`")),
        }
    }
    Ok(c)
}

fn parse_meta<'a>(parts: impl Iterator<Item = &'a str>) -> std::result::Result<CheckpointMeta, String> {
    let mut meta = CheckpointMeta {
        phase: String::new(),
        best_epoch: 0,
        rmax: 0.0,
    };
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad meta entry `{kv}`"))?;
        match k {
            "best_epoch" => meta.best_epoch = v.parse().map_err(|_| format!("bad best_epoch `{v}`"))?,
            "phase" => meta.phase = v.to_string(),
            "rmax" => meta.rmax = v.parse().map_err(|_| format!("bad rmax `{v}`"))?,
            _ => return Err(format!("unknown meta key `{k}`")),
        }
    }
    Ok(meta)
}
