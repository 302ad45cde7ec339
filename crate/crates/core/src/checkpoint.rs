//! Versioned binary checkpoints of a [`TrainState`].
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `CFCK` |
//! | 4 | format version (u32) |
//! | 8 | header length `h` (u64) |
//! | h | UTF-8 TOML header: configs, step counters, tensor shapes |
//! | 4 | tensor count (u32) |
//! | ... | per tensor: name length (u16), name, value count (u64), f64 values |
//! | 4 | CRC-32 of everything above (u32) |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, BevVolume};
use crate::encoding::HashGrid;
use crate::error::{Error, Result};
use crate::fields::{Field, FieldConfig, FieldKind, KeyframeCodes, SceneFrame};
use crate::losses::LossComponents;
use crate::mlp::{Activation, Mlp};
use crate::scene::Aabb;
use crate::train::{Adam, MetricRow, Model, Phase, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    field: FieldConfig,
    bev: BevConfig,
    bounds: Aabb,
    background: [f64; 3],
    timestamps: Vec<i64>,
    frame: SceneFrame,
    static_sizes: Vec<usize>,
    dynamic_sizes: Vec<usize>,
    activation: Activation,
    dir_frequencies: usize,
    feature_dim: usize,
    static_step: u64,
    dynamic_step: u64,
    static_adam_step: u64,
    dynamic_adam_step: u64,
    history_len: usize,
}

const HISTORY_COLUMNS: usize = 9;

fn history_to_values(rows: &[MetricRow]) -> Vec<f64> {
    let mut v = Vec::with_capacity(rows.len() * HISTORY_COLUMNS);
    for r in rows {
        let c = &r.components;
        v.extend([
            match r.phase {
                Phase::Static => 0.0,
                Phase::Dynamic => 1.0,
            },
            r.step as f64,
            r.lr,
            c.static_rgb,
            c.dynamic_rgb,
            c.optical,
            c.cycle,
            c.smooth,
            r.total,
        ]);
    }
    v
}

fn history_from_values(v: &[f64]) -> Vec<MetricRow> {
    v.chunks_exact(HISTORY_COLUMNS)
        .map(|r| MetricRow {
            phase: if r[0] == 0.0 { Phase::Static } else { Phase::Dynamic },
            step: r[1] as u64,
            lr: r[2],
            components: LossComponents {
                static_rgb: r[3],
                dynamic_rgb: r[4],
                optical: r[5],
                cycle: r[6],
                smooth: r[7],
            },
            total: r[8],
        })
        .collect()
}

fn tensors(state: &TrainState) -> Vec<(String, Vec<f64>)> {
    let m = &state.model;
    let mut out: Vec<(String, Vec<f64>)> = vec![
        ("static.grid".into(), m.static_field.grid.params.clone()),
        ("static.net".into(), m.static_field.net.params.clone()),
        ("dynamic.grid".into(), m.dynamic_field.grid.params.clone()),
        ("dynamic.net".into(), m.dynamic_field.net.params.clone()),
        (
            "dynamic.codes".into(),
            m.dynamic_field.codes.as_ref().map(|c| c.values.clone()).unwrap_or_default(),
        ),
    ];
    for (opt, name) in [(&state.static_opt, "static"), (&state.dynamic_opt, "dynamic")] {
        for (i, (mm, vv)) in opt.m.iter().zip(&opt.v).enumerate() {
            out.push((format!("adam.{name}.m{i}"), mm.clone()));
            out.push((format!("adam.{name}.v{i}"), vv.clone()));
        }
    }
    out.push(("bev.static".into(), m.static_volume.data.clone()));
    for v in &m.volumes {
        out.push((format!("bev.t{}", v.t.expect("per-timestamp volume")), v.data.clone()));
    }
    out.push(("history".into(), history_to_values(&state.history)));
    out
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let m = &state.model;
    let header = Header {
        train: state.config.clone(),
        field: m.field_config.clone(),
        bev: m.bev_config.clone(),
        bounds: m.bounds,
        background: m.background,
        timestamps: m.timestamps.clone(),
        frame: m.static_field.frame,
        static_sizes: m.static_field.net.sizes().to_vec(),
        dynamic_sizes: m.dynamic_field.net.sizes().to_vec(),
        activation: m.static_field.net.hidden(),
        dir_frequencies: m.static_field.dir_frequencies,
        feature_dim: m.static_field.feature_dim,
        static_step: state.static_step,
        dynamic_step: state.dynamic_step,
        static_adam_step: state.static_opt.step,
        dynamic_adam_step: state.dynamic_opt.step,
        history_len: state.history.len(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let tensors = tensors(state);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::corrupt(path, reason),
        other => other,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: "<memory>".into(),
        reason: reason.into(),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 20 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hlen = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| corrupt("header is not UTF-8"))?;
    let h: Header = toml::from_str(text).map_err(|e| corrupt(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let len = r.u64()? as usize;
        if len > (body.len() - r.pos) / 8 {
            return Err(corrupt(format!("tensor {name} runs past the end of the file")));
        }
        let values: Vec<f64> = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, values);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if v.len() != len {
            return Err(corrupt(format!("tensor {name} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    };

    let build = |kind: FieldKind, sizes: &[usize], codes: Option<KeyframeCodes>| -> Result<Field> {
        Ok(Field {
            kind,
            grid: HashGrid::zeros(h.field.grid.clone())?,
            net: Mlp::zeros(sizes, h.activation)?,
            codes,
            frame: h.frame,
            dir_frequencies: h.dir_frequencies,
            feature_dim: h.feature_dim,
        })
    };
    let mut static_field = build(FieldKind::Static, &h.static_sizes, None)?;
    let codes = KeyframeCodes::zeros(&h.timestamps, h.field.code_dim)?;
    let mut dynamic_field = build(FieldKind::Dynamic, &h.dynamic_sizes, Some(codes))?;
    static_field.grid.params = take("static.grid", static_field.grid.params.len())?;
    static_field.net.params = take("static.net", static_field.net.params.len())?;
    dynamic_field.grid.params = take("dynamic.grid", dynamic_field.grid.params.len())?;
    dynamic_field.net.params = take("dynamic.net", dynamic_field.net.params.len())?;
    let code_len = dynamic_field.codes.as_ref().map_or(0, |c| c.values.len());
    let code_values = take("dynamic.codes", code_len)?;
    if let Some(c) = dynamic_field.codes.as_mut() {
        c.values = code_values;
    }

    let mut adam = |name: &str, field: &Field, step: u64| -> Result<Adam> {
        let mut sizes = vec![field.grid.params.len(), field.net.params.len()];
        if let Some(c) = &field.codes {
            sizes.push(c.values.len());
        }
        let mut opt = Adam::new(&sizes);
        opt.step = step;
        for (i, &n) in sizes.iter().enumerate() {
            opt.m[i] = take(&format!("adam.{name}.m{i}"), n)?;
            opt.v[i] = take(&format!("adam.{name}.v{i}"), n)?;
        }
        Ok(opt)
    };
    let static_opt = adam("static", &static_field, h.static_adam_step)?;
    let dynamic_opt = adam("dynamic", &dynamic_field, h.dynamic_adam_step)?;

    let [nx, ny, nz] = h.bev.dims;
    let mut volume = |t: Option<i64>| -> Result<BevVolume> {
        let name = t.map_or("bev.static".to_string(), |t| format!("bev.t{t}"));
        Ok(BevVolume {
            channels: h.bev.channels,
            dims: h.bev.dims,
            extent: h.bounds,
            t,
            data: take(&name, nx * ny * nz * h.bev.channels)?,
        })
    };
    let static_volume = volume(None)?;
    let volumes = h.timestamps.iter().map(|&t| volume(Some(t))).collect::<Result<Vec<_>>>()?;
    let history = history_from_values(&take("history", h.history_len * HISTORY_COLUMNS)?);
    if !tensors.is_empty() {
        let mut extra: Vec<_> = tensors.keys().cloned().collect();
        extra.sort();
        return Err(corrupt(format!("unexpected tensors {extra:?}")));
    }
    h.train.validate()?;
    Ok(TrainState {
        config: h.train,
        model: Model {
            field_config: h.field,
            bev_config: h.bev,
            bounds: h.bounds,
            background: h.background,
            timestamps: h.timestamps,
            static_field,
            dynamic_field,
            static_volume,
            volumes,
        },
        static_opt,
        dynamic_opt,
        static_step: h.static_step,
        dynamic_step: h.dynamic_step,
        history,
    })
}
