//! On-disk form of a [`TrainedModel`].
//!
//! A checkpoint is a short text header, one `key value` pair per line and
//! terminated by `end`, followed by raw little-endian `f64` data:
//! full-protocol angles, learned angles (both as `theta, phi` pairs) and the
//! flat reconstructor parameters. Floats in the header use Rust's shortest
//! round-trip formatting, so a load reproduces the saved model bit for bit.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::recon::MlpParams;
use crate::sphere::{Direction, Protocol};
use crate::train::{EpochRecord, TrainConfig, TrainedModel};

pub const MAGIC: &str = "qsamp-checkpoint 1";

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

pub fn encode(model: &TrainedModel) -> Vec<u8> {
    let c = &model.config;
    let dims: Vec<String> = model.mlp.dims().iter().map(|d| d.to_string()).collect();
    let mut h = format!("{MAGIC}\n");
    let mut kv = |k: &str, v: String| h.push_str(&format!("{k} {v}\n"));
    kv("dims", dims.join(","));
    kv("n", model.protocol.len().to_string());
    kv("full", model.full_protocol.len().to_string());
    kv("protocol_label", model.protocol.label().to_string());
    kv("full_label", model.full_protocol.label().to_string());
    kv("mode", c.mode.to_string());
    kv("schedule", c.schedule.to_string());
    kv("order", c.order.to_string());
    kv("epochs", c.epochs.to_string());
    kv("lr_sampling", format!("{:?}", c.lr_sampling));
    kv("lr_recon", format!("{:?}", c.lr_recon));
    kv("lambda_tv", format!("{:?}", c.lambda_tv));
    kv("batch_size", c.batch_size.to_string());
    kv("seed", c.seed.to_string());
    kv("hidden", c.hidden.to_string());
    kv("hidden_layers", c.hidden_layers.to_string());
    kv("electrostatic_iterations", c.electrostatic_iterations.to_string());
    for r in &model.curve {
        kv(
            "curve",
            format!(
                "{} {:?} {:?} {:?} {:?}",
                r.epoch, r.train_loss, r.val_loss, r.lr_sampling, r.lr_recon
            ),
        );
    }
    h.push_str("end\n");

    let mut out = h.into_bytes();
    let angles = model
        .full_protocol
        .directions()
        .iter()
        .chain(model.protocol.directions())
        .flat_map(|d| [d.theta, d.phi]);
    for v in angles.chain(model.mlp.as_slice().iter().copied()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    const END: &[u8] = b"\nend\n";
    let pos = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..pos + 1]).map_err(|_| bad("header is not UTF-8"))?;
    Ok((header, &bytes[pos + END.len()..]))
}

fn parse<T: std::str::FromStr>(fields: &HashMap<&str, &str>, key: &str) -> Result<T> {
    let raw = fields.get(key).ok_or_else(|| bad(format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| bad(format!("bad value for {key}: {raw:?}")))
}

fn directions(values: &[f64]) -> Vec<Direction> {
    values.chunks_exact(2).map(|p| Direction::new(p[0], p[1])).collect()
}

pub fn decode(bytes: &[u8]) -> Result<TrainedModel> {
    let (header, blob) = split_header(bytes)?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut fields = HashMap::new();
    let mut curve = Vec::new();
    for line in lines {
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        if k == "curve" {
            let parts: Vec<&str> = v.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                parts
                    .get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("bad curve row {v:?}")))
            };
            if parts.len() != 5 {
                return Err(bad(format!("bad curve row {v:?}")));
            }
            curve.push(EpochRecord {
                epoch: parts[0].parse().map_err(|_| bad(format!("bad curve row {v:?}")))?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                lr_sampling: num(3)?,
                lr_recon: num(4)?,
            });
        } else {
            fields.insert(k, v);
        }
    }

    let dims: Vec<usize> = parse::<String>(&fields, "dims")?
        .split(',')
        .map(|d| d.parse().map_err(|_| bad(format!("bad dims entry {d:?}"))))
        .collect::<Result<_>>()?;
    let n: usize = parse(&fields, "n")?;
    let full: usize = parse(&fields, "full")?;
    let config = TrainConfig {
        n,
        epochs: parse(&fields, "epochs")?,
        lr_sampling: parse(&fields, "lr_sampling")?,
        lr_recon: parse(&fields, "lr_recon")?,
        lambda_tv: parse(&fields, "lambda_tv")?,
        batch_size: parse(&fields, "batch_size")?,
        seed: parse(&fields, "seed")?,
        mode: parse::<String>(&fields, "mode")?.parse()?,
        hidden: parse(&fields, "hidden")?,
        hidden_layers: parse(&fields, "hidden_layers")?,
        order: parse(&fields, "order")?,
        electrostatic_iterations: parse(&fields, "electrostatic_iterations")?,
        schedule: parse::<String>(&fields, "schedule")?.parse()?,
    };
    if dims.first() != Some(&n) || dims.last() != Some(&full) {
        return Err(bad(format!("layer widths {dims:?} do not match n={n}, full={full}")));
    }

    if blob.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = MlpParams::zeros(&dims)?.len();
    let expected = 2 * full + 2 * n + params;
    if values.len() != expected {
        return Err(bad(format!(
            "expected {expected} values in data section, found {}",
            values.len()
        )));
    }
    let full_protocol = Protocol::new(
        directions(&values[..2 * full]),
        parse::<String>(&fields, "full_label")?,
    )?;
    let protocol = Protocol::new(
        directions(&values[2 * full..2 * full + 2 * n]),
        parse::<String>(&fields, "protocol_label")?,
    )?;
    let mlp = MlpParams::from_flat(&dims, values[2 * full + 2 * n..].to_vec())?;
    Ok(TrainedModel {
        protocol,
        full_protocol: Arc::new(full_protocol),
        mlp,
        config,
        curve,
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    crate::atomic_write(path.as_ref(), &encode(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
