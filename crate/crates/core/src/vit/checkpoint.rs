//! `MDVT` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MDVT" | u16 version | u32 header_len | header JSON {config, meta}
//! per parameter array, in declaration order: u32 len | len x f32
//! u8 has_optimizer
//!   if 1: u64 step | moment arrays m then v, same framing as parameters
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_layout, ViTConfig, ViTParams};
use crate::error::{Error, Result};
use crate::formats::{put_json, write_bytes, ByteReader};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MDVT_MAGIC: &[u8; 4] = b"MDVT";
pub const MDVT_VERSION: u16 = 1;

/// Training progress stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Validation accuracy of these weights.
    pub val_acc: f64,
    /// Best validation accuracy seen so far in the run.
    pub best_val_acc: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ViTParams<f32>,
    pub meta: CheckpointMeta,
    /// Present in resumable checkpoints only.
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ViTConfig,
    meta: CheckpointMeta,
}

fn put_array(out: &mut Vec<u8>, data: &[f32]) -> Result<()> {
    let len = u32::try_from(data.len()).map_err(|_| Error::invalid("parameter array too large"))?;
    out.extend_from_slice(&len.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.config.validate()?;
    ck.params.check_shapes(&ck.config)?;
    let mut out = Vec::with_capacity(16 + 4 * ck.params.count());
    out.extend_from_slice(MDVT_MAGIC);
    out.extend_from_slice(&MDVT_VERSION.to_le_bytes());
    put_json(&mut out, &Header { config: ck.config.clone(), meta: ck.meta.clone() })?;
    for t in ck.params.arrays() {
        put_array(&mut out, t.data())?;
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(state) => {
            state.check_matches(&ck.params)?;
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for a in state.m.iter().chain(&state.v) {
                put_array(&mut out, a)?;
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Total scalars implied by `cfg`, or `None` on overflow.
fn checked_total(cfg: &ViTConfig) -> Option<usize> {
    let d = cfg.embed_dim;
    let m = cfg.mlp_dim;
    let seq = cfg.grid_rows().checked_mul(cfg.grid_cols())?.checked_add(1)?;
    let patch_dim = cfg.patch.checked_mul(cfg.patch)?.checked_mul(3)?;
    let embed = patch_dim.checked_add(seq)?.checked_add(2)?.checked_mul(d)?;
    let layer = d.checked_mul(d.checked_mul(4)?.checked_add(m.checked_mul(2)?)?.checked_add(9)?)?.checked_add(m)?;
    let head = d.checked_mul(cfg.n_classes.checked_add(2)?)?.checked_add(cfg.n_classes)?;
    embed.checked_add(layer.checked_mul(cfg.te_layers)?)?.checked_add(head)
}

fn read_arrays(r: &mut ByteReader<'_>, shapes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
    shapes
        .iter()
        .map(|shape| {
            let want: usize = shape.iter().product();
            let len = r.u32()? as usize;
            if len != want {
                return Err(Error::format(format!("checkpoint: array of {len} values where {want} expected")));
            }
            r.check_items(len, 4)?;
            (0..len).map(|_| r.f32()).collect()
        })
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::format("checkpoint: shorter than its checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let mut r = ByteReader::new(body, "checkpoint");
    r.magic(MDVT_MAGIC)?;
    r.version(MDVT_VERSION)?;
    if crc32fast::hash(body) != stored {
        return Err(Error::format("checkpoint: CRC32 mismatch"));
    }
    let header: Header = r.json()?;
    let cfg = header.config;
    cfg.validate().map_err(|e| Error::format(format!("checkpoint config: {e}")))?;

    // Size everything against the remaining bytes before building any
    // per-array structure, so a hostile header cannot force a big allocation.
    let arrays = cfg.te_layers.checked_mul(12).and_then(|n| n.checked_add(8));
    let fits = match (arrays, checked_total(&cfg)) {
        (Some(a), Some(t)) => a.checked_add(t).and_then(|n| n.checked_mul(4)).is_some_and(|b| b <= r.remaining()),
        _ => false,
    };
    if !fits {
        return Err(Error::format("checkpoint: config implies more data than the file holds"));
    }

    let layout = param_layout(&cfg);
    let shapes: Vec<Vec<usize>> = layout.iter().map(|(_, s)| s.clone()).collect();
    let tensors =
        read_arrays(&mut r, &shapes)?.into_iter().zip(&shapes).map(|(data, shape)| Tensor::new(shape.clone(), data)).collect::<Result<Vec<_>>>()?;
    let params = ViTParams::from_arrays(&cfg, tensors)?;

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = read_arrays(&mut r, &shapes)?;
            let v = read_arrays(&mut r, &shapes)?;
            Some(AdamState { step, m, v })
        }
        f => return Err(Error::format(format!("checkpoint: optimizer flag {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint { config: cfg, params, meta: header.meta, optimizer })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{count_params, init_params};

    fn tiny() -> ViTConfig {
        ViTConfig {
            patch: 4,
            embed_dim: 8,
            heads: 2,
            te_layers: 1,
            mlp_dim: 16,
            n_classes: 3,
            canvas_height: 8,
            canvas_width: 12,
            dropout_rate: 0.1,
            mask_padding: true,
        }
    }

    fn sample(with_optimizer: bool) -> Checkpoint {
        let cfg = tiny();
        let params = init_params::<f32>(&cfg, 3).unwrap();
        let optimizer = with_optimizer.then(|| {
            let mut s = AdamState::new(&params);
            s.step = 17;
            s.m[0][0] = 0.25;
            s.v[2][1] = 4.0;
            s
        });
        Checkpoint { config: cfg, params, meta: CheckpointMeta { epoch: 5, val_acc: 0.5, best_val_acc: 0.75, seed: 9 }, optimizer }
    }

    #[test]
    fn round_trips_with_and_without_optimizer() {
        for opt in [false, true] {
            let ck = sample(opt);
            let bytes = encode_checkpoint(&ck).unwrap();
            assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        }
    }

    #[test]
    fn body_size_follows_layout() {
        let ck = sample(false);
        let bytes = encode_checkpoint(&ck).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let arrays = ck.params.arrays().len();
        let expected = 4 + 2 + 4 + header_len + 4 * arrays + 4 * count_params(&ck.config) + 1 + 4;
        assert_eq!(bytes.len(), expected);
        assert_eq!(&bytes[..4], b"MDVT");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = encode_checkpoint(&sample(true)).unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x10;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("CRC32"), "{err}");
    }

    #[test]
    fn rejects_truncation_and_oversized_header() {
        let bytes = encode_checkpoint(&sample(false)).unwrap();
        for cut in [0, 3, 10, bytes.len() - 5] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err());
        }
        // Valid checksum over a header that promises an enormous model.
        let mut cfg = tiny();
        cfg.te_layers = 1 << 40;
        let mut body = Vec::new();
        body.extend_from_slice(MDVT_MAGIC);
        body.extend_from_slice(&MDVT_VERSION.to_le_bytes());
        put_json(&mut body, &Header { config: cfg, meta: CheckpointMeta::default() }).unwrap();
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(decode_checkpoint(&body).is_err());
    }

    #[test]
    fn checked_total_agrees_with_count_params() {
        let cfg = ViTConfig::full();
        assert_eq!(checked_total(&cfg), Some(count_params(&cfg)));
        assert_eq!(checked_total(&tiny()), Some(count_params(&tiny())));
    }
}
