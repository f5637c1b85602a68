//! Parameter checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           8 bytes   b"QTTTCKP1"
//! version         u32       1
//! layers          u64
//! heads           u64
//! dim             u64
//! mlp_ratio       u64
//! vocab           u64
//! max_context     u64
//! rope_enabled    u8        0 | 1
//! tied_embeddings u8        0 | 1
//! tensor_count    u64
//! per tensor, in declared order:
//!   name_len      u64
//!   name          utf-8 bytes
//!   flag          u8        0 = other, 1 = query
//!   rows          u64
//!   cols          u64
//!   data          rows*cols f64, little-endian
//! ```
//!
//! Round-trips are bit-exact.

use super::{LayerParams, Matrix, ModelConfig, ModelParams, ParamFlag};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"QTTTCKP1";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams, mut w: impl Write) -> Result<()> {
    let cfg = &params.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        cfg.layers as u64,
        cfg.heads as u64,
        cfg.dim as u64,
        cfg.mlp_ratio as u64,
        cfg.vocab as u64,
        cfg.max_context as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[cfg.rope_enabled as u8, cfg.tied_embeddings as u8])?;

    let mut count = 0u64;
    params.visit_tensors(|_, _, _, _, _| count += 1);
    w.write_all(&count.to_le_bytes())?;

    let mut err = None;
    params.visit_tensors(|name, flag, rows, cols, data| {
        if err.is_some() {
            return;
        }
        let mut write_one = || -> Result<()> {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[matches!(flag, ParamFlag::Query) as u8])?;
            w.write_all(&(rows as u64).to_le_bytes())?;
            w.write_all(&(cols as u64).to_le_bytes())?;
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        if let Err(e) = write_one() {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut buf)?;
    use std::io::Write as _;
    buf.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_tensor(
    r: &mut impl Read,
    expect_name: &str,
    expect_flag: ParamFlag,
) -> Result<(usize, usize, Vec<f64>)> {
    let name_len = read_u64(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
    if name != expect_name {
        return Err(Error::Checkpoint(format!(
            "tensor order mismatch: expected {expect_name}, found {name}"
        )));
    }
    let flag = match read_u8(r)? {
        0 => ParamFlag::Other,
        1 => ParamFlag::Query,
        other => return Err(Error::Checkpoint(format!("unknown flag byte {other}"))),
    };
    if flag != expect_flag {
        return Err(Error::Checkpoint(format!("flag mismatch on {name}")));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut b = [0u8; 8];
    for slot in data.iter_mut() {
        r.read_exact(&mut b)?;
        *slot = f64::from_le_bytes(b);
    }
    Ok((rows, cols, data))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let layers = read_u64(&mut r)? as usize;
    let heads = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let mlp_ratio = read_u64(&mut r)? as usize;
    let vocab = read_u64(&mut r)? as usize;
    let max_context = read_u64(&mut r)? as usize;
    let rope_enabled = read_u8(&mut r)? != 0;
    let tied_embeddings = read_u8(&mut r)? != 0;
    let config = ModelConfig {
        layers,
        heads,
        dim,
        mlp_ratio,
        vocab,
        rope_enabled,
        max_context,
        tied_embeddings,
    };
    config.validate()?;

    let count = read_u64(&mut r)?;
    if count != 3 + 8 * layers as u64 {
        return Err(Error::Checkpoint(format!("unexpected tensor count {count}")));
    }

    let matrix = |rows: usize, cols: usize, data: Vec<f64>, want_r: usize, want_c: usize| {
        if rows != want_r || cols != want_c {
            return Err(Error::Checkpoint(format!(
                "tensor shape {rows}x{cols}, expected {want_r}x{want_c}"
            )));
        }
        Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor data: {e}")))
    };

    let (r0, c0, data) = read_tensor(&mut r, "embed", ParamFlag::Other)?;
    let embed = matrix(r0, c0, data, vocab, dim)?;

    let dff = config.mlp_dim();
    let mut layer_params = Vec::with_capacity(layers);
    for i in 0..layers {
        let (_, c, ln1) = read_tensor(&mut r, &format!("layer{i}.ln1"), ParamFlag::Other)?;
        if c != dim {
            return Err(Error::Checkpoint("gain width mismatch".into()));
        }
        let (rr, cc, d1) = read_tensor(&mut r, &format!("layer{i}.wq"), ParamFlag::Query)?;
        let w_q = matrix(rr, cc, d1, dim, dim)?;
        let (rr, cc, d2) = read_tensor(&mut r, &format!("layer{i}.wk"), ParamFlag::Other)?;
        let w_k = matrix(rr, cc, d2, dim, dim)?;
        let (rr, cc, d3) = read_tensor(&mut r, &format!("layer{i}.wv"), ParamFlag::Other)?;
        let w_v = matrix(rr, cc, d3, dim, dim)?;
        let (rr, cc, d4) = read_tensor(&mut r, &format!("layer{i}.wo"), ParamFlag::Other)?;
        let w_o = matrix(rr, cc, d4, dim, dim)?;
        let (_, c2, ln2) = read_tensor(&mut r, &format!("layer{i}.ln2"), ParamFlag::Other)?;
        if c2 != dim {
            return Err(Error::Checkpoint("gain width mismatch".into()));
        }
        let (rr, cc, d5) = read_tensor(&mut r, &format!("layer{i}.up"), ParamFlag::Other)?;
        let w_up = matrix(rr, cc, d5, dff, dim)?;
        let (rr, cc, d6) = read_tensor(&mut r, &format!("layer{i}.down"), ParamFlag::Other)?;
        let w_down = matrix(rr, cc, d6, dim, dff)?;
        layer_params.push(LayerParams {
            ln1_gain: ln1,
            w_q,
            w_k,
            w_v,
            w_o,
            ln2_gain: ln2,
            w_up,
            w_down,
        });
    }
    let (_, cf, final_gain) = read_tensor(&mut r, "final_norm", ParamFlag::Other)?;
    if cf != dim {
        return Err(Error::Checkpoint("gain width mismatch".into()));
    }
    let (rr, cc, du) = read_tensor(&mut r, "unembed", ParamFlag::Other)?;
    let unembed = matrix(rr, cc, du, dim, vocab)?;

    Ok(ModelParams {
        config,
        embed,
        layers: layer_params,
        final_gain,
        unembed,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Serialize to bytes in the checkpoint format; used for byte-level
/// parameter diffs as well as persistence.
pub fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint(params, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            vocab: 16,
            rope_enabled: true,
            max_context: 64,
            tied_embeddings: false,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::init(&cfg(), 77).unwrap();
        let bytes = checkpoint_bytes(&params).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(params, back);
        let bytes2 = checkpoint_bytes(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let params = ModelParams::init(&cfg(), 1).unwrap();
        let mut bytes = checkpoint_bytes(&params).unwrap();
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes[..]).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let params = ModelParams::init(&cfg(), 1).unwrap();
        let bytes = checkpoint_bytes(&params).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let params = ModelParams::init(&cfg(), 5).unwrap();
        let dir = std::env::temp_dir().join("qttt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(params, back);
        std::fs::remove_file(&path).ok();
    }
}
