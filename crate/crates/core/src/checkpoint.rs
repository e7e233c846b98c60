//! Parameter checkpoints: one JSON header line, then `W_E` and `W_U` as
//! little-endian f64 in row-major order.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, ModelParams};

const FORMAT: &str = "embsig-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub vocab: usize,
    pub activation: Activation,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, seed: u64, step: u64, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: 1,
        d: params.d(),
        vocab: params.vocab(),
        activation: params.activation,
        seed,
        step,
        epoch,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for x in params.w_e.data().iter().chain(params.w_u.data()) {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointHeader, ModelParams)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT || header.version != 1 {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("not a version-1 checkpoint: {} v{}", header.format, header.version),
        });
    }
    let n = header.d * header.vocab;
    let mut read_block = |count: usize, start: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: start,
            msg: "checkpoint truncated".into(),
        })?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let body = line.len();
    let w_e = Matrix::from_vec(header.d, header.vocab, read_block(n, body)?)?;
    let w_u = Matrix::from_vec(header.vocab, header.d, read_block(n, body + n * 8)?)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Parse {
            offset: body + 2 * n * 8,
            msg: "trailing bytes after checkpoint".into(),
        });
    }
    let activation = header.activation;
    Ok((
        header,
        ModelParams {
            w_e,
            w_u,
            activation,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, InitScale};

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = init_params(5, 7, InitScale::Exponent(0.8), Activation::Relu, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, 3, 42, 2).unwrap();
        let (h, q) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!((h.seed, h.step, h.epoch), (3, 42, 2));
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
    }
}
