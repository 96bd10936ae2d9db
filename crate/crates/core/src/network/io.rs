//! Parameter files.
//!
//! Layout, all integers `u64` and all values `f64`, little-endian:
//!
//! ```text
//! layer_count
//! per layer: rank (2 = dense, 3 = conv), then `rank` dims
//! per layer: the weights in row-major order
//! ```

use std::io::{Read, Write};

use super::{Params, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Ten3};

const MAX_RANK_DIM: u64 = 1 << 32;

fn io_err(e: std::io::Error) -> Error {
    Error::Input(format!("params file: {e}"))
}

pub fn write_params<W: Write>(params: &Params, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * (1 + params.weight_count() + 4 * params.len()));
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for w in &params.layers {
        let dims = w.dims();
        buf.extend_from_slice(&(dims.len() as u64).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for w in &params.layers {
        for v in w.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io_err)?;
    out.flush().map_err(io_err)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut input: R) -> Result<Params> {
    let count = read_u64(&mut input)?;
    if count > 1 << 16 {
        return Err(Error::Input(format!("params file: implausible layer count {count}")));
    }
    let mut shapes = Vec::with_capacity(count as usize);
    for l in 0..count {
        let rank = read_u64(&mut input)?;
        if rank != 2 && rank != 3 {
            return Err(Error::Input(format!("params file: layer {} has rank {rank}", l + 1)));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u64(&mut input)?;
            if d >= MAX_RANK_DIM {
                return Err(Error::Input(format!("params file: dimension {d} too large")));
            }
            dims.push(d as usize);
        }
        shapes.push(dims);
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for dims in shapes {
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw).map_err(io_err)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        layers.push(if dims.len() == 2 {
            Weights::Dense(Mat::new(dims[0], dims[1], data)?)
        } else {
            Weights::Conv(Ten3::new([dims[0], dims[1], dims[2]], data)?)
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::Input("params file: trailing bytes".into()));
    }
    Ok(Params { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Activation, Head, NetSpec};

    #[test]
    fn round_trip_is_exact() {
        let mlp = NetSpec::mlp(&[5, 4, 3], Activation::Relu);
        let cnn = NetSpec::cnn(2, 7, &[(3, 3), (2, 2)], Activation::Relu, Head::SquaredError);
        for spec in [mlp, cnn] {
            let p = init_params(&spec, 11).unwrap();
            let mut bytes = Vec::new();
            write_params(&p, &mut bytes).unwrap();
            assert_eq!(read_params(bytes.as_slice()).unwrap(), p);
        }
    }

    #[test]
    fn header_layout() {
        let p = Params { layers: vec![Weights::Dense(Mat::from_rows(&[&[1.5, -2.0]]))] };
        let mut bytes = Vec::new();
        write_params(&p, &mut bytes).unwrap();
        let words: Vec<u64> = bytes[..32].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(words, vec![1, 2, 1, 2]);
        assert_eq!(&bytes[32..40], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 48);
    }

    #[test]
    fn truncated_and_padded_files_fail() {
        let p = init_params(&NetSpec::mlp(&[3, 2], Activation::Relu), 0).unwrap();
        let mut bytes = Vec::new();
        write_params(&p, &mut bytes).unwrap();
        assert!(read_params(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_params(bytes.as_slice()).is_err());
        assert!(read_params(&[7u8, 0, 0][..]).is_err());
    }
}
