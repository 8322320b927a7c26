//! Binary checkpoint format.
//!
//! Layout: magic `CKP1`, u32 version, u32 tensor count; per tensor a u16
//! name length, the UTF-8 name, u8 rank, one u32 per dimension, then the
//! payload as f32 little-endian. Tensors are written in sorted name order,
//! so serialization is deterministic and reading a file back and rewriting
//! it reproduces the bytes exactly.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::ModelParams;
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 4] = b"CKP1";

pub fn params_to_bytes(params: &ModelParams) -> Result<Vec<u8>, NnError> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(params.version())?;
    out.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(NnError::Checkpoint(format!("tensor name too long: {name}")));
        }
        out.write_u16::<LittleEndian>(name_bytes.len() as u16)?;
        out.write_all(name_bytes)?;
        let rank = tensor.rank();
        if rank > u8::MAX as usize {
            return Err(NnError::Checkpoint(format!("tensor rank too large: {rank}")));
        }
        out.write_u8(rank as u8)?;
        for &dim in tensor.shape() {
            out.write_u32::<LittleEndian>(dim as u32)?;
        }
        for &v in tensor.data() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(out)
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ModelParams, NnError> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != ModelParams::FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.read_u32::<LittleEndian>()?;
    let mut params = ModelParams::new(0);
    for _ in 0..count {
        let name_len = cur.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| NnError::Checkpoint(format!("invalid tensor name: {e}")))?;
        let rank = cur.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.read_f32::<LittleEndian>()? as f64);
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if cur.position() != bytes.len() as u64 {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() as u64 - cur.position()
        )));
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<(), NnError> {
    fs::write(path, params_to_bytes(params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams, NnError> {
    let bytes = fs::read(path)?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        let mut params = ModelParams::new(42);
        params
            .insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.5, 0.25, 3.5, -7.0, 0.0]).unwrap())
            .unwrap();
        params
            .insert("a.bias", Tensor::from_vec(vec![0.125, -0.0625]))
            .unwrap();
        let bytes = params_to_bytes(&params).unwrap();
        let loaded = params_from_bytes(&bytes).unwrap();
        let bytes2 = params_to_bytes(&loaded).unwrap();
        assert_eq!(bytes, bytes2);
        // f32-representable values survive exactly
        assert_eq!(loaded.get("a.weight").unwrap().data(), params.get("a.weight").unwrap().data());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = params_from_bytes(b"NOPE....").unwrap_err();
        assert!(matches!(err, NnError::Checkpoint(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut params = ModelParams::new(0);
        params.insert("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let bytes = params_to_bytes(&params).unwrap();
        assert!(params_from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_params_round_trip(values in proptest::collection::vec(-1e3f32..1e3, 1..40)) {
            let mut params = ModelParams::new(1);
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            params.insert("t", Tensor::from_vec(data.clone())).unwrap();
            let bytes = params_to_bytes(&params).unwrap();
            let loaded = params_from_bytes(&bytes).unwrap();
            prop_assert_eq!(loaded.get("t").unwrap().data(), &data[..]);
            prop_assert_eq!(params_to_bytes(&loaded).unwrap(), bytes);
        }
    }
}
