//! "FDT1" binary tensor files: magic `FDT1`, u8 rank, rank x u32 LE extents,
//! then the f32 LE payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FDT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let err = |msg: &str| Error::Format {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(err("missing FDT1 magic"));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(err("truncated header"));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(err(&format!("payload has {} bytes, shape {shape:?} needs {}", bytes.len() - header, 4 * n)));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| err(&e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut bytes)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..5], b"FDT1\x02");
        assert_eq!(&b[5..13], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[13..17], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 21);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("mem");
        assert!(decode(b"FDT2\x00", p).is_err());
        let mut b = encode(&Tensor::ones(&[3]));
        b.pop();
        assert!(decode(&b, p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let t = crate::rng::Stream::new(seed).normal_tensor(&shape);
            let back = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
