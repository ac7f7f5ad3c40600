//! Parameter checkpoint container.
//!
//! Little-endian binary layout, bit-exact on round trip:
//!
//! ```text
//! magic          4 bytes   "PKC1"
//! repeated until end of file, one record per parameter:
//!   name_len     u32
//!   name         name_len bytes, UTF-8
//!   rank         u32 (always 4 here)
//!   dims         rank x u64
//!   payload      prod(dims) x f64, IEEE-754 bit patterns
//! ```

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKC1";

/// Write named parameters; the file appears atomically (temp + rename).
pub fn save_checkpoint<P: AsRef<Path>>(path: P, params: &[(&str, &Tensor4)]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, tensor) in params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&4u32.to_le_bytes())?;
            let s = tensor.shape();
            for dim in [s.n, s.c, s.h, s.w] {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read every parameter record, in file order.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor4)>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, expected {CHECKPOINT_MAGIC:02x?}",
            magic
        )));
    }
    let mut params = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf)?;
        let rank = u32::from_le_bytes(rank_buf);
        if rank != 4 {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: rank {rank} unsupported (expected 4)"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *d = u64::from_le_bytes(b) as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = vec![0.0f64; shape.numel()];
        let mut b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let tensor = Tensor4::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        params.push((name, tensor));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(t: &Tensor4) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.pkc");
        let a = Tensor4::new(
            Shape4::new(2, 3, 4, 5),
            (0..120).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        let b = Tensor4::new(Shape4::new(1, 7, 1, 1), vec![f64::MIN_POSITIVE; 7]).unwrap();
        save_checkpoint(&path, &[("layer.weight", &a), ("layer.bias", &b)]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "layer.weight");
        assert_eq!(loaded[0].1.shape(), a.shape());
        assert_eq!(bits(&loaded[0].1), bits(&a));
        assert_eq!(loaded[1].0, "layer.bias");
        assert_eq!(bits(&loaded[1].1), bits(&b));
    }

    #[test]
    fn magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pkc");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let good = dir.path().join("good.pkc");
        let t = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        save_checkpoint(&good, &[("w", &t)]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.pkc");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&cut).is_err());
    }
}
