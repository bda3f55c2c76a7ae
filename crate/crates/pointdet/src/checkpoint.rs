//! Single-file checkpoint: magic, a config echo, then named f64 arrays in
//! parameter-store order. Everything is little-endian and byte-exact, so a
//! save/load round trip reproduces parameters bit for bit.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tape::ParamStore;

const MAGIC: &[u8; 8] = b"PDCK0001";

pub fn save(path: &Path, config_echo: &str, store: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let echo = config_echo.as_bytes();
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(echo)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, def) in store.iter() {
        let name = def.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[def.value.ndim() as u8])?;
        for &d in def.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in def.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("file truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Read a checkpoint: the config echo plus `(name, array)` pairs in the
/// order they were saved.
pub fn load(path: &Path) -> Result<(String, Vec<(String, ArrayD<f64>)>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint file",
            String::from_utf8_lossy(&magic)
        )));
    }
    let echo_len = read_u32(&mut r)? as usize;
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo)
        .map_err(|_| Error::Checkpoint("truncated config echo".into()))?;
    let echo = String::from_utf8(echo)
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;

    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint(format!("truncated name of array {i}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("array {i} name is not UTF-8")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)
            .map_err(|_| Error::Checkpoint(format!("{name}: missing rank")))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("{name}: truncated values")))?;
            values.push(f64::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(shape, values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        arrays.push((name, arr));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((echo, arrays))
}

/// Load a checkpoint into an already-constructed parameter store. The name
/// sets and shapes must match exactly; values are overwritten.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<String> {
    let (echo, arrays) = load(path)?;
    if arrays.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} arrays, model has {} parameters",
            arrays.len(),
            store.len()
        )));
    }
    for (name, arr) in arrays {
        let id = store.find(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint array {name} has no matching parameter"))
        })?;
        let dst = store.value_mut(id);
        if dst.shape() != arr.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} vs model shape {:?}",
                arr.shape(),
                dst.shape()
            )));
        }
        *dst = arr;
    }
    Ok(echo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("a.w", ArrayD::from_shape_simple_fn(vec![2, 3, 1, 1], || rng.gen_range(-1.0..1.0)), true);
        s.add("a.b", ArrayD::from_shape_simple_fn(vec![2], || rng.gen_range(-1.0..1.0)), false);
        s.add("scales", ArrayD::from_shape_simple_fn(vec![2], || rng.gen_range(-1.0..1.0)), false);
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = random_store(41);
        save(&path, "converter=moment\nseed=7\n", &store).unwrap();
        let (echo, arrays) = load(&path).unwrap();
        assert_eq!(echo, "converter=moment\nseed=7\n");
        assert_eq!(arrays.len(), store.len());
        for ((name, arr), (_, def)) in arrays.iter().zip(store.iter()) {
            assert_eq!(name, &def.name);
            assert_eq!(arr.shape(), def.value.shape());
            for (a, b) in arr.iter().zip(def.value.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Saving the loaded store again reproduces the identical file.
        let mut store2 = random_store(999);
        load_into(&path, &mut store2).unwrap();
        let path2 = dir.path().join("m2.ckpt");
        save(&path2, "converter=moment\nseed=7\n", &store2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, "", &random_store(42)).unwrap();

        let mut missing = ParamStore::new();
        missing.add("a.w", ArrayD::zeros(vec![2, 3, 1, 1]), true);
        assert!(matches!(load_into(&path, &mut missing), Err(Error::Checkpoint(_))));

        let mut wrong_shape = random_store(43);
        let id = wrong_shape.find("a.b").unwrap();
        *wrong_shape.value_mut(id) = ArrayD::zeros(vec![3]);
        assert!(matches!(load_into(&path, &mut wrong_shape), Err(Error::Checkpoint(_))));

        let mut wrong_name = ParamStore::new();
        wrong_name.add("a.w", ArrayD::zeros(vec![2, 3, 1, 1]), true);
        wrong_name.add("a.bias", ArrayD::zeros(vec![2]), false);
        wrong_name.add("scales", ArrayD::zeros(vec![2]), false);
        assert!(matches!(load_into(&path, &mut wrong_name), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, "x", &random_store(44)).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ckpt");
        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(load(&bad_magic), Err(Error::Checkpoint(_))));

        let truncated = dir.path().join("trunc.ckpt");
        std::fs::write(&truncated, &good[..good.len() - 5]).unwrap();
        assert!(matches!(load(&truncated), Err(Error::Checkpoint(_))));

        let trailing = dir.path().join("trail.ckpt");
        let mut bytes = good;
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(load(&trailing), Err(Error::Checkpoint(_))));
    }
}
