//! NFTP tensor blob format, the checkpoint container used repo-wide.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic "NFTP" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 LE data
//! ```

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"NFTP";
pub const VERSION: u32 = 1;

pub fn write_blob<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_blob<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Decode {
            path: "<blob>".into(),
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Decode {
            path: "<blob>".into(),
            message: format!("unsupported version {version}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|e| Error::Decode {
            path: "<blob>".into(),
            message: format!("tensor name is not UTF-8: {e}"),
        })?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_blob(std::io::BufWriter::new(file), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    read_blob(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Decode { message, .. } => Error::Decode {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

pub fn save_param_set(path: &Path, params: &ParamSet) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    save(path, &tensors)
}

pub fn load_param_set(path: &Path) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for (name, t) in load(path)? {
        set.push(name, t);
    }
    Ok(set)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_pinned() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_blob(&mut buf, &[("w".into(), t)]).unwrap();
        // magic, version 1, count 1, name len 1, "w", rank 1, dim 2, then data
        assert_eq!(&buf[..4], b"NFTP");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'w');
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..25], &2u32.to_le_bytes());
        assert_eq!(&buf[25..29], &1.0f32.to_le_bytes());
    }

    #[test]
    fn roundtrip_preserves_names_shapes_bits() {
        let tensors = vec![
            (
                "g.dense1.weight".to_string(),
                Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, f32::MIN_POSITIVE, 1e30, -0.0])
                    .unwrap(),
            ),
            ("w".to_string(), Tensor::new(vec![4], vec![1.0; 4]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_blob(&mut buf, &tensors).unwrap();
        let back = read_blob(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(back.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(read_blob(&buf[..]).is_err());
    }
}
