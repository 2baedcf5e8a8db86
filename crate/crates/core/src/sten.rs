//! The `STEN` binary tensor format.
//!
//! ```text
//! "STEN" | u8 version (=1) | u8 ndims | ndims x u32 LE dims | f32 LE values
//! ```
//!
//! Values are row-major. There is no trailing padding, so several tensors can
//! be concatenated back to back in one stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STEN";
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Domain(format!("{} axes exceed STEN limit", t.ndim())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.ndim() as u8])?;
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Domain(format!("axis length {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Number of bytes `write_tensor` produces for `t`.
pub fn encoded_len(t: &Tensor) -> usize {
    6 + 4 * t.ndim() + 4 * t.len()
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::ParseAt {
            offset: *offset,
            msg: format!("truncated STEN stream while reading {what}"),
        },
        _ => Error::Io(e),
    })?;
    *offset += buf.len();
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut offset = 0;
    let mut head = [0u8; 6];
    read_exact_at(r, &mut head, &mut offset, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::ParseAt {
            offset: 0,
            msg: "bad magic, expected STEN".into(),
        });
    }
    if head[4] != VERSION {
        return Err(Error::ParseAt {
            offset: 4,
            msg: format!("unsupported STEN version {}", head[4]),
        });
    }
    let ndims = head[5] as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let mut d = [0u8; 4];
        read_exact_at(r, &mut d, &mut offset, "dims")?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = dims.iter().product();
    let mut raw = vec![0u8; n * 4];
    read_exact_at(r, &mut raw, &mut offset, "values")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&dims, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)?;
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_tensor(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"STEN".to_vec();
        expect.extend_from_slice(&[1, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(buf.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let err = read_tensor(&mut &b"NOPE\x01\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::ParseAt { offset: 0, .. }));
        let err = read_tensor(&mut &b"STEN\x01\x01\x04\x00\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::ParseAt { offset: 10, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let n: usize = dims.iter().product();
            let t = Tensor::new(&dims, (0..n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
