//! Binary parameter checkpoints.
//!
//! Layout: the magic `PCCFORGE1`, then one record per parameter until EOF:
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension, and the
//! values as little-endian `f64`. All integers are little-endian.

use std::io::{self, Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"PCCFORGE1";

pub fn write_params<'a, W: Write>(
    mut out: W,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in params {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 9];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut params = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_or_eof(&mut input, &mut len)? {
            break;
        }
        let name_len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        read_field(&mut input, &mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;

        let mut rank = [0u8; 4];
        read_field(&mut input, &mut rank)?;
        let rank = u32::from_le_bytes(rank) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            read_field(&mut input, &mut d)?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_field(&mut input, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    Ok(params)
}

fn read_field<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated record".into()),
        _ => Error::Io(e),
    })
}

// Ok(false) on a clean EOF before the first byte.
fn read_or_eof<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Checkpoint("truncated record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_magic() {
        let t = Tensor::scalar(1.5);
        let mut buf = Vec::new();
        write_params(&mut buf, [("s", &t)]).unwrap();
        assert_eq!(&buf[..9], b"PCCFORGE1");
        // 9 magic + 4 len + 1 name + 4 rank + 0 dims + 8 value
        assert_eq!(buf.len(), 26);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params(&b"PCCFORGE2"[..]).is_err());
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, [("w", &t)]).unwrap();
        buf.pop();
        assert!(matches!(read_params(&buf[..]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            values in prop::collection::vec(any::<f64>().prop_filter("no NaN", |v| !v.is_nan()), 1..40),
            cols in 1usize..4,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data: Vec<f64> = values[..rows * cols].to_vec();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let s = Tensor::scalar(-0.0);
            let mut buf = Vec::new();
            write_params(&mut buf, [("enc.block1.w", &t), ("gen.fc1.b", &s)]).unwrap();
            let back = read_params(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "enc.block1.w");
            prop_assert_eq!(back[0].1.shape(), t.shape());
            for (a, b) in back[0].1.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
        }
    }
}
