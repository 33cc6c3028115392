//! Binary tensor-record files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LUSK" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: [u8; name_len] (UTF-8)
//!   rank: u32 | dims: [u64; rank]
//!   values: [f32; prod(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const RECORD_MAGIC: [u8; 4] = *b"LUSK";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn from_tensor(name: &str, t: &Tensor<f32>) -> Self {
        Self {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(&self.dims, self.values.clone())
    }
}

pub fn encode_records(w: &mut impl Write, records: &[Record]) -> std::io::Result<()> {
    w.write_all(&RECORD_MAGIC)?;
    w.write_all(&RECORD_VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Fill `buf` completely, or report a clean EOF when nothing was read.
fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

pub fn decode_records(r: &mut impl Read) -> std::result::Result<Vec<Record>, String> {
    let io = |e: std::io::Error| format!("truncated record stream: {e}");
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(io)?;
    if head[..4] != RECORD_MAGIC {
        return Err("bad magic, not a LUSK record file".into());
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != RECORD_VERSION {
        return Err(format!("unsupported record version {version}"));
    }
    let mut out = Vec::new();
    loop {
        let mut u = [0u8; 4];
        if !read_exact_or_eof(r, &mut u).map_err(io)? {
            break;
        }
        let name_len = u32::from_le_bytes(u) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| "record name is not UTF-8".to_string())?;
        r.read_exact(&mut u).map_err(io)?;
        let rank = u32::from_le_bytes(u) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            r.read_exact(&mut d).map_err(io)?;
            dims.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Record { name, dims, values });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    encode_records(&mut w, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_records(&mut BufReader::new(f)).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        let r = Record {
            name: "w".into(),
            dims: vec![2],
            values: vec![1.0, -2.5],
        };
        encode_records(&mut buf, &[r]).unwrap();
        assert_eq!(&buf[..4], b"LUSK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'w');
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(&buf[25..29], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let mut buf = Vec::new();
        let r = Record {
            name: "abc".into(),
            dims: vec![3],
            values: vec![1.0, 2.0, 3.0],
        };
        encode_records(&mut buf, &[r]).unwrap();
        buf.pop();
        assert!(decode_records(&mut buf.as_slice()).is_err());
        assert!(decode_records(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            recs in prop::collection::vec(
                ("[a-z._0-9]{0,12}", prop::collection::vec(1usize..4, 0..4))
                    .prop_flat_map(|(name, dims)| {
                        let n: usize = dims.iter().product();
                        (Just(name), Just(dims), prop::collection::vec(any::<u32>(), n))
                    }),
                0..4,
            )
        ) {
            let records: Vec<Record> = recs
                .into_iter()
                .map(|(name, dims, bits)| Record {
                    name,
                    dims,
                    values: bits.into_iter().map(f32::from_bits).collect(),
                })
                .collect();
            let mut buf = Vec::new();
            encode_records(&mut buf, &records).unwrap();
            let back = decode_records(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.dims, &b.dims);
                let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
