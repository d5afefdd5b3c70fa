//! Binary container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TFCK" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name bytes | dtype: u8 | rank: u32 |
//!             rank × extent: u64 | raw values )
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = u64.

use std::io::{self, Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
            ArrayData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

pub fn write_checkpoint<W: Write>(mut w: W, arrays: &[NamedArray]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("array {:?}: shape {:?} does not match {} values", a.name, a.shape, a.data.len()),
            ));
        }
        w.write_all(&(a.name.len() as u32).to_le_bytes())?;
        w.write_all(a.name.as_bytes())?;
        w.write_all(&[a.data.code()])?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &e in &a.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match &a.data {
            ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::U8(v) => w.write_all(v)?,
            ArrayData::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<Vec<NamedArray>> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected TFCK")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("array name is not UTF-8: {e}")))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let data = match code[0] {
            0 => ArrayData::F32(read_values(&mut r, n, f32::from_le_bytes)?),
            1 => ArrayData::F64(read_values(&mut r, n, f64::from_le_bytes)?),
            2 => {
                let mut v = vec![0u8; n];
                r.read_exact(&mut v)?;
                ArrayData::U8(v)
            }
            3 => ArrayData::U64(read_values(&mut r, n, u64::from_le_bytes)?),
            c => return Err(bad(format!("array {name:?}: unknown dtype code {c}"))),
        };
        out.push(NamedArray { name, shape, data });
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_values<R: Read, V, const N: usize>(r: &mut R, n: usize, f: fn([u8; N]) -> V) -> io::Result<Vec<V>> {
    let mut raw = vec![0u8; n * N];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(N)
        .map(|c| f(c.try_into().expect("chunk has N bytes")))
        .collect())
}
