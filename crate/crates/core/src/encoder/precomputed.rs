use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"XFPH1";

/// Hidden states exported by an external encoder, keyed by document id.
///
/// Layout: `XFPH1`, u32 document count, then per document a u16 id length,
/// the UTF-8 id, u32 token count, u32 hidden width and `tokens × width`
/// f32 values row by row. All integers and floats are little-endian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedStates {
    entries: Vec<(String, Array<f32>)>,
    index: HashMap<String, usize>,
    // byte offset of each entry's width field, for error reports
    dim_offsets: Vec<usize>,
}

impl PrecomputedStates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, states: Array<f32>) -> Result<()> {
        if states.shape().len() != 2 {
            return Err(Error::Precondition(format!("states for {id} must be a matrix")));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Precondition(format!("document id of {} bytes is too long", id.len())));
        }
        match self.index.get(id) {
            Some(&i) => self.entries[i].1 = states,
            None => {
                self.index.insert(id.to_string(), self.entries.len());
                self.entries.push((id.to_string(), states));
                self.dim_offsets.push(0);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Array<f32>> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// Width of the first document's states.
    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, a)| a.cols())
    }

    /// Fails on the first document whose width differs from `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        for (k, (id, a)) in self.entries.iter().enumerate() {
            if a.cols() != dim {
                return Err(Error::Load {
                    offset: self.dim_offsets[k],
                    message: format!("document {id} has width {}, expected {dim}", a.cols()),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, a) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(a.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(a.cols() as u32).to_le_bytes());
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Load {
                offset: 0,
                message: "bad magic, expected XFPH1".into(),
            });
        }
        let count = r.u32()?;
        let mut out = PrecomputedStates::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Load {
                offset: start + 2 + e.valid_up_to(),
                message: "document id is not UTF-8".into(),
            })?;
            let tokens = r.u32()? as usize;
            let dim_offset = r.pos;
            let dim = r.u32()? as usize;
            let n = tokens.checked_mul(dim).ok_or_else(|| Error::Load {
                offset: dim_offset,
                message: "state matrix size overflows".into(),
            })?;
            let payload = r.take(n.saturating_mul(4)).map_err(|_| Error::Load {
                offset: bytes.len(),
                message: format!("document {id}: declared {tokens}x{dim} floats, payload truncated"),
            })?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let a = Array::new(vec![tokens, dim], data).expect("length checked");
            if out.index.contains_key(id) {
                return Err(Error::Load {
                    offset: start,
                    message: format!("document {id} appears twice"),
                });
            }
            out.insert(id, a)?;
            *out.dim_offsets.last_mut().expect("just inserted") = dim_offset;
        }
        if r.pos != bytes.len() {
            return Err(Error::Load {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn load_precomputed(path: &Path) -> Result<PrecomputedStates> {
    PrecomputedStates::from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Load {
                offset: self.bytes.len(),
                message: format!("unexpected end of file, needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
