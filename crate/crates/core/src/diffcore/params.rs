use std::ops::Index;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Gradients, Graph, Real, Tensor, Var};

pub const PARAMS_MAGIC: [u8; 4] = *b"IGPS";
pub const PARAMS_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` until something flows in.
    pub grad: Option<Tensor<T>>,
}

/// Named, ordered collection of trainable tensors for one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

/// Graph nodes for every parameter of a set, valid for one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Splits into consecutive bindings of the given lengths.
    pub fn split(&self, lens: &[usize]) -> Vec<Bound> {
        let mut start = 0;
        lens.iter()
            .map(|&n| {
                let vars = self.vars[start..start + n].to_vec();
                start += n;
                Bound { vars }
            })
            .collect()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|p| graph.param(p.value.clone()))
                .collect(),
        }
    }

    /// Inserts every parameter as a constant; no gradient reaches them.
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|p| graph.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Adds the gradients of `bound` into each parameter's `grad`.
    ///
    /// Calling this for several bindings of the same set sums their
    /// contributions.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &Bound) {
        for (p, &v) in self.entries.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.get(v) else { continue };
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    p.grad = Some(Tensor::new(p.value.shape(), g.to_vec()).expect("grad shape"))
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Euclidean norm over all accumulated gradients (absent ones count as 0).
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{}: {:?} vs {:?}",
                    a.name,
                    a.value.shape(),
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

impl ParamSet<f32> {
    /// Encodes the set as an IGPS container.
    ///
    /// Layout: magic `IGPS`, u32 version, u32 entry count, then per entry a
    /// u16 name length, the UTF-8 name, a u8 rank, `rank` u32 extents and
    /// the values as 32-bit floats. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.numel() * 4);
        out.extend_from_slice(&PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for p in &self.entries {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.value.rank() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.array::<4>("magic")?;
        if magic != PARAMS_MAGIC {
            return Err(Error::BadMagic {
                expected: PARAMS_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != PARAMS_VERSION {
            return Err(Error::VersionMismatch {
                expected: PARAMS_VERSION,
                found: version,
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut set = ParamSet::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.array::<2>("name length")?) as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Malformed(format!("entry {i}: name is not UTF-8")))?
                .to_owned();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r
                .take(n * 4, "values")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(&shape, values)
                .map_err(|e| Error::Malformed(format!("entry {name}: {e}")))?;
            set.push(name, value);
        }
        if !r.is_done() {
            return Err(Error::Malformed("trailing bytes after last entry".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Cursor over a byte slice that reports truncation by field name.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array::<4>(what)?))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
