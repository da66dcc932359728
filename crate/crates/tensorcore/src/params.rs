use indexmap::IndexMap;

use crate::{Scalar, Tensor, TensorError};

/// Named parameter arrays of one network, in deterministic insertion order.
///
/// Every mutable access bumps `generation`, which forward caches record so a
/// backward pass against since-modified parameters is rejected.
#[derive(Debug, Clone)]
pub struct Params<T> {
    entries: IndexMap<String, Tensor<T>>,
    generation: u64,
}

/// Equality compares names, shapes and values; the generation counter is
/// bookkeeping and does not participate.
impl<T: PartialEq> PartialEq for Params<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

/// Single-precision parameter container used for training and checkpoints.
pub type ParamSet = Params<f32>;

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            generation: 0,
        }
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), TensorError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::InvalidSpec(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        self.generation += 1;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.generation += 1;
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.generation += 1;
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
            generation: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            generation: 0,
        }
    }

    /// Checks that `other` has exactly the same names (in order) and shapes.
    pub fn check_same_layout<U: Scalar>(&self, other: &Params<U>) -> Result<(), TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::InvalidSpec(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(TensorError::MissingParam(na.to_string()));
            }
            if ta.shape() != tb.shape() {
                return Err(TensorError::ParamShape {
                    name: na.to_string(),
                    expected: ta.shape().to_vec(),
                    got: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self ← (1 − tau)·self + tau·other`, elementwise.
    pub fn blend_from(&mut self, other: &Params<T>, tau: T) -> Result<(), TensorError> {
        self.check_same_layout(other)?;
        let keep = T::one() - tau;
        for ((_, dst), (_, src)) in self.iter_mut().zip(other.iter()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = keep * *d + tau * *s;
            }
        }
        Ok(())
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Params<T>) -> Result<(), TensorError> {
        self.check_same_layout(other)?;
        for ((_, dst), (_, src)) in self.iter_mut().zip(other.iter()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += *s;
            }
        }
        Ok(())
    }

    /// Moves every entry of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: Params<T>) -> Result<(), TensorError> {
        for (k, v) in other.entries {
            self.insert(format!("{prefix}{k}"), v)?;
        }
        Ok(())
    }
}

impl ParamSet {
    /// Encodes as a parameter-record section: a little-endian `u32` record
    /// count, then per record the name length, name bytes, rank, dims (`u32`)
    /// and values (`f32`), all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.num_values() * 4 + self.len() * 32);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| TensorError::Decode(format!("name is not utf-8: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Decode(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        params.generation = 0;
        Ok(params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Decode("unexpected end of section".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("0.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]).unwrap())
            .unwrap();
        p.insert("0.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("0.w", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn record_layout_is_little_endian() {
        let mut p = ParamSet::new();
        p.insert("ab", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let bytes = p.to_bytes();
        let mut want = vec![1, 0, 0, 0, 2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 1, 0, 0, 0];
        want.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_section_rejected() {
        let bytes = sample().to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn blend_extremes() {
        let mut t = sample().zeros_like();
        let online = sample();
        t.blend_from(&online, 1.0).unwrap();
        assert_eq!(t.get("0.w").unwrap().data(), online.get("0.w").unwrap().data());
        let before = t.clone();
        t.blend_from(&online.zeros_like(), 0.0).unwrap();
        assert_eq!(t.get("0.b").unwrap().data(), before.get("0.b").unwrap().data());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(vals in proptest::collection::vec(any::<u32>(), 1..40)) {
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let mut p = ParamSet::new();
            p.insert("layer.weight", Tensor::new(vec![data.len()], data.clone()).unwrap()).unwrap();
            let back = ParamSet::from_bytes(&p.to_bytes()).unwrap();
            let got: Vec<u32> = back.get("layer.weight").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, vals);
        }
    }
}
