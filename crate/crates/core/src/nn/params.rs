use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable value together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order and is preserved by flattening and by snapshot files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

/// Names and shapes of a [`ParamSet`], in iteration order.
pub type Layout = Vec<(String, Vec<usize>)>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn layout(&self) -> Layout {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `self <- tau * other + (1 - tau) * self`, entry by entry.
    pub fn blend_from(&mut self, other: &ParamSet, tau: f64) -> Result<()> {
        if self.layout() != other.layout() {
            return Err(Error::Usage("blend between mismatched layouts".into()));
        }
        for (dst, src) in self.entries.values_mut().zip(other.entries.values()) {
            for (d, s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
        Ok(())
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, p) in other.iter() {
            self.insert(format!("{prefix}{k}"), p.value.clone());
        }
    }

    /// Extracts the entries starting with `prefix`, stripping it.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, p) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, p.value.clone());
            }
        }
        out
    }

    /// Deterministic 64-bit FNV-1a hash over names and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, p) in self.iter() {
            eat(k.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Concatenates all values in iteration order.
pub fn flatten_params(params: &ParamSet) -> Tensor {
    let mut flat = Vec::with_capacity(params.num_values());
    for (_, p) in params.iter() {
        flat.extend_from_slice(p.value.data());
    }
    Tensor::vector(flat)
}

pub fn unflatten_params(layout: &Layout, flat: &Tensor) -> Result<ParamSet> {
    let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if flat.len() != total {
        return Err(Error::dim("unflatten_params", total, flat.len()));
    }
    let mut out = ParamSet::new();
    let mut off = 0;
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.clone(), flat.data()[off..off + n].to_vec())?;
        out.insert(name.clone(), t);
        off += n;
    }
    Ok(out)
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PATP";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Serializes into the `PATP` snapshot layout (little-endian).
pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.num_values() * 8);
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "unexpected end of data at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != SNAPSHOT_MAGIC {
        return Err(Error::Decode("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Decode(format!("entry name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Decode("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.get(&name).is_some() {
            return Err(Error::Decode(format!("duplicate entry `{name}`")));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_params(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_params(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("w0", Tensor::uniform(&[3, 4], 1.0, &mut rng));
        p.insert("b0", Tensor::uniform(&[3], 1.0, &mut rng));
        p.insert("zz", Tensor::uniform(&[2, 1, 2], 1.0, &mut rng));
        p.insert("a", Tensor::uniform(&[1], 1.0, &mut rng));
        p
    }

    #[test]
    fn flatten_zero_set_has_known_length() {
        let mut p = random_set(0);
        for (_, e) in p.iter_mut() {
            e.value.fill(0.0);
        }
        let flat = flatten_params(&p);
        assert_eq!(flat.len(), 12 + 3 + 4 + 1);
        assert!(flat.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flatten_differs_only_in_changed_span() {
        let a = random_set(1);
        let mut b = a.clone();
        b.get_mut("zz").unwrap().value.data_mut()[2] += 1.0;
        let (fa, fb) = (flatten_params(&a), flatten_params(&b));
        // span bookkeeping: "zz" starts after w0 (12) and b0 (3)
        let diff: Vec<usize> = (0..fa.len())
            .filter(|i| fa.data()[*i] != fb.data()[*i])
            .collect();
        assert_eq!(diff, vec![15 + 2]);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let a = random_set(2);
        let bad = Tensor::vector(vec![0.0; 5]);
        assert!(matches!(
            unflatten_params(&a.layout(), &bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn snapshot_file_round_trip() {
        let a = random_set(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.patp");
        save_params(&a, &path).unwrap();
        let b = load_params(&path).unwrap();
        assert_eq!(a.layout(), b.layout());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn wrong_version_is_explicit() {
        let mut bytes = encode_params(&random_set(4));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_params(&bytes),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn truncated_file_is_decode_error() {
        let bytes = encode_params(&random_set(5));
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_params(cut), Err(Error::Decode(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_params(&longer), Err(Error::Decode(_))));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![1.5]));
        let bytes = encode_params(&p);
        let mut expected = b"PATP".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'x', 1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest::proptest! {
        #[test]
        fn flatten_and_snapshot_are_exact_inverses(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            split in 1usize..40,
        ) {
            let split = split.min(vals.len());
            let mut p = ParamSet::new();
            p.insert("first", Tensor::vector(vals[..split].to_vec()));
            p.insert("second", Tensor::vector(vals[split..].to_vec()));
            let back = unflatten_params(&p.layout(), &flatten_params(&p)).unwrap();
            proptest::prop_assert_eq!(back.fingerprint(), p.fingerprint());
            let decoded = decode_params(&encode_params(&p)).unwrap();
            proptest::prop_assert_eq!(decoded.fingerprint(), p.fingerprint());
            proptest::prop_assert_eq!(decoded.layout(), p.layout());
        }
    }
}
