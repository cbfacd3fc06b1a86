//! Binary weight container.
//!
//! ```text
//! "FGSS" | version u32 | count u32 | count x (name_len u32 | name | ndim u32 | dims u32.. | f32..)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::nn::{Adam, Parameters, Scalar};

pub const MAGIC: &[u8; 4] = b"FGSS";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<ArchiveTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        ensure!(
            dims.iter().product::<usize>() == data.len(),
            Archive,
            "tensor {name}: dims {dims:?} do not match {} values",
            data.len()
        );
        ensure!(self.get(&name).is_none(), Archive, "duplicate tensor {name}");
        self.tensors.push(ArchiveTensor { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.tensors.len())?.to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&u32_of(t.name.len())?.to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&u32_of(t.dims.len())?.to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&u32_of(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == MAGIC, Archive, "not a tensor archive (bad magic)");
        let version = read_u32(&mut r)?;
        ensure!(version == VERSION, Archive, "unsupported archive version {version}");
        let count = read_u32(&mut r)? as usize;
        let mut out = Self::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            ensure!(len <= MAX_NAME, Archive, "tensor name of {len} bytes");
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            ensure!(ndim <= MAX_NDIM, Archive, "tensor {name} has {ndim} dims");
            let dims = (0..ndim)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Archive(format!("tensor {name} is too large")))?;
            // Read in bounded chunks so a corrupt header cannot force a huge allocation.
            let mut data = Vec::new();
            let mut left = n;
            let mut buf = vec![0u8; 4 * n.min(1 << 16)];
            while left > 0 {
                let k = left.min(1 << 16);
                r.read_exact(&mut buf[..4 * k])?;
                data.extend(buf[..4 * k].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
                left -= k;
            }
            out.push(name, dims, data)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Appends every parameter and buffer of `module` under `prefix`.
    pub fn add_module<T: Scalar, M: Parameters<T> + ?Sized>(&mut self, prefix: &str, module: &M) -> Result<()> {
        let mut params = Vec::new();
        module.visit(prefix, &mut params);
        for (name, p) in params {
            ensure!(!p.is_meta(), Archive, "cannot archive shape-only parameter {name}");
            self.push(name, p.dims.clone(), p.value.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())?;
        }
        Ok(())
    }

    /// Overwrites every parameter of `module` from the tensors under
    /// `prefix`; names and shapes must match exactly.
    pub fn load_module<T: Scalar, M: Parameters<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut params = Vec::new();
        module.visit_mut(prefix, &mut params);
        for (name, p) in params {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Archive(format!("archive lacks tensor {name}")))?;
            ensure!(
                t.dims == p.dims,
                Archive,
                "tensor {name}: archive dims {:?}, model dims {:?}",
                t.dims,
                p.dims
            );
            p.value = t.data.iter().map(|&v| T::lit(v as f64)).collect();
            if p.trainable {
                p.grad = vec![T::zero(); p.value.len()];
            }
        }
        Ok(())
    }

    /// Names and dims of every tensor under `prefix` of `module`, checked
    /// against this archive without loading values.
    pub fn check_module<T: Scalar, M: Parameters<T> + ?Sized>(&self, prefix: &str, module: &M) -> Result<()> {
        let mut params = Vec::new();
        module.visit(prefix, &mut params);
        for (name, p) in params {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Archive(format!("archive lacks tensor {name}")))?;
            ensure!(t.dims == p.dims, Archive, "tensor {name}: dims {:?} vs {:?}", t.dims, p.dims);
        }
        Ok(())
    }

    /// Stores Adam moments as `{prefix}.m.{param}` and `{prefix}.v.{param}`.
    /// The step counter belongs in the checkpoint manifest.
    pub fn add_adam<T: Scalar>(&mut self, prefix: &str, adam: &Adam<T>) -> Result<()> {
        let f = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect::<Vec<_>>();
        for (name, (m, v)) in &adam.moments {
            self.push(format!("{prefix}.m.{name}"), vec![m.len()], f(m))?;
            self.push(format!("{prefix}.v.{name}"), vec![v.len()], f(v))?;
        }
        Ok(())
    }

    pub fn load_adam<T: Scalar>(&self, prefix: &str, adam: &mut Adam<T>, step: u64) -> Result<()> {
        let mp = format!("{prefix}.m.");
        adam.moments.clear();
        adam.step = step;
        for t in &self.tensors {
            let Some(name) = t.name.strip_prefix(&mp) else { continue };
            let v = self
                .get(&format!("{prefix}.v.{name}"))
                .ok_or_else(|| Error::Archive(format!("optimizer state lacks second moment of {name}")))?;
            let g = |d: &[f32]| d.iter().map(|&x| T::lit(x as f64)).collect::<Vec<T>>();
            adam.moments.insert(name.to_string(), (g(&t.data), g(&v.data)));
        }
        Ok(())
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Archive(format!("{v} does not fit the u32 header field")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Archive("truncated archive".into()),
        _ => e.into(),
    })?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::ConvBlock;
    use crate::nn::Init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arb_archive() -> impl Strategy<Value = TensorArchive> {
        prop::collection::vec(
            prop::collection::vec(0usize..5, 0..4).prop_flat_map(|dims| {
                let n = dims.iter().product::<usize>();
                (Just(dims), prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n))
            }),
            0..8,
        )
        .prop_map(|ts| {
            let mut a = TensorArchive::new();
            for (i, (dims, data)) in ts.into_iter().enumerate() {
                a.push(format!("t{i}.w"), dims, data).unwrap();
            }
            a
        })
    }

    fn bits(a: &TensorArchive) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        a.tensors
            .iter()
            .map(|t| (t.name.clone(), t.dims.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn round_trip_is_bit_exact(a in arb_archive()) {
            let mut buf = Vec::new();
            a.write_to(&mut buf).unwrap();
            let b = TensorArchive::read_from(&buf[..]).unwrap();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn rejects_corruption() {
        assert!(TensorArchive::read_from(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut a = TensorArchive::new();
        a.push("x", vec![2, 2], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert!(TensorArchive::read_from(&buf[..buf.len() - 1]).is_err());
        buf[4] = 9;
        assert!(TensorArchive::read_from(&buf[..]).is_err());
        assert!(a.push("x", vec![1], vec![0.0]).is_err());
        assert!(a.push("y", vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn module_round_trip_and_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: ConvBlock<f32> = ConvBlock::same(2, 3, &mut Init::Random(&mut rng));
        let mut b: ConvBlock<f32> = ConvBlock::same(2, 3, &mut Init::Random(&mut rng));
        let mut ar = TensorArchive::new();
        ar.add_module("blk", &a).unwrap();
        ar.load_module("blk", &mut b).unwrap();
        assert_eq!(a.named_params(), b.named_params());
        let mut wrong: ConvBlock<f32> = ConvBlock::same(2, 4, &mut Init::Random(&mut rng));
        assert!(ar.load_module("blk", &mut wrong).is_err());
        assert!(ar.load_module("other", &mut b).is_err());
    }
}
