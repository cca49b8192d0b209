//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! "BLNS" | u32 version (1) | u32 tensor count
//! per tensor: u16 name length | name bytes (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! Tensors appear in network layer order: trainable parameters followed, for
//! every batch-norm layer, by `running_mean`, `running_var` and a one-element
//! `num_batches_tracked`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::{ModelSpec, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BLNS";
pub const VERSION: u32 = 1;

fn state_tensors(net: &Network) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let bn_state = |out: &mut Vec<(String, Tensor)>, bn: &crate::batchnorm::BatchNormLayer| -> Result<()> {
        out.push((format!("{}.gamma", bn.name), bn.gamma.clone()));
        out.push((format!("{}.beta", bn.name), bn.beta.clone()));
        out.push((format!("{}.running_mean", bn.name), bn.running_mean.clone()));
        out.push((format!("{}.running_var", bn.name), bn.running_var.clone()));
        out.push((
            format!("{}.num_batches_tracked", bn.name),
            Tensor::from_vec(&[1], vec![bn.num_batches_tracked as f32])?,
        ));
        Ok(())
    };
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                out.push((format!("{}.weight", c.name), c.weight.clone()));
                if let Some(b) = &c.bias {
                    out.push((format!("{}.bias", c.name), b.clone()));
                }
            }
            Layer::BatchNorm(bn) => bn_state(&mut out, bn)?,
            Layer::Residual(b) => {
                out.push((format!("{}.weight", b.conv1.name), b.conv1.weight.clone()));
                bn_state(&mut out, &b.bn1)?;
                out.push((format!("{}.weight", b.conv2.name), b.conv2.weight.clone()));
                bn_state(&mut out, &b.bn2)?;
            }
            Layer::Fc(fc) => {
                out.push((format!("{}.weight", fc.name), fc.weight.clone()));
                out.push((format!("{}.bias", fc.name), fc.bias.clone()));
            }
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => {}
        }
    }
    Ok(out)
}

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let tensors = state_tensors(net)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.dims().len() as u8);
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses the tensor list without interpreting it.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Rebuilds a network of architecture `spec` from checkpoint bytes.
pub fn restore(bytes: &[u8], spec: &ModelSpec) -> Result<Network> {
    let tensors = decode(bytes)?;
    let mut net = Network::build(spec, &mut Rng::new(0))?;
    let expected = state_tensors(&net)?;
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "spec '{}' has {} state tensors, checkpoint has {}",
            spec.name,
            expected.len(),
            tensors.len()
        )));
    }
    for ((want, shape), (got, t)) in expected.iter().zip(&tensors) {
        if want != got || shape.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: spec expects {want} {:?}, checkpoint has {got} {:?}",
                shape.dims(),
                t.dims()
            )));
        }
    }
    let mut values = tensors.into_iter().map(|(_, t)| t);
    let mut next = || values.next().expect("count checked");
    let load_bn = |bn: &mut crate::batchnorm::BatchNormLayer, next: &mut dyn FnMut() -> Tensor| {
        bn.gamma = next();
        bn.beta = next();
        bn.running_mean = next();
        bn.running_var = next();
        bn.num_batches_tracked = next().data()[0] as u64;
    };
    for layer in &mut net.layers {
        match layer {
            Layer::Conv(c) => {
                c.weight = next();
                if c.bias.is_some() {
                    c.bias = Some(next());
                }
            }
            Layer::BatchNorm(bn) => load_bn(bn, &mut next),
            Layer::Residual(b) => {
                b.conv1.weight = next();
                load_bn(&mut b.bn1, &mut next);
                b.conv2.weight = next();
                load_bn(&mut b.bn2, &mut next);
            }
            Layer::Fc(fc) => {
                fc.weight = next();
                fc.bias = next();
            }
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => {}
        }
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&bytes, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batchnorm::BnMode;

    fn trained_toy() -> Network {
        let spec = ModelSpec::named("toy-6", 4, Some([3, 6, 6])).unwrap();
        let mut rng = Rng::new(9);
        let mut net = Network::build(&spec, &mut rng).unwrap();
        let x = Tensor::from_vec(&[4, 3, 6, 6], (0..432).map(|_| rng.next_gaussian() as f32).collect()).unwrap();
        net.forward(&x, BnMode::Train).unwrap();
        net
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&trained_toy()).unwrap();
        assert_eq!(&bytes[..4], b"BLNS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        // toy-6: 5 convs, 5 batch norms with 5 tensors each, fc weight and bias
        assert_eq!(count, 5 + 5 * 5 + 2);
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"stem.conv.weight");
        assert_eq!(bytes[14 + name_len], 4);
    }

    #[test]
    fn roundtrip_is_exact() {
        let net = trained_toy();
        let bytes = encode(&net).unwrap();
        let back = restore(&bytes, &net.spec).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_spec_is_rejected() {
        let net = trained_toy();
        let bytes = encode(&net).unwrap();
        let other = ModelSpec::named("toy-6", 5, Some([3, 6, 6])).unwrap();
        assert!(matches!(restore(&bytes, &other), Err(Error::Checkpoint(m)) if m.contains("shape mismatch")));
        let deeper = ModelSpec::named("cifar-8", 4, None).unwrap();
        assert!(restore(&bytes, &deeper).is_err());
    }

    #[test]
    fn corrupt_headers() {
        let mut bytes = encode(&trained_toy()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }
}
