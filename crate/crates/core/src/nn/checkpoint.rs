//! Versioned flat binary checkpoints.
//!
//! Layout: the magic bytes `PIFS1`, then for each named tensor until EOF:
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and
//! `numel × f64` values, all little-endian.

use std::path::Path;

use super::{ConvBlock, CosineClassifier, FeatureExtractor, NormLayer, NormMode, SegModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PIFS1";

pub fn encode_tensors(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing PIFS1 magic".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint(format!("bad tensor name at byte {at}")))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

/// Every parameter and buffer of `model` as named tensors.
pub fn model_tensors(model: &SegModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, b) in model.extractor.blocks.iter().enumerate() {
        let p = format!("extractor.{i}");
        let n = &b.norm;
        out.push((format!("{p}.kernel"), b.kernel.clone()));
        out.push((format!("{p}.bias"), b.bias.clone()));
        out.push((format!("{p}.relu"), Tensor::scalar(b.relu as u8 as f64)));
        out.push((format!("{p}.norm.gamma"), n.gamma.clone()));
        out.push((format!("{p}.norm.beta"), n.beta.clone()));
        out.push((format!("{p}.norm.running_mean"), vec_tensor(&n.running_mean)));
        out.push((format!("{p}.norm.running_std"), vec_tensor(&n.running_std)));
        out.push((format!("{p}.norm.momentum"), Tensor::scalar(n.momentum)));
        out.push((format!("{p}.norm.renorm"), Tensor::scalar((n.mode == NormMode::BatchRenorm) as u8 as f64)));
        out.push((format!("{p}.norm.frozen"), Tensor::scalar(n.frozen as u8 as f64)));
        let clip = n.clip.map_or(vec![], |(r, d)| vec![r, d]);
        out.push((format!("{p}.norm.clip"), vec_tensor(&clip)));
    }
    let c = &model.classifier;
    out.push(("classifier.weight".into(), c.weight.clone()));
    out.push(("classifier.classes".into(), Tensor::from_vec(c.classes.iter().map(|&k| k as f64).collect())));
    out.push(("classifier.tau".into(), c.tau.clone()));
    out.push(("classifier.learn_tau".into(), Tensor::scalar(c.learn_tau as u8 as f64)));
    out
}

pub fn model_from_tensors(entries: Vec<(String, Tensor)>) -> Result<SegModel> {
    let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")));
    let mut blocks = Vec::new();
    for i in 0.. {
        let p = format!("extractor.{i}");
        let Ok(kernel) = take(&format!("{p}.kernel")) else { break };
        let flag = |t: Tensor| t.data().first().copied().unwrap_or(0.0) != 0.0;
        let bias = take(&format!("{p}.bias"))?;
        let relu = flag(take(&format!("{p}.relu"))?);
        let clip = take(&format!("{p}.norm.clip"))?;
        let norm = NormLayer {
            gamma: take(&format!("{p}.norm.gamma"))?,
            beta: take(&format!("{p}.norm.beta"))?,
            running_mean: take(&format!("{p}.norm.running_mean"))?.into_data(),
            running_std: take(&format!("{p}.norm.running_std"))?.into_data(),
            momentum: take(&format!("{p}.norm.momentum"))?.data()[0],
            mode: if flag(take(&format!("{p}.norm.renorm"))?) { NormMode::BatchRenorm } else { NormMode::BatchNorm },
            frozen: flag(take(&format!("{p}.norm.frozen"))?),
            clip: (clip.len() == 2).then(|| (clip.data()[0], clip.data()[1])),
        };
        blocks.push(ConvBlock { kernel, bias, norm, relu });
    }
    if blocks.is_empty() {
        return Err(Error::Checkpoint("no extractor blocks".into()));
    }
    let classifier = CosineClassifier {
        weight: take("classifier.weight")?,
        classes: take("classifier.classes")?.data().iter().map(|&v| v as u8).collect(),
        tau: take("classifier.tau")?,
        learn_tau: take("classifier.learn_tau")?.data()[0] != 0.0,
    };
    Ok(SegModel { extractor: FeatureExtractor { blocks }, classifier })
}

pub fn save_checkpoint(path: &Path, model: &SegModel) -> Result<()> {
    std::fs::write(path, encode_tensors(&model_tensors(model))).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_tensors(decode_tensors(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::rng::rng_for;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut m = SegModel::new(&ModelConfig::default(), vec![0, 3, 5], &mut rng_for(11, &[]));
        m.set_norm_mode(NormMode::BatchRenorm);
        m.freeze_norm_stats();
        m.extractor.blocks[1].norm.running_mean[2] = -0.123456789;
        let bytes = encode_tensors(&model_tensors(&m));
        assert!(bytes.starts_with(b"PIFS1"));
        let back = model_from_tensors(decode_tensors(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_tensors(&model_tensors(&back)), bytes);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let bytes = encode_tensors(&[("x".into(), Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(decode_tensors(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_tensors(b"PIFS0").is_err());
    }

    #[test]
    fn special_values_survive() {
        let t = Tensor::from_vec(vec![-0.0, f64::MIN_POSITIVE, 1e308, f64::EPSILON]);
        let back = decode_tensors(&encode_tensors(&[("v".into(), t.clone())])).unwrap();
        assert_eq!(back[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
