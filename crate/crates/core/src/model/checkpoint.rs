//! `TSAM` checkpoints: magic, `u32` version, `u32`-length-prefixed config
//! text, `u32` tensor count, then each tensor as `u32` rank, `u32` dims and
//! little-endian `f32` values. Parameters come first in build order,
//! followed by the mean and variance of every batch-norm layer.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSAM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_model<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, rejecting it unless its config equals `expected` (when given).
pub fn load_model<S: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(want) = expected {
        if model.config() != want {
            return Err(Error::Config(format!(
                "{}: checkpoint config differs from the requested model",
                path.display()
            )));
        }
    }
    Ok(model)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, shape: &[usize], data: impl Iterator<Item = f32>) {
    put_u32(buf, shape.len());
    shape.iter().for_each(|&d| put_u32(buf, d));
    data.for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
}

fn encode<S: Scalar>(m: &Model<S>) -> Vec<u8> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    let text = m.config.to_text();
    put_u32(&mut buf, text.len());
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, m.params.len() + 2 * m.running.len());
    let f = |v: &S| v.to_f32().expect("finite parameter");
    for p in &m.params {
        put_tensor(&mut buf, p.shape(), p.data().iter().map(f));
    }
    for r in &m.running {
        put_tensor(&mut buf, &[r.mean.len()], r.mean.iter().map(f));
        put_tensor(&mut buf, &[r.var.len()], r.var.iter().map(f));
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor<S: Scalar>(&mut self, want: &[usize]) -> Result<Vec<S>> {
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        if shape != want {
            return Err(Error::Config(format!(
                "checkpoint tensor shape {shape:?} does not match model shape {want:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

fn decode<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("bad magic bytes, expected TSAM".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text)?;
    let mut model = Model::<S>::new(config, 0)?;
    let count = r.u32()?;
    if count != model.params.len() + 2 * model.running.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {count} tensors, model needs {}",
            model.params.len() + 2 * model.running.len()
        )));
    }
    for p in model.params.iter_mut() {
        let data = r.tensor(p.shape())?;
        *p = Tensor::new(p.shape().to_vec(), data)?;
    }
    for s in model.running.iter_mut() {
        s.mean = r.tensor(&[s.mean.len()])?;
        s.var = r.tensor(&[s.var.len()])?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(name: &str) -> ModelConfig {
        let mut c = ModelConfig::preset(name, 3).unwrap();
        c.block_channels = vec![2, 2, 3, 3];
        c.fc_hidden = 4;
        c.input_bands = 16;
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsam");
        let mut m = Model::<f32>::new(tiny("TS-CNN10"), 5).unwrap();
        m.running[0].mean[1] = 0.123;
        m.params[m.blocks[0].attention.unwrap().logits.unwrap()].data_mut()[2] = -0.7;
        save_model(&m, &p).unwrap();
        let back: Model<f32> = load_model(&p, Some(m.config())).unwrap();
        assert_eq!(back, m);
        let x = Tensor::full(vec![20, 16, 1], 0.25f32);
        assert_eq!(back.forward_eval(&x).unwrap(), m.forward_eval(&x).unwrap());
    }

    #[test]
    fn fixed_variant_reports_constant_after_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsam");
        save_model(&Model::<f32>::new(tiny("TS-CNN10-fixed"), 1).unwrap(), &p).unwrap();
        let m: Model<f32> = load_model(&p, None).unwrap();
        assert!(m.attention_coefficients().iter().all(|(_, c)| *c == [0.33f32; 3]));
    }

    #[test]
    fn guards() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsam");
        let m = Model::<f32>::new(tiny("CNN10"), 1).unwrap();
        save_model(&m, &p).unwrap();
        assert!(matches!(
            load_model::<f32>(&p, Some(&tiny("T-CNN10"))),
            Err(Error::Config(_))
        ));
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_model::<f32>(&p, None), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(load_model::<f32>(&p, None).is_err());

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(load_model::<f32>(&p, None).is_err());
    }
}
