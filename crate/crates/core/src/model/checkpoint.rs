//! Tensor container: a text header of `key=value` lines and tensor
//! declarations, a `---` line, then little-endian payloads in declared order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::tensor::Mat;
use super::{DecoderConfig, EncoderConfig, Parameters};
use crate::error::{Error, Result};

pub const MAGIC: &str = "WASMREV-TENSORS 1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(|s| s.as_str()).ok_or_else(|| Error::Container(format!("missing header key {key}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Container(format!("bad value for {key}: {raw}")))
    }

    pub fn push_f32(&mut self, name: impl Into<String>, m: &Mat<f32>) {
        self.tensors.push(Tensor { name: name.into(), rows: m.rows, cols: m.cols, data: TensorData::F32(m.data.clone()) });
    }

    pub fn push_i32(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<i32>) {
        assert_eq!(rows * cols, data.len());
        self.tensors.push(Tensor { name: name.into(), rows, cols, data: TensorData::I32(data) });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn f32_mat(&self, name: &str) -> Result<Mat<f32>> {
        let t = self.tensor(name)?;
        match &t.data {
            TensorData::F32(v) => Ok(Mat::from_vec(t.rows, t.cols, v.clone())),
            _ => Err(Error::Container(format!("tensor {name} is not f32"))),
        }
    }

    pub fn i32_data(&self, name: &str) -> Result<&[i32]> {
        match &self.tensor(name)?.data {
            TensorData::I32(v) => Ok(v),
            _ => Err(Error::Container(format!("tensor {name} is not i32"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            header.push_str(&format!("tensor={} {} {}x{} {}\n", t.name, t.data.dtype(), t.rows, t.cols, offset));
            offset += 4 * t.data.len();
        }
        header.push_str("---\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Container(m.to_string());
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == "---" {
                break;
            }
            lines.push(line);
        }
        if lines.first() != Some(&MAGIC) {
            return Err(bad("not a tensor container"));
        }
        let payload = &bytes[pos..];
        let mut c = Container::default();
        for line in &lines[1..] {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(&format!("bad header line: {line}")))?;
            if k != "tensor" {
                c.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let parts: Vec<&str> = v.split(' ').collect();
            let [name, dtype, shape, offset] = parts[..] else {
                return Err(bad(&format!("bad tensor line: {line}")));
            };
            let (r, cl) = shape.split_once('x').ok_or_else(|| bad(&format!("bad shape: {shape}")))?;
            let rows: usize = r.parse().map_err(|_| bad("bad rows"))?;
            let cols: usize = cl.parse().map_err(|_| bad("bad cols"))?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let n = rows * cols;
            let raw = payload.get(offset..offset + 4 * n).ok_or_else(|| bad(&format!("tensor {name} truncated")))?;
            let words = raw.chunks_exact(4).map(|w| [w[0], w[1], w[2], w[3]]);
            let data = match dtype {
                "f32" => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                "i32" => TensorData::I32(words.map(i32::from_le_bytes).collect()),
                other => return Err(bad(&format!("unknown dtype {other}"))),
            };
            c.tensors.push(Tensor { name: name.to_string(), rows, cols, data });
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes parameters and their structural configuration.
pub fn params_to_container(params: &Parameters<f32>) -> Container {
    let mut c = Container::default();
    let e = &params.config;
    c.set("encoder.layers", e.layers);
    c.set("encoder.hidden", e.hidden);
    c.set("encoder.heads", e.heads);
    c.set("encoder.max_positions", e.max_positions);
    c.set("encoder.vocab_size", e.vocab_size);
    c.set("encoder.segments", e.segments);
    c.set("encoder.dropout", e.dropout);
    c.set("encoder.ffn_multiplier", e.ffn_multiplier);
    if let Some(cls) = &params.classifier {
        c.set("classifier.classes", cls.weight.cols);
    }
    if let Some(d) = &params.decoder {
        c.set("decoder.layers", d.config.layers);
        c.set("decoder.hidden", d.config.hidden);
        c.set("decoder.embed", d.config.embed);
        c.set("decoder.attention", d.config.attention);
        c.set("decoder.vocab_size", d.config.vocab_size);
    }
    params.visit(&mut |name, m| c.push_f32(name, m));
    c
}

pub fn params_from_container(c: &Container) -> Result<Parameters<f32>> {
    let config = EncoderConfig {
        layers: c.parse("encoder.layers")?,
        hidden: c.parse("encoder.hidden")?,
        heads: c.parse("encoder.heads")?,
        max_positions: c.parse("encoder.max_positions")?,
        vocab_size: c.parse("encoder.vocab_size")?,
        segments: c.parse("encoder.segments")?,
        dropout: c.parse("encoder.dropout")?,
        ffn_multiplier: c.parse("encoder.ffn_multiplier")?,
    };
    let mut p = Parameters::init(config, 0)?;
    if c.meta.contains_key("classifier.classes") {
        p = p.with_classifier(c.parse("classifier.classes")?, 0)?;
    }
    if c.meta.contains_key("decoder.layers") {
        let d = DecoderConfig {
            layers: c.parse("decoder.layers")?,
            hidden: c.parse("decoder.hidden")?,
            embed: c.parse("decoder.embed")?,
            attention: c.parse("decoder.attention")?,
            vocab_size: c.parse("decoder.vocab_size")?,
        };
        p = p.with_decoder(d, 0)?;
    }
    let mut err = None;
    p.visit_mut(&mut |name, m| {
        if err.is_some() {
            return;
        }
        match c.f32_mat(&name) {
            Ok(src) if src.shape() == m.shape() => *m = src,
            Ok(src) => err = Some(Error::ShapeMismatch { name, expected: m.shape(), found: src.shape() }),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(p),
    }
}

pub fn save_checkpoint(params: &Parameters<f32>, extra: &[(&str, String)], path: &Path) -> Result<()> {
    let mut c = params_to_container(params);
    for (k, v) in extra {
        c.set(*k, v);
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, Container)> {
    let c = Container::load(path)?;
    Ok((params_from_container(&c)?, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p: Parameters<f32> = Parameters::init(EncoderConfig::tiny(30), 9)
            .unwrap()
            .with_classifier(4, 1)
            .unwrap()
            .with_decoder(DecoderConfig::new(5, 11), 2)
            .unwrap();
        let c = params_to_container(&p);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let q = params_from_container(&back).unwrap();
        assert_eq!(p, q);
        assert_eq!(params_to_container(&q).to_bytes(), bytes);
    }

    #[test]
    fn integer_tensors_and_errors() {
        let mut c = Container::default();
        c.set("kind", "batch");
        c.push_i32("ids", 2, 2, vec![1, -2, 3, i32::MAX]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.i32_data("ids").unwrap(), &[1, -2, 3, i32::MAX]);
        assert!(back.f32_mat("ids").is_err());
        assert!(Container::from_bytes(b"nope\n---\n").is_err());
        let mut truncated = c.to_bytes();
        truncated.pop();
        assert!(Container::from_bytes(&truncated).is_err());
    }
}
