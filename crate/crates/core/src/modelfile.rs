//! Self-describing single-file model container.
//!
//! Layout (little-endian): magic `IRCM`, `u32` version, spec, precision,
//! provenance, input normalization, then `u32` tensor count followed by named
//! tensors. Strings are `u32` length + UTF-8; a tensor is name, dtype byte,
//! `u32` rank, `u64` dims and the raw elements.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cost::Precision;
use crate::dataset::Normalization;
use crate::error::{Error, Result};
use crate::quant::Observer;
use crate::quant::{QuantLayer, QuantModel, QuantParams, Requant};
use crate::tensor::Tensor;
use crate::zoo::{build_model, Model, ModelSpec, QatState, TemporalLayer};

pub const MAGIC: &[u8; 4] = b"IRCM";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_digest(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    /// Test session of the training fold, 0 when trained on everything.
    pub fold: u32,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Float(Model<f32>),
    Int8(QuantModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub provenance: Provenance,
    pub norm: Normalization,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
enum Data {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl Data {
    fn tag(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::I8(_) => 1,
            Data::I32(_) => 2,
            Data::F64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::I8(v) => v.len(),
            Data::I32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    data: Data,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

#[derive(Default)]
struct Tensors(BTreeMap<String, Entry>);

impl Tensors {
    fn put(&mut self, name: impl Into<String>, shape: &[usize], data: Data) {
        self.0.insert(
            name.into(),
            Entry {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    fn f32(&self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let e = self.get(name)?;
        match &e.data {
            Data::F32(v) if e.shape == shape => Tensor::from_vec(shape, v.clone()),
            Data::F32(_) => Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                e.shape
            ))),
            _ => Err(Error::Format(format!("tensor '{name}' is not f32"))),
        }
    }

    fn vec_i8(&self, name: &str) -> Result<(Vec<usize>, Vec<i8>)> {
        match self.get(name)? {
            Entry {
                shape,
                data: Data::I8(v),
            } => Ok((shape.clone(), v.clone())),
            _ => Err(Error::Format(format!("tensor '{name}' is not i8"))),
        }
    }

    fn vec_i32(&self, name: &str) -> Result<Vec<i32>> {
        match &self.get(name)?.data {
            Data::I32(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("tensor '{name}' is not i32"))),
        }
    }

    fn vec_f32(&self, name: &str) -> Result<Vec<f32>> {
        match &self.get(name)?.data {
            Data::F32(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("tensor '{name}' is not f32"))),
        }
    }

    fn vec_f64(&self, name: &str) -> Result<Vec<f64>> {
        match &self.get(name)?.data {
            Data::F64(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("tensor '{name}' is not f64"))),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        put_u32(out, self.0.len() as u32);
        for (name, e) in &self.0 {
            put_str(out, name);
            out.push(e.data.tag());
            put_u32(out, e.shape.len() as u32);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                Data::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::I8(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::I32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
    }

    fn decode(c: &mut Cursor) -> Result<Self> {
        let n = c.u32()?;
        let mut t = Tensors::default();
        for _ in 0..n {
            let name = c.string()?;
            let tag = c.take(1)?[0];
            let rank = c.u32()? as usize;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
            let bytes = |w: usize| {
                len.checked_mul(w)
                    .ok_or_else(|| Error::Format("overflow".into()))
            };
            let data = match tag {
                0 => Data::F32(
                    c.take(bytes(4)?)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
                        .collect(),
                ),
                1 => Data::I8(c.take(len)?.iter().map(|&b| b as i8).collect()),
                2 => Data::I32(
                    c.take(bytes(4)?)?
                        .chunks_exact(4)
                        .map(|b| i32::from_le_bytes(b.try_into().expect("4")))
                        .collect(),
                ),
                3 => Data::F64(
                    c.take(bytes(8)?)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
                        .collect(),
                ),
                _ => {
                    return Err(Error::Format(format!(
                        "tensor '{name}' has unknown dtype {tag}"
                    )))
                }
            };
            debug_assert_eq!(data.len(), len);
            t.put(name, &shape, data);
        }
        Ok(t)
    }
}

fn observer_data(o: &Observer) -> Data {
    Data::F64(vec![
        o.min,
        o.max,
        f64::from(u8::from(o.initialized)),
        o.momentum,
    ])
}

fn observer_from(t: &Tensors, name: &str) -> Result<Observer> {
    let v = t.vec_f64(name)?;
    if v.len() != 4 {
        return Err(Error::Format(format!("observer '{name}' needs 4 values")));
    }
    Ok(Observer {
        min: v[0],
        max: v[1],
        initialized: v[2] != 0.0,
        momentum: v[3],
    })
}

fn float_tensors(m: &Model<f32>) -> Tensors {
    let mut t = Tensors::default();
    for (name, p) in m
        .layers
        .named_params()
        .into_iter()
        .chain(m.layers.named_buffers())
    {
        t.put(name, p.shape(), Data::F32(p.data().to_vec()));
    }
    if let Some(q) = &m.qat {
        t.put("qat.input", &[4], observer_data(&q.input));
        for (i, o) in q.blocks.iter().enumerate() {
            t.put(format!("qat.block{i}"), &[4], observer_data(o));
        }
        if let Some(o) = &q.temporal {
            t.put("qat.temporal", &[4], observer_data(o));
        }
        if let Some(o) = &q.hidden {
            t.put("qat.hidden", &[4], observer_data(o));
        }
        t.put("qat.logits", &[4], observer_data(&q.logits));
    }
    t
}

fn float_model(spec: &ModelSpec, seed: u64, t: &Tensors) -> Result<Model<f32>> {
    let mut m = build_model::<f32>(spec, seed)?;
    for (i, b) in m.layers.blocks.iter_mut().enumerate() {
        if !t.0.contains_key(&format!("block{i}.bn.gamma")) {
            b.bn = None;
        }
    }
    let names: Vec<(String, Vec<usize>)> = m
        .layers
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape().to_vec()))
        .collect();
    for ((name, shape), p) in names.iter().zip(m.layers.params_mut()) {
        *p = t.f32(name, shape)?;
    }
    for (i, b) in m.layers.blocks.iter_mut().enumerate() {
        if let Some(bn) = &mut b.bn {
            let c = [bn.gamma.len()];
            bn.running_mean = t.f32(&format!("block{i}.bn.running_mean"), &c)?;
            bn.running_var = t.f32(&format!("block{i}.bn.running_var"), &c)?;
        }
    }
    if t.0.contains_key("qat.input") {
        let mut q = QatState::for_spec(spec);
        q.input = observer_from(t, "qat.input")?;
        for (i, o) in q.blocks.iter_mut().enumerate() {
            *o = observer_from(t, &format!("qat.block{i}"))?;
        }
        if let Some(o) = &mut q.temporal {
            *o = observer_from(t, "qat.temporal")?;
        }
        if let Some(o) = &mut q.hidden {
            *o = observer_from(t, "qat.hidden")?;
        }
        q.logits = observer_from(t, "qat.logits")?;
        m.qat = Some(q);
    }
    if t.0.contains_key("lstm.w_input") != matches!(m.layers.temporal, TemporalLayer::Lstm(_)) {
        return Err(Error::Format(
            "temporal layer does not match the spec".into(),
        ));
    }
    Ok(m)
}

fn qparams_data(q: &QuantParams) -> (Data, Data) {
    (
        Data::F32(vec![q.scale]),
        Data::I32(vec![q.zero_point, i32::from(q.symmetric)]),
    )
}

fn put_qparams(t: &mut Tensors, name: &str, q: &QuantParams) {
    let (s, z) = qparams_data(q);
    t.put(format!("{name}.scale"), &[1], s);
    t.put(format!("{name}.zero_point"), &[2], z);
}

fn qparams_from(t: &Tensors, name: &str) -> Result<QuantParams> {
    let s = t.vec_f32(&format!("{name}.scale"))?;
    let z = t.vec_i32(&format!("{name}.zero_point"))?;
    if s.len() != 1 || z.len() != 2 {
        return Err(Error::Format(format!(
            "malformed quantization parameters '{name}'"
        )));
    }
    let q = QuantParams {
        scale: s[0],
        zero_point: z[0],
        symmetric: z[1] != 0,
    };
    if !q.is_valid() {
        return Err(Error::Format(format!(
            "invalid quantization parameters '{name}'"
        )));
    }
    Ok(q)
}

fn put_layer(t: &mut Tensors, name: &str, l: &QuantLayer) {
    t.put(
        format!("{name}.weights"),
        &l.shape,
        Data::I8(l.weights.clone()),
    );
    t.put(
        format!("{name}.weight_scale"),
        &[1],
        Data::F32(vec![l.weight_scale]),
    );
    t.put(
        format!("{name}.bias"),
        &[l.bias.len()],
        Data::I32(l.bias.clone()),
    );
    put_qparams(t, &format!("{name}.input"), &l.input);
    put_qparams(t, &format!("{name}.output"), &l.output);
    t.put(
        format!("{name}.requant"),
        &[3],
        Data::I32(vec![
            l.requant.multiplier,
            l.requant.shift,
            i32::from(l.relu),
        ]),
    );
}

fn layer_from(t: &Tensors, name: &str) -> Result<QuantLayer> {
    let (shape, weights) = t.vec_i8(&format!("{name}.weights"))?;
    let ws = t.vec_f32(&format!("{name}.weight_scale"))?;
    let bias = t.vec_i32(&format!("{name}.bias"))?;
    let rq = t.vec_i32(&format!("{name}.requant"))?;
    if ws.len() != 1 || rq.len() != 3 || shape.len() < 2 || bias.len() != shape[shape.len() - 1] {
        return Err(Error::Format(format!("malformed layer '{name}'")));
    }
    if !(1 << 30..=i32::MAX).contains(&rq[0]) || !(0..=100).contains(&rq[1]) {
        return Err(Error::Format(format!("invalid requantization in '{name}'")));
    }
    Ok(QuantLayer {
        shape,
        weights,
        weight_scale: ws[0],
        bias,
        input: qparams_from(t, &format!("{name}.input"))?,
        output: qparams_from(t, &format!("{name}.output"))?,
        requant: Requant {
            multiplier: rq[0],
            shift: rq[1],
        },
        relu: rq[2] != 0,
    })
}

fn int_tensors(q: &QuantModel) -> Tensors {
    let mut t = Tensors::default();
    put_qparams(&mut t, "input", &q.input);
    for (i, l) in q.blocks.iter().enumerate() {
        put_layer(&mut t, &format!("block{i}"), l);
    }
    if let Some(l) = &q.tcn {
        put_layer(&mut t, "tcn", l);
    }
    if let Some(l) = &q.hidden {
        put_layer(&mut t, "hidden", l);
    }
    put_layer(&mut t, "output", &q.output);
    t
}

fn int_model(spec: &ModelSpec, t: &Tensors) -> Result<QuantModel> {
    let ex = spec.extractor();
    let blocks = (0..ex.convs.len())
        .map(|i| layer_from(t, &format!("block{i}")))
        .collect::<Result<Vec<_>>>()?;
    // shapes must agree with what the spec would build
    let reference = build_model::<f32>(spec, 0)?;
    for (b, r) in blocks.iter().zip(&reference.layers.blocks) {
        if b.shape != r.conv.kernel.shape() {
            return Err(Error::Format("conv shape does not match the spec".into()));
        }
    }
    let tcn = match &reference.layers.temporal {
        TemporalLayer::Tcn(_) => Some(layer_from(t, "tcn")?),
        TemporalLayer::Lstm(_) => return Err(Error::QuantUnsupported(spec.family.to_string())),
        _ => None,
    };
    let hidden = match reference.layers.hidden {
        Some(_) => Some(layer_from(t, "hidden")?),
        None => None,
    };
    let output = layer_from(t, "output")?;
    if output.shape != reference.layers.output.weight.shape() {
        return Err(Error::Format("output shape does not match the spec".into()));
    }
    Ok(QuantModel {
        spec: spec.clone(),
        input: qparams_from(t, "input")?,
        blocks,
        pool_after_first: ex.pool,
        tcn,
        hidden,
        output,
    })
}

impl ModelFile {
    pub fn spec(&self) -> &ModelSpec {
        match &self.payload {
            Payload::Float(m) => &m.spec,
            Payload::Int8(q) => &q.spec,
        }
    }

    pub fn precision(&self) -> Precision {
        match self.payload {
            Payload::Float(_) => Precision::Float,
            Payload::Int8(_) => Precision::Int8,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.spec().render());
        put_str(&mut out, self.precision().name());
        out.extend_from_slice(&self.provenance.seed.to_le_bytes());
        put_u32(&mut out, self.provenance.fold);
        put_str(&mut out, &self.provenance.config_digest);
        out.extend_from_slice(&self.norm.mean.to_le_bytes());
        out.extend_from_slice(&self.norm.std.to_le_bytes());
        match &self.payload {
            Payload::Float(m) => float_tensors(m),
            Payload::Int8(q) => int_tensors(q),
        }
        .encode(&mut out);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let spec = ModelSpec::parse(&c.string()?)?;
        let precision: Precision = c.string()?.parse()?;
        let provenance = Provenance {
            seed: c.u64()?,
            fold: c.u32()?,
            config_digest: c.string()?,
        };
        let norm = Normalization {
            mean: c.f64()?,
            std: c.f64()?,
        };
        let tensors = Tensors::decode(&mut c)?;
        if c.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                buf.len() - c.pos
            )));
        }
        let payload = match precision {
            Precision::Float => Payload::Float(float_model(&spec, provenance.seed, &tensors)?),
            Precision::Int8 => Payload::Int8(int_model(&spec, &tensors)?),
        };
        Ok(Self {
            provenance,
            norm,
            payload,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(spec: &str) -> ModelFile {
        let spec = ModelSpec::parse(spec).unwrap();
        ModelFile {
            provenance: Provenance {
                seed: 9,
                fold: 3,
                config_digest: config_digest("x"),
            },
            norm: Normalization {
                mean: 21.5,
                std: 1.25,
            },
            payload: Payload::Float(build_model(&spec, 9).unwrap()),
        }
    }

    #[test]
    fn float_round_trip() {
        for s in [
            "sf:w1:C8-P-C16-FC64-FC",
            "lstm:w3:C4-P-L8-FC",
            "tcn:w3:C4-T8-FC",
        ] {
            let f = file(s);
            assert_eq!(ModelFile::from_bytes(&f.to_bytes()).unwrap(), f);
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = file("sf:w1:C4-FC").to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::Format(_))));
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
