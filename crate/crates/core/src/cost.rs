//! Parameter, MAC and serialized-size counting from an architecture alone.
//!
//! Conventions: BatchNorm counts 2 parameters per channel before folding and is
//! dropped from sizes; MACs cover conv, FC, LSTM matrix products and the TCN
//! layer only. Majority voting stores one per-frame net but runs it W times.

use std::fmt;

use crate::error::{Error, Result};
use crate::zoo::{Family, ModelSpec, TemporalSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Float,
    Int8,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Float => "float",
            Precision::Int8 => "int8",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" | "f32" => Ok(Precision::Float),
            "int8" | "i8" => Ok(Precision::Int8),
            _ => Err(Error::Invalid(format!("unknown precision '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub size_bytes: u64,
}

/// Per-layer tallies, shared by every counter.
#[derive(Default)]
struct Tally {
    weights: u64,
    biases: u64,
    bn: u64,
    weight_tensors: u64,
    /// MACs of one pass of the per-frame extractor.
    extractor_macs: u64,
    /// MACs outside the extractor.
    head_macs: u64,
}

fn tally(spec: &ModelSpec) -> Tally {
    let mut t = Tally::default();
    let ex = spec.extractor();
    let (mut h, mut w, mut c) = (8u64, 8u64, spec.input_channels() as u64);
    for (i, &cout) in ex.convs.iter().enumerate() {
        let cout = cout as u64;
        h -= 2;
        w -= 2;
        t.weights += 9 * c * cout;
        t.biases += cout;
        t.bn += 2 * cout;
        t.weight_tensors += 1;
        t.extractor_macs += h * w * cout * 9 * c;
        c = cout;
        if i == 0 && ex.pool {
            h /= 2;
            w /= 2;
        }
    }
    let feat = ex.feature_len() as u64;
    let win = spec.window as u64;
    match spec.temporal() {
        TemporalSpec::None | TemporalSpec::Cat => {}
        TemporalSpec::Lstm(hid) => {
            let hid = hid as u64;
            t.weights += 4 * hid * (feat + hid);
            t.biases += 4 * hid;
            t.weight_tensors += 2;
            t.head_macs += win * 4 * hid * (feat + hid);
        }
        TemporalSpec::Tcn(ch) => {
            let ch = ch as u64;
            t.weights += 3 * feat * ch;
            t.biases += ch;
            t.weight_tensors += 1;
            t.head_macs += win * ch * 3 * feat;
        }
    }
    let mut n_in = spec.head_inputs() as u64;
    if let Some(units) = spec.hidden_units() {
        let units = units as u64;
        t.weights += n_in * units;
        t.biases += units;
        t.weight_tensors += 1;
        t.head_macs += n_in * units;
        n_in = units;
    }
    let k = spec.classes as u64;
    t.weights += n_in * k;
    t.biases += k;
    t.weight_tensors += 1;
    t.head_macs += n_in * k;
    t
}

/// Trainable parameters, BatchNorm included.
pub fn count_params(spec: &ModelSpec) -> u64 {
    let t = tally(spec);
    t.weights + t.biases + t.bn
}

/// Parameters after BatchNorm folding.
pub fn count_folded_params(spec: &ModelSpec) -> u64 {
    let t = tally(spec);
    t.weights + t.biases
}

/// Multiply-accumulates for one prediction.
pub fn count_macs(spec: &ModelSpec) -> u64 {
    let t = tally(spec);
    match spec.family {
        Family::Sf | Family::Mc => t.extractor_macs + t.head_macs,
        Family::Mv => spec.window as u64 * (t.extractor_macs + t.head_macs),
        Family::Cat | Family::Lstm | Family::Tcn => {
            spec.window as u64 * t.extractor_macs + t.head_macs
        }
    }
}

/// Serialized size of the folded model.
///
/// Float stores every parameter in 4 bytes. Int8 stores weights in 1 byte, biases
/// as int32 and one 4-byte scale plus one 4-byte zero point per weight tensor.
pub fn size_bytes(spec: &ModelSpec, precision: Precision) -> Result<u64> {
    let t = tally(spec);
    match precision {
        Precision::Float => Ok(4 * (t.weights + t.biases)),
        Precision::Int8 if !spec.family.supports_int8() => {
            Err(Error::QuantUnsupported(spec.family.to_string()))
        }
        Precision::Int8 => Ok(t.weights + 4 * t.biases + 8 * t.weight_tensors),
    }
}

pub fn cost_report(spec: &ModelSpec, precision: Precision) -> Result<CostReport> {
    Ok(CostReport {
        params: count_params(spec),
        macs: count_macs(spec),
        size_bytes: size_bytes(spec, precision)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> ModelSpec {
        ModelSpec::parse(s).unwrap()
    }

    #[test]
    fn smallest_single_frame() {
        let s = spec("sf:w1:C8-P-FC");
        assert_eq!(count_params(&s), 80 + 16 + 292);
        assert_eq!(count_macs(&s), 2592 + 288);
        assert_eq!(size_bytes(&s, Precision::Float).unwrap(), 1488);
    }

    #[test]
    fn voting_identities() {
        let sf = spec("sf:w1:C8-P-C8-FC64-FC");
        let mv = spec("mv:w5:C8-P-C8-FC64-FC");
        assert_eq!(count_params(&mv), count_params(&sf));
        assert_eq!(count_macs(&mv), 5 * count_macs(&sf));
        assert_eq!(count_macs(&mv), 19680);
    }

    #[test]
    fn lstm_has_no_int8_size() {
        assert!(size_bytes(&spec("lstm:w3:C8-P-C8-L16-FC"), Precision::Int8).is_err());
    }
}
