//! Per-token asymmetric scalar quantization and the MSE comparison table.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::keyquant::{decode_keys, encode_keys, KeyCodebook};
use crate::linalg::{mse, Mat};
use crate::valquant::ValueQuantizer;

pub const MAX_ASYM_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymParams {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: f64,
}

impl AsymParams {
    fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Min/max affine quantization of one token with round-half-to-even.
/// A constant vector gets `scale = 1` and all-zero codes.
pub fn asym_quantize(t: &[f64], bits: u32) -> Result<(Vec<u32>, AsymParams)> {
    if t.is_empty() {
        return invalid("cannot quantize an empty vector");
    }
    if !(1..=MAX_ASYM_BITS).contains(&bits) {
        return invalid(format!("bits must lie in 1..={MAX_ASYM_BITS}, got {bits}"));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return invalid("vector contains non-finite values");
    }
    let min = t.iter().copied().fold(f64::INFINITY, f64::min);
    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = ((1u32 << bits) - 1) as f64;
    if max == min {
        let params = AsymParams {
            bits,
            scale: 1.0,
            zero_point: min,
        };
        return Ok((vec![0; t.len()], params));
    }
    let scale = (max - min) / levels;
    let codes = t
        .iter()
        .map(|v| ((v - min) / scale).round_ties_even().clamp(0.0, levels) as u32)
        .collect();
    Ok((
        codes,
        AsymParams {
            bits,
            scale,
            zero_point: min,
        },
    ))
}

pub fn asym_dequantize(codes: &[u32], params: &AsymParams) -> Result<Vec<f64>> {
    if let Some(c) = codes.iter().find(|c| **c > params.max_code()) {
        return invalid(format!(
            "code {c} exceeds {} for {} bits",
            params.max_code(),
            params.bits
        ));
    }
    Ok(codes
        .iter()
        .map(|&c| f64::from(c) * params.scale + params.zero_point)
        .collect())
}

/// Row-by-row quantize/dequantize.
pub fn asym_roundtrip(data: &Mat, bits: u32) -> Result<Mat> {
    let mut out = Mat::zeros(data.rows(), data.cols());
    for i in 0..data.rows() {
        let (codes, params) = asym_quantize(data.row(i), bits)?;
        out.row_mut(i)
            .copy_from_slice(&asym_dequantize(&codes, &params)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Identity,
    Asym { bits: u32 },
    CommVqValue(&'a ValueQuantizer),
    CommVqKey(&'a KeyCodebook),
}

impl Method<'_> {
    pub fn label(&self) -> String {
        match self {
            Method::Identity => "identity".into(),
            Method::Asym { bits } => format!("asym-{bits}bit"),
            Method::CommVqValue(_) => "commvq-value".into(),
            Method::CommVqKey(_) => "commvq-key".into(),
        }
    }

    /// Nominal bits per scalar; per-token scale and zero point are not
    /// counted for the asymmetric baseline.
    pub fn avg_bit(&self) -> f64 {
        match self {
            Method::Identity => 16.0,
            Method::Asym { bits } => f64::from(*bits),
            Method::CommVqValue(q) => q.avg_bit(),
            Method::CommVqKey(cb) => cb.config().avg_bit(),
        }
    }

    pub fn reconstruct(&self, data: &Mat) -> Result<Mat> {
        match self {
            Method::Identity => Ok(data.clone()),
            Method::Asym { bits } => asym_roundtrip(data, *bits),
            Method::CommVqValue(q) => q.decode(&q.encode(data)?),
            Method::CommVqKey(cb) => decode_keys(&encode_keys(data, cb)?, cb),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub method: String,
    pub avg_bit: f64,
    pub mse: f64,
}

/// One row per method, sorted by `avg_bit` descending then `mse` ascending.
pub fn mse_report(data: &Mat, methods: &[Method]) -> Result<Vec<MseRow>> {
    if data.rows() == 0 {
        return invalid("mse report over empty data");
    }
    let mut rows = methods
        .iter()
        .map(|m| {
            let recon = m.reconstruct(data)?;
            Ok(MseRow {
                method: m.label(),
                avg_bit: m.avg_bit(),
                mse: mse(data, &recon)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.avg_bit
            .total_cmp(&a.avg_bit)
            .then(a.mse.total_cmp(&b.mse))
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(rows)
}

pub fn report_csv(rows: &[MseRow]) -> String {
    let mut out = String::from("method,avg_bit,mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.method, r.avg_bit, r.mse));
    }
    out
}

pub fn report_json_lines(rows: &[MseRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}
