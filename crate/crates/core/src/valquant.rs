//! Additive quantization for values.
//!
//! A token `t ∈ ℝ^d` is encoded into `N_c` bits by a two-layer network and
//! decoded as `s·C`, the sum of the codebook rows whose bit is set. Encoder
//! and codebook are trained jointly with SGD through a per-bit two-class
//! Gumbel-softmax relaxation (hard bits forward, relaxed probabilities
//! backward).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{corrupt, invalid, Error, Result};
use crate::io::{put_f32s, put_u32, ByteReader};
use crate::linalg::{dot, mse_slices, Mat};

pub const VALUE_MAGIC: &[u8; 4] = b"CVQV";
pub const VALUE_FORMAT_VERSION: u32 = 1;

/// `N_c / d`.
pub fn avg_bit_value(n_codes: usize, d: usize) -> f64 {
    n_codes as f64 / d as f64
}

/// 16-bit-equivalent codebook footprint: `N_c · d · 2`.
pub fn value_codebook_bytes(n_codes: usize, d: usize) -> u64 {
    n_codes as u64 * d as u64 * 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueCodebook {
    rows: Mat,
}

impl ValueCodebook {
    pub fn new(rows: Mat) -> Result<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return invalid("value codebook needs at least one row and column");
        }
        Ok(Self { rows })
    }

    #[inline]
    pub fn n_codes(&self) -> usize {
        self.rows.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }
}

/// Binary codes for a sequence of tokens, one byte (0 or 1) per bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueCodes {
    n_codes: usize,
    tokens: usize,
    bits: Vec<u8>,
}

impl ValueCodes {
    pub fn new(n_codes: usize, tokens: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n_codes * tokens {
            return invalid(format!(
                "expected {} value bits, got {}",
                n_codes * tokens,
                bits.len()
            ));
        }
        if bits.iter().any(|b| *b > 1) {
            return invalid("value code bits must be 0 or 1");
        }
        Ok(Self {
            n_codes,
            tokens,
            bits,
        })
    }

    pub fn empty(n_codes: usize) -> Self {
        Self {
            n_codes,
            tokens: 0,
            bits: Vec::new(),
        }
    }

    #[inline]
    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    #[inline]
    pub fn token(&self, i: usize) -> &[u8] {
        &self.bits[i * self.n_codes..(i + 1) * self.n_codes]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn push_token(&mut self, bits: &[u8]) -> Result<()> {
        if bits.len() != self.n_codes || bits.iter().any(|b| *b > 1) {
            return invalid("value code width mismatch or non-binary entry");
        }
        self.bits.extend_from_slice(bits);
        self.tokens += 1;
        Ok(())
    }

    pub fn extend(&mut self, other: &ValueCodes) -> Result<()> {
        if other.n_codes != self.n_codes {
            return invalid("cannot concatenate value codes of different widths");
        }
        self.bits.extend_from_slice(&other.bits);
        self.tokens += other.tokens;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEncoder {
    /// `d × h`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `h × N_c`
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl ValueEncoder {
    pub fn new(w1: Mat, b1: Vec<f64>, w2: Mat, b2: Vec<f64>) -> Result<Self> {
        if w1.cols() != b1.len() || w2.rows() != w1.cols() || w2.cols() != b2.len() {
            return invalid(format!(
                "encoder shapes disagree: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            ));
        }
        if b1.iter().chain(&b2).any(|v| !v.is_finite()) {
            return invalid("encoder biases must be finite");
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// He-style random initialization.
    pub fn random(d: usize, hidden: usize, n_codes: usize, rng: &mut impl Rng) -> Self {
        let n1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        let w1 = (0..d * hidden).map(|_| n1.sample(rng)).collect();
        let w2 = (0..hidden * n_codes).map(|_| n2.sample(rng)).collect();
        Self {
            w1: Mat::new(d, hidden, w1).unwrap(),
            b1: vec![0.0; hidden],
            w2: Mat::new(hidden, n_codes, w2).unwrap(),
            b2: vec![0.0; n_codes],
        }
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.w1.rows()
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    #[inline]
    pub fn n_codes(&self) -> usize {
        self.w2.cols()
    }

    /// Pre-activation of the hidden layer and the output logits.
    fn forward_logits(&self, t: &[f64], pre: &mut [f64], hidden: &mut [f64], logits: &mut [f64]) {
        pre.copy_from_slice(&self.b1);
        for (k, &tk) in t.iter().enumerate() {
            if tk == 0.0 {
                continue;
            }
            for (p, &w) in pre.iter_mut().zip(self.w1.row(k)) {
                *p += tk * w;
            }
        }
        for (h, &p) in hidden.iter_mut().zip(pre.iter()) {
            *h = p.max(0.0);
        }
        logits.copy_from_slice(&self.b2);
        for (k, &hk) in hidden.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            for (z, &w) in logits.iter_mut().zip(self.w2.row(k)) {
                *z += hk * w;
            }
        }
    }

    pub fn logits(&self, t: &[f64]) -> Vec<f64> {
        let mut pre = vec![0.0; self.hidden()];
        let mut hidden = vec![0.0; self.hidden()];
        let mut logits = vec![0.0; self.n_codes()];
        self.forward_logits(t, &mut pre, &mut hidden, &mut logits);
        logits
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncodeMode {
    /// Deterministic: bit is set iff its logit is positive.
    Infer,
    /// Seeded Gumbel noise on each bit's two-class relaxation.
    Train { temperature: f64, seed: u64 },
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gumbel(rng: &mut impl Rng) -> f64 {
    // u in the open interval (0, 1)
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Encodes one token. Returns the hard bits and the relaxed per-bit
/// probability of the "1" class (`sigmoid(logit)` in infer mode).
pub fn encoder_forward(
    t: &[f64],
    enc: &ValueEncoder,
    mode: EncodeMode,
) -> Result<(Vec<u8>, Vec<f64>)> {
    if t.len() != enc.d() {
        return invalid(format!("token width {} != encoder d {}", t.len(), enc.d()));
    }
    let logits = enc.logits(t);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Training("non-finite encoder activations".into()));
    }
    match mode {
        EncodeMode::Infer => {
            let bits = logits.iter().map(|&z| u8::from(z > 0.0)).collect();
            let soft = logits.iter().map(|&z| sigmoid(z)).collect();
            Ok((bits, soft))
        }
        EncodeMode::Train { temperature, seed } => {
            if !(temperature > 0.0) {
                return invalid(format!("temperature must be positive, got {temperature}"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bits = Vec::with_capacity(logits.len());
            let mut soft = Vec::with_capacity(logits.len());
            for &z in &logits {
                let (p, b) = relaxed_bit(z, temperature, &mut rng);
                bits.push(b);
                soft.push(p);
            }
            Ok((bits, soft))
        }
    }
}

/// Two-class Gumbel-softmax over `(z, 0)`: returns the relaxed probability
/// of class "1" and the hard sample.
#[inline]
fn relaxed_bit(z: f64, temperature: f64, rng: &mut impl Rng) -> (f64, u8) {
    let margin = z + gumbel(rng) - gumbel(rng);
    (sigmoid(margin / temperature), u8::from(margin > 0.0))
}

/// `S · C`: per token, the sum of codebook rows whose bit is set.
pub fn decode_values(codes: &ValueCodes, cb: &ValueCodebook) -> Result<Mat> {
    if codes.n_codes() != cb.n_codes() {
        return invalid(format!(
            "code width {} != codebook rows {}",
            codes.n_codes(),
            cb.n_codes()
        ));
    }
    let mut out = Mat::zeros(codes.tokens(), cb.d());
    for i in 0..codes.tokens() {
        decode_value_into(codes.token(i), cb, out.row_mut(i));
    }
    Ok(out)
}

fn decode_value_into(bits: &[u8], cb: &ValueCodebook, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, &b) in bits.iter().enumerate() {
        if b == 1 {
            for (o, &c) in out.iter_mut().zip(cb.rows.row(k)) {
                *o += c;
            }
        }
    }
}

/// Matching pursuit over codebook rows. Returns the code and the squared
/// residual norm after each accepted step (starting with `‖t‖²`).
pub fn greedy_encode_trace(t: &[f64], cb: &ValueCodebook) -> Result<(Vec<u8>, Vec<f64>)> {
    if t.len() != cb.d() {
        return invalid(format!("token width {} != codebook d {}", t.len(), cb.d()));
    }
    let norms: Vec<f64> = (0..cb.n_codes())
        .map(|k| dot(cb.rows.row(k), cb.rows.row(k)))
        .collect();
    let mut residual = t.to_vec();
    let mut bits = vec![0u8; cb.n_codes()];
    let mut trace = vec![dot(&residual, &residual)];
    loop {
        let mut best: Option<(f64, usize)> = None;
        for k in 0..cb.n_codes() {
            if bits[k] == 1 {
                continue;
            }
            let gain = 2.0 * dot(&residual, cb.rows.row(k)) - norms[k];
            if gain > 0.0 && best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, k));
            }
        }
        let Some((_, k)) = best else { break };
        bits[k] = 1;
        for (r, &c) in residual.iter_mut().zip(cb.rows.row(k)) {
            *r -= c;
        }
        trace.push(dot(&residual, &residual));
    }
    Ok((bits, trace))
}

pub fn greedy_encode(t: &[f64], cb: &ValueCodebook) -> Result<Vec<u8>> {
    greedy_encode_trace(t, cb).map(|(bits, _)| bits)
}

/// Trained encoder plus codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueQuantizer {
    pub encoder: ValueEncoder,
    pub codebook: ValueCodebook,
}

impl ValueQuantizer {
    pub fn new(encoder: ValueEncoder, codebook: ValueCodebook) -> Result<Self> {
        if encoder.d() != codebook.d() || encoder.n_codes() != codebook.n_codes() {
            return invalid(format!(
                "encoder (d={}, N_c={}) does not match codebook (d={}, N_c={})",
                encoder.d(),
                encoder.n_codes(),
                codebook.d(),
                codebook.n_codes()
            ));
        }
        Ok(Self { encoder, codebook })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.codebook.d()
    }

    #[inline]
    pub fn n_codes(&self) -> usize {
        self.codebook.n_codes()
    }

    pub fn avg_bit(&self) -> f64 {
        avg_bit_value(self.n_codes(), self.d())
    }

    pub fn encode_token(&self, t: &[f64]) -> Result<Vec<u8>> {
        encoder_forward(t, &self.encoder, EncodeMode::Infer).map(|(bits, _)| bits)
    }

    /// Infer-mode encoding of every row.
    pub fn encode(&self, values: &Mat) -> Result<ValueCodes> {
        if values.cols() != self.d() {
            return invalid(format!(
                "values have width {}, quantizer d is {}",
                values.cols(),
                self.d()
            ));
        }
        let mut bits = Vec::with_capacity(values.rows() * self.n_codes());
        for i in 0..values.rows() {
            bits.extend(self.encode_token(values.row(i))?);
        }
        ValueCodes::new(self.n_codes(), values.rows(), bits)
    }

    pub fn decode(&self, codes: &ValueCodes) -> Result<Mat> {
        decode_values(codes, &self.codebook)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let enc = &self.encoder;
        let mut buf = Vec::new();
        buf.extend_from_slice(VALUE_MAGIC);
        put_u32(&mut buf, VALUE_FORMAT_VERSION);
        put_u32(&mut buf, self.d() as u32);
        put_u32(&mut buf, enc.hidden() as u32);
        put_u32(&mut buf, self.n_codes() as u32);
        put_f32s(&mut buf, enc.w1.as_slice());
        put_f32s(&mut buf, &enc.b1);
        put_f32s(&mut buf, enc.w2.as_slice());
        put_f32s(&mut buf, &enc.b2);
        put_f32s(&mut buf, self.codebook.rows.as_slice());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(VALUE_MAGIC)?;
        let version = r.u32()?;
        if version != VALUE_FORMAT_VERSION {
            return corrupt(format!("unsupported value quantizer version {version}"));
        }
        let d = r.u32()? as usize;
        let h = r.u32()? as usize;
        let nc = r.u32()? as usize;
        if d == 0 || h == 0 || nc == 0 {
            return corrupt("value quantizer header has a zero dimension");
        }
        let to_corrupt = |e: Error| Error::Corrupt(e.to_string());
        let w1 = Mat::new(d, h, r.f32_vec(d * h)?).map_err(to_corrupt)?;
        let b1 = r.f32_vec(h)?;
        let w2 = Mat::new(h, nc, r.f32_vec(h * nc)?).map_err(to_corrupt)?;
        let b2 = r.f32_vec(nc)?;
        let rows = Mat::new(nc, d, r.f32_vec(nc * d)?).map_err(to_corrupt)?;
        r.finish()?;
        let encoder = ValueEncoder::new(w1, b1, w2, b2).map_err(to_corrupt)?;
        let codebook = ValueCodebook::new(rows).map_err(to_corrupt)?;
        Self::new(encoder, codebook).map_err(to_corrupt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub step_size: f64,
    pub gumbel_t_start: f64,
    pub gumbel_t_end: f64,
    pub seed: u64,
    /// Hidden width; `None` means `2 · N_c`.
    pub hidden: Option<usize>,
}

impl Default for ValTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 256,
            step_size: 1e-3,
            gumbel_t_start: 1.0,
            gumbel_t_end: 0.1,
            seed: 0,
            hidden: None,
        }
    }
}

impl ValTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return invalid(format!(
                "step_size must be positive, got {}",
                self.step_size
            ));
        }
        if !(self.gumbel_t_end > 0.0 && self.gumbel_t_start >= self.gumbel_t_end) {
            return invalid(format!(
                "temperatures must satisfy start >= end > 0, got {} -> {}",
                self.gumbel_t_start, self.gumbel_t_end
            ));
        }
        if self.batch == 0 {
            return invalid("batch must be >= 1");
        }
        if self.hidden == Some(0) {
            return invalid("hidden width must be >= 1");
        }
        Ok(())
    }

    fn temperature(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.gumbel_t_end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.gumbel_t_start + (self.gumbel_t_end - self.gumbel_t_start) * frac
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValTrainReport {
    /// Per-step minibatch MSE (per scalar) of the hard-bit reconstruction.
    pub loss_curve: Vec<f64>,
}

pub fn train_value_quantizer(
    calib: &Mat,
    n_codes: usize,
    cfg: &ValTrainConfig,
) -> Result<(ValueQuantizer, ValTrainReport)> {
    if n_codes == 0 {
        return invalid("n_codes must be >= 1");
    }
    if calib.rows() == 0 {
        return invalid("empty calibration set");
    }
    // rows drawn from the data, scaled by 2/N_c (about half the bits fire)
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let scale = 2.0 / n_codes as f64;
    let mut rows = Mat::zeros(n_codes, calib.cols());
    for k in 0..n_codes {
        let src = calib.row(rng.random_range(0..calib.rows()));
        for (o, &v) in rows.row_mut(k).iter_mut().zip(src) {
            *o = scale * v;
        }
    }
    train_value_quantizer_from(calib, ValueCodebook::new(rows)?, false, cfg)
}

/// SGD from a given initial codebook, optionally holding it fixed.
pub fn train_value_quantizer_from(
    calib: &Mat,
    codebook: ValueCodebook,
    freeze_codebook: bool,
    cfg: &ValTrainConfig,
) -> Result<(ValueQuantizer, ValTrainReport)> {
    cfg.validate()?;
    let (d, nc) = (codebook.d(), codebook.n_codes());
    if calib.cols() != d {
        return invalid(format!(
            "calibration width {} != codebook d {d}",
            calib.cols()
        ));
    }
    if calib.rows() < cfg.batch {
        return invalid(format!(
            "calibration has {} rows, fewer than the batch size {}",
            calib.rows(),
            cfg.batch
        ));
    }
    let h = cfg.hidden.unwrap_or(2 * nc);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = ValueEncoder::random(d, h, nc, &mut rng);
    let mut q = ValueQuantizer::new(encoder, codebook)?;
    let mut report = ValTrainReport {
        loss_curve: Vec::with_capacity(cfg.steps),
    };
    let mut grads = Grads::zeros(d, h, nc);
    let mut ws = Workspace::new(d, h, nc);
    let mut order: Vec<usize> = (0..calib.rows()).collect();
    let mut cursor = order.len();

    for step in 0..cfg.steps {
        let temp = cfg.temperature(step);
        grads.clear();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            let t = calib.row(order[cursor]);
            cursor += 1;
            loss += ws.accumulate(&q, t, temp, &mut rng, &mut grads, !freeze_codebook);
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv / d as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                checkpoint: Box::new(q),
            });
        }
        report.loss_curve.push(loss);
        grads.apply(&mut q, cfg.step_size * inv, !freeze_codebook);
    }
    Ok((q, report))
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

struct Grads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    cb: Vec<f64>,
}

impl Grads {
    fn zeros(d: usize, h: usize, nc: usize) -> Self {
        Self {
            w1: vec![0.0; d * h],
            b1: vec![0.0; h],
            w2: vec![0.0; h * nc],
            b2: vec![0.0; nc],
            cb: vec![0.0; nc * d],
        }
    }

    fn clear(&mut self) {
        for v in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.cb,
        ] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn all_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.cb]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn apply(&self, q: &mut ValueQuantizer, lr: f64, update_codebook: bool) {
        let step = |p: &mut [f64], g: &[f64]| {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        };
        step(q.encoder.w1.as_mut_slice(), &self.w1);
        step(&mut q.encoder.b1, &self.b1);
        step(q.encoder.w2.as_mut_slice(), &self.w2);
        step(&mut q.encoder.b2, &self.b2);
        if update_codebook {
            step(q.codebook.rows.as_mut_slice(), &self.cb);
        }
    }
}

struct Workspace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    soft: Vec<f64>,
    bits: Vec<u8>,
    recon: Vec<f64>,
    d_recon: Vec<f64>,
    d_logit: Vec<f64>,
    d_hidden: Vec<f64>,
}

impl Workspace {
    fn new(d: usize, h: usize, nc: usize) -> Self {
        Self {
            pre: vec![0.0; h],
            hidden: vec![0.0; h],
            logits: vec![0.0; nc],
            soft: vec![0.0; nc],
            bits: vec![0; nc],
            recon: vec![0.0; d],
            d_recon: vec![0.0; d],
            d_logit: vec![0.0; nc],
            d_hidden: vec![0.0; h],
        }
    }

    /// Forward and backward for one token; adds gradients of
    /// `‖t − s·C‖²` into `g` and returns the loss.
    fn accumulate(
        &mut self,
        q: &ValueQuantizer,
        t: &[f64],
        temp: f64,
        rng: &mut impl Rng,
        g: &mut Grads,
        codebook_grad: bool,
    ) -> f64 {
        let enc = &q.encoder;
        let cb = &q.codebook;
        let (d, nc) = (cb.d(), cb.n_codes());
        enc.forward_logits(t, &mut self.pre, &mut self.hidden, &mut self.logits);
        for k in 0..nc {
            let (p, b) = relaxed_bit(self.logits[k], temp, rng);
            self.soft[k] = p;
            self.bits[k] = b;
        }
        decode_value_into(&self.bits, cb, &mut self.recon);
        let mut loss = 0.0;
        for i in 0..d {
            let e = self.recon[i] - t[i];
            loss += e * e;
            self.d_recon[i] = 2.0 * e;
        }

        // Straight-through: dL/ds_k = d_recon · C_k, then through the
        // relaxed probability p_k = σ(margin / τ).
        for k in 0..nc {
            let row = cb.rows.row(k);
            let ds = dot(&self.d_recon, row);
            let p = self.soft[k];
            self.d_logit[k] = ds * p * (1.0 - p) / temp;
            if codebook_grad && self.bits[k] == 1 {
                let grow = &mut g.cb[k * d..(k + 1) * d];
                for (gv, &dr) in grow.iter_mut().zip(&self.d_recon) {
                    *gv += dr;
                }
            }
        }

        let h = enc.hidden();
        for (gb, &dz) in g.b2.iter_mut().zip(&self.d_logit) {
            *gb += dz;
        }
        for j in 0..h {
            let hj = self.hidden[j];
            let wrow = enc.w2.row(j);
            self.d_hidden[j] = if self.pre[j] > 0.0 {
                dot(wrow, &self.d_logit)
            } else {
                0.0
            };
            if hj != 0.0 {
                let grow = &mut g.w2[j * nc..(j + 1) * nc];
                for (gv, &dz) in grow.iter_mut().zip(&self.d_logit) {
                    *gv += hj * dz;
                }
            }
        }
        for (gb, &dh) in g.b1.iter_mut().zip(&self.d_hidden) {
            *gb += dh;
        }
        for (i, &ti) in t.iter().enumerate() {
            if ti == 0.0 {
                continue;
            }
            let grow = &mut g.w1[i * h..(i + 1) * h];
            for (gv, &dh) in grow.iter_mut().zip(&self.d_hidden) {
                *gv += ti * dh;
            }
        }
        loss
    }
}

/// Reconstruction MSE per scalar of `values` through the quantizer.
pub fn quantizer_mse(q: &ValueQuantizer, values: &Mat) -> Result<f64> {
    let recon = q.decode(&q.encode(values)?)?;
    Ok(mse_slices(values.as_slice(), recon.as_slice()))
}
