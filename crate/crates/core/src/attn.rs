//! Single-step decode attention over full-precision and quantized caches.
//!
//! Multiplies are the only counted operations. Additions, `exp`, and the
//! precomputed cos/sin tables are free.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::keyquant::{decode_keys, KeyCodebook, KeyCodes};
use crate::linalg::Mat;
use crate::rope::{RopeParams, RopeTable};
use crate::valquant::{ValueCodebook, ValueCodes};

#[derive(Clone, Copy, Debug)]
pub struct AttnInput<'a> {
    /// Query before RoPE.
    pub q: &'a [f64],
    /// Query position; must satisfy `t >= N - 1`.
    pub t: usize,
    pub key_codes: &'a KeyCodes,
    pub value_codes: &'a ValueCodes,
    pub key_codebook: &'a KeyCodebook,
    pub value_codebook: &'a ValueCodebook,
    pub rope: &'a RopeParams,
}

impl AttnInput<'_> {
    pub fn tokens(&self) -> usize {
        self.key_codes.tokens()
    }

    pub fn d(&self) -> usize {
        self.q.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.q.len();
        let kcfg = self.key_codebook.config();
        if d == 0 || kcfg.d != d || self.value_codebook.d() != d || self.rope.d() != d {
            return invalid(format!(
                "dimension mismatch: q {d}, key codebook {}, value codebook {}, rope {}",
                kcfg.d,
                self.value_codebook.d(),
                self.rope.d()
            ));
        }
        let n = self.key_codes.tokens();
        if n == 0 {
            return invalid("attention over an empty cache");
        }
        if self.value_codes.tokens() != n {
            return invalid(format!(
                "{n} key tokens but {} value tokens",
                self.value_codes.tokens()
            ));
        }
        if self.value_codes.n_codes() != self.value_codebook.n_codes() {
            return invalid(format!(
                "value codes have {} bits, codebook has {} rows",
                self.value_codes.n_codes(),
                self.value_codebook.n_codes()
            ));
        }
        self.key_codes.check_config(kcfg)?;
        if self.t + 1 < n {
            return invalid(format!(
                "query position {} precedes cached token {}",
                self.t,
                n - 1
            ));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return invalid("query contains non-finite values");
        }
        Ok(())
    }

    fn table(&self) -> RopeTable {
        RopeTable::new(self.rope, self.t.max(self.tokens() - 1) + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub pathway: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub d: u64,
    #[serde(rename = "N_c")]
    pub n_c: u64,
    #[serde(rename = "R")]
    pub r: u64,
    #[serde(rename = "N_cprime")]
    pub n_cprime: u64,
    pub predicted_mults: u64,
    pub measured_mults: u64,
}

impl FlopReport {
    pub fn ratio(&self) -> f64 {
        self.measured_mults as f64 / self.predicted_mults as f64
    }
}

/// `(2d + 1)·N + 2·d·N_c·N`
pub fn predicted_flops_naive(n: u64, d: u64, n_c: u64) -> u64 {
    (2 * d + 1) * n + 2 * d * n_c * n
}

/// `(R·d + N_c + 1)·N + d·(N_c + R·N_c′)`
pub fn predicted_flops_fused(n: u64, d: u64, n_c: u64, r: u64, n_cprime: u64) -> u64 {
    (r * d + n_c + 1) * n + d * (n_c + r * n_cprime)
}

#[derive(Default)]
struct Mults(u64);

impl Mults {
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.0 += 1;
        a * b
    }
}

#[inline]
fn rope_pair(m: &mut Mults, x: f64, y: f64, c: f64, s: f64) -> (f64, f64) {
    (m.mul(x, c) + m.mul(y, s), -m.mul(x, s) + m.mul(y, c))
}

fn rope_in_place(m: &mut Mults, v: &mut [f64], cos: &[f64], sin: &[f64]) {
    for j in 0..cos.len() {
        let (a, b) = rope_pair(m, v[2 * j], v[2 * j + 1], cos[j], sin[j]);
        v[2 * j] = a;
        v[2 * j + 1] = b;
    }
}

/// Scaled scores to softmax weights; one multiply per token for the scale
/// and one for the normalization.
fn softmax_weights(m: &mut Mults, scores: &mut [f64], d: usize) {
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for s in scores.iter_mut() {
        *s = m.mul(*s, inv_sqrt_d);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    for s in scores.iter_mut() {
        *s = m.mul(*s, inv);
    }
}

/// `softmax((q R_t)(K_i R_i)ᵀ / √d) · V` for a full-precision cache.
pub fn reference_attention(
    q: &[f64],
    keys: &Mat,
    values: &Mat,
    rope: &RopeParams,
    t: usize,
) -> Result<Vec<f64>> {
    let d = q.len();
    let n = keys.rows();
    if n == 0 {
        return invalid("attention over an empty cache");
    }
    if keys.cols() != d || values.cols() != d || values.rows() != n || rope.d() != d {
        return invalid(format!(
            "shape mismatch: q {d}, K {}x{}, V {}x{}, rope {}",
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols(),
            rope.d()
        ));
    }
    let table = RopeTable::new(rope, t.max(n - 1) + 1);
    Ok(attend(&mut Mults::default(), q, keys, values, &table, t))
}

fn attend(
    m: &mut Mults,
    q: &[f64],
    keys: &Mat,
    values: &Mat,
    table: &RopeTable,
    t: usize,
) -> Vec<f64> {
    let d = q.len();
    let mut qr = q.to_vec();
    rope_in_place(m, &mut qr, table.cos(t), table.sin(t));
    let mut k = vec![0.0; d];
    let mut scores = Vec::with_capacity(keys.rows());
    for i in 0..keys.rows() {
        k.copy_from_slice(keys.row(i));
        rope_in_place(m, &mut k, table.cos(i), table.sin(i));
        scores.push(qr.iter().zip(&k).map(|(&a, &b)| m.mul(a, b)).sum());
    }
    softmax_weights(m, &mut scores, d);
    let mut out = vec![0.0; d];
    for (i, &w) in scores.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += m.mul(w, v);
        }
    }
    out
}

fn report(pathway: &str, input: &AttnInput, predicted: u64, measured: u64) -> FlopReport {
    let kcfg = input.key_codebook.config();
    FlopReport {
        pathway: pathway.to_string(),
        n: input.tokens() as u64,
        d: input.d() as u64,
        n_c: input.value_codebook.n_codes() as u64,
        r: kcfg.rounds as u64,
        n_cprime: kcfg.n_levels as u64,
        predicted_mults: predicted,
        measured_mults: measured,
    }
}

/// Decodes both caches, then runs plain attention. Values are decoded as the
/// dense product `S_V · C_V`; key decoding is a table lookup.
pub fn naive_quantized_attention(input: &AttnInput) -> Result<(Vec<f64>, FlopReport)> {
    input.validate()?;
    let table = input.table();
    let (n, d) = (input.tokens(), input.d());
    let cb = input.value_codebook.rows();
    let nc = cb.rows();
    let mut m = Mults::default();

    let keys = decode_keys(input.key_codes, input.key_codebook)?;
    let mut values = Mat::zeros(n, d);
    for i in 0..n {
        let bits = input.value_codes.token(i);
        let row = values.row_mut(i);
        for (k, &b) in bits.iter().enumerate() {
            let bit = f64::from(b);
            for (o, &c) in row.iter_mut().zip(cb.row(k)) {
                *o += m.mul(bit, c);
            }
        }
    }
    let out = attend(&mut m, input.q, &keys, &values, &table, input.t);
    let predicted = predicted_flops_naive(n as u64, d as u64, nc as u64);
    Ok((out, report("naive", input, predicted, m.0)))
}

/// Commutative pathway: query-codebook products are computed once, each
/// token's score is assembled from lookups rotated by its own position, and
/// the value side is reordered to `(softmax · S_V) · C_V`.
pub fn fused_attention(input: &AttnInput) -> Result<(Vec<f64>, FlopReport)> {
    input.validate()?;
    let table = input.table();
    fused_with_table(input, &table)
}

/// As [`fused_attention`] with a caller-owned table covering positions
/// `0..=max(t, N-1)`.
pub fn fused_attention_with_table(
    input: &AttnInput,
    table: &RopeTable,
) -> Result<(Vec<f64>, FlopReport)> {
    input.validate()?;
    if table.positions() <= input.t.max(input.tokens() - 1) {
        return invalid(format!(
            "rope table covers {} positions, need {}",
            table.positions(),
            input.t.max(input.tokens() - 1) + 1
        ));
    }
    fused_with_table(input, table)
}

fn fused_with_table(input: &AttnInput, table: &RopeTable) -> Result<(Vec<f64>, FlopReport)> {
    let (n, d) = (input.tokens(), input.d());
    let kcb = input.key_codebook;
    let cfg = *kcb.config();
    let (sub, nl, g) = (cfg.subspaces(), cfg.n_levels, cfg.g);
    let mut m = Mults::default();

    let mut qr = input.q.to_vec();
    rope_in_place(&mut m, &mut qr, table.cos(input.t), table.sin(input.t));

    // p[r][j][l] = q_j C_{r,j,l}ᵀ
    let mut p = vec![0.0; cfg.rounds * sub * nl * 2];
    for r in 0..cfg.rounds {
        for j in 0..sub {
            let (q0, q1) = (qr[2 * j], qr[2 * j + 1]);
            for l in 0..nl {
                let c = kcb.atom(r, j, l);
                let at = ((r * sub + j) * nl + l) * 2;
                p[at] = m.mul(q0, c.x) + m.mul(q1, c.y);
                p[at + 1] = -m.mul(q0, c.y) + m.mul(q1, c.x);
            }
        }
    }

    // score_i = Σ c (p_a0 + p_b1) + s (p_b0 − p_a1)
    let mut scores = vec![0.0; n];
    for (i, score) in scores.iter_mut().enumerate() {
        let (cos, sin) = (table.cos(i), table.sin(i));
        let mut acc = 0.0;
        for r in 0..cfg.rounds {
            for grp in 0..cfg.groups() {
                let (a, b) = input.key_codes.get(i, r, grp);
                for j in grp * g..(grp + 1) * g {
                    let base = (r * sub + j) * nl;
                    let pa = &p[(base + a) * 2..(base + a) * 2 + 2];
                    let pb = &p[(base + b) * 2..(base + b) * 2 + 2];
                    acc += m.mul(cos[j], pa[0] + pb[1]) + m.mul(sin[j], pb[0] - pa[1]);
                }
            }
        }
        *score = acc;
    }
    softmax_weights(&mut m, &mut scores, d);

    let cb = input.value_codebook.rows();
    let nc = cb.rows();
    let mut mix = vec![0.0; nc];
    for (i, &w) in scores.iter().enumerate() {
        for (acc, &b) in mix.iter_mut().zip(input.value_codes.token(i)) {
            if b == 1 {
                *acc += w;
            }
        }
    }
    let mut out = vec![0.0; d];
    for (k, &w) in mix.iter().enumerate() {
        for (o, &c) in out.iter_mut().zip(cb.row(k)) {
            *o += m.mul(w, c);
        }
    }
    let predicted =
        predicted_flops_fused(n as u64, d as u64, nc as u64, cfg.rounds as u64, nl as u64);
    Ok((out, report("fused", input, predicted, m.0)))
}

/// `‖a − b‖ / ‖b‖`, or `‖a‖` when `b` is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyquant::{cluster_center, KeyQuantConfig};
    use crate::rope::CommMat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Scalar loops with explicit trig, no shared helpers.
    fn scalar_oracle(q: &[f64], k: &Mat, v: &Mat, base: f64, t: usize) -> Vec<f64> {
        let d = q.len();
        let rot = |x: &[f64], pos: usize| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for j in 0..d / 2 {
                let ang = pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
                out[2 * j] = x[2 * j] * ang.cos() + x[2 * j + 1] * ang.sin();
                out[2 * j + 1] = -x[2 * j] * ang.sin() + x[2 * j + 1] * ang.cos();
            }
            out
        };
        let qr = rot(q, t);
        let mut s = Vec::new();
        for i in 0..k.rows() {
            let kr = rot(k.row(i), i);
            let mut acc = 0.0;
            for e in 0..d {
                acc += qr[e] * kr[e];
            }
            s.push(acc / (d as f64).sqrt());
        }
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
        let mut out = vec![0.0; d];
        for i in 0..k.rows() {
            let w = (s[i] - mx).exp() / z;
            for e in 0..d {
                out[e] += w * v.get(i, e);
            }
        }
        out
    }

    #[test]
    fn reference_single_token_and_uniform() {
        let rope = RopeParams::new(4).unwrap();
        let q = [0.3, -0.2, 0.9, 0.1];
        let k = Mat::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let v = Mat::from_rows(&[[5.0, 6.0, 7.0, 8.0]]).unwrap();
        assert_eq!(
            reference_attention(&q, &k, &v, &rope, 0).unwrap(),
            vec![5.0, 6.0, 7.0, 8.0]
        );

        let k = Mat::zeros(3, 4);
        let v = Mat::from_rows(&[
            [1.0, 0.0, 0.0, 3.0],
            [2.0, 1.0, 0.0, 3.0],
            [6.0, 2.0, 0.0, 3.0],
        ])
        .unwrap();
        let out = reference_attention(&q, &k, &v, &rope, 5).unwrap();
        let want = [3.0, 1.0, 0.0, 3.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (64, 8);
        let rope = RopeParams::new(d).unwrap();
        let k = rand_mat(&mut rng, n, d);
        let v = rand_mat(&mut rng, n, d);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for t in [63, 100] {
            let got = reference_attention(&q, &k, &v, &rope, t).unwrap();
            let want = scalar_oracle(&q, &k, &v, 10000.0, t);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
        assert!(reference_attention(&q, &Mat::zeros(0, d), &Mat::zeros(0, d), &rope, 0).is_err());
        assert!(reference_attention(&q[..6], &k, &v, &rope, 70).is_err());
    }

    struct Instance {
        kcb: KeyCodebook,
        kcodes: KeyCodes,
        vcb: ValueCodebook,
        vcodes: ValueCodes,
        rope: RopeParams,
        q: Vec<f64>,
    }

    impl Instance {
        fn random(seed: u64, n: usize, cfg: KeyQuantConfig, n_codes: usize) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let atoms = (0..cfg.rounds * cfg.subspaces() * cfg.n_levels)
                .map(|_| CommMat {
                    x: rng.random_range(-1.0..1.0),
                    y: rng.random_range(-1.0..1.0),
                })
                .collect();
            let kcb = KeyCodebook::new(cfg, atoms).unwrap();
            let pairs = (0..n * cfg.rounds * cfg.groups())
                .map(|_| {
                    (
                        rng.random_range(0..cfg.n_levels) as u16,
                        rng.random_range(0..cfg.n_levels) as u16,
                    )
                })
                .collect();
            let kcodes = KeyCodes::new(&cfg, n, pairs).unwrap();
            let vcb = ValueCodebook::new(rand_mat(&mut rng, n_codes, cfg.d).scale(0.2)).unwrap();
            let bits = (0..n * n_codes).map(|_| rng.random_range(0..2u8)).collect();
            let vcodes = ValueCodes::new(n_codes, n, bits).unwrap();
            let q = (0..cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
            Self {
                kcb,
                kcodes,
                vcb,
                vcodes,
                rope: RopeParams::new(cfg.d).unwrap(),
                q,
            }
        }

        fn input(&self, t: usize) -> AttnInput<'_> {
            AttnInput {
                q: &self.q,
                t,
                key_codes: &self.kcodes,
                value_codes: &self.vcodes,
                key_codebook: &self.kcb,
                value_codebook: &self.vcb,
                rope: &self.rope,
            }
        }
    }

    #[test]
    fn predicted_formulas() {
        assert_eq!(predicted_flops_naive(1, 1, 1), 5);
        assert_eq!(predicted_flops_naive(8192, 1024, 1024), 17_196_654_592);
        assert_eq!(predicted_flops_fused(1, 1, 1, 1, 1), 5);
        let n = 1u64 << 20;
        let fused = predicted_flops_fused(n, 1024, 1024, 11, 64) as f64;
        let vanilla = ((2 * 1024 + 1) * n) as f64;
        assert!((fused / vanilla - 6.0).abs() < 0.05, "{}", fused / vanilla);
        let naive = predicted_flops_naive(n, 1024, 1024) as f64;
        assert!((naive / vanilla - 1024.0).abs() / 1024.0 < 0.01);
        let ratio = |n| {
            predicted_flops_fused(n, 1024, 1024, 11, 64) as f64
                / predicted_flops_naive(n, 1024, 1024) as f64
        };
        assert!(ratio(131072) < ratio(8192));
    }

    #[test]
    fn lossless_codes_reduce_to_reference() {
        let inst = Instance::random(5, 40, KeyQuantConfig::new(8, 2, 4, 2).unwrap(), 8);
        let keys = decode_keys(&inst.kcodes, &inst.kcb).unwrap();
        let values = crate::valquant::decode_values(&inst.vcodes, &inst.vcb).unwrap();
        let want = reference_attention(&inst.q, &keys, &values, &inst.rope, 45).unwrap();
        let (naive, _) = naive_quantized_attention(&inst.input(45)).unwrap();
        let (fused, _) = fused_attention(&inst.input(45)).unwrap();
        assert!(relative_error(&naive, &want) <= 1e-10);
        assert!(relative_error(&fused, &want) <= 1e-10);
    }

    #[test]
    fn fused_single_token_hand_expansion() {
        // d = 2, one subspace, one round, two levels; code (a, b) = (1, 0).
        let cfg = KeyQuantConfig::new(2, 1, 2, 1).unwrap();
        let atoms = vec![CommMat { x: 0.4, y: -0.7 }, CommMat { x: 1.3, y: 0.5 }];
        let kcb = KeyCodebook::new(cfg, atoms).unwrap();
        let kcodes = KeyCodes::new(&cfg, 1, vec![(1, 0)]).unwrap();
        let vcb = ValueCodebook::new(Mat::from_rows(&[[2.0, -1.0]]).unwrap()).unwrap();
        let vcodes = ValueCodes::new(1, 1, vec![1]).unwrap();
        let rope = RopeParams::from_thetas(vec![0.3]).unwrap();
        let q = [0.8, -0.6];
        let t = 4;
        let input = AttnInput {
            q: &q,
            t,
            key_codes: &kcodes,
            value_codes: &vcodes,
            key_codebook: &kcb,
            value_codebook: &vcb,
            rope: &rope,
        };
        // Single token: output is the value row regardless of the score.
        let (out, _) = fused_attention(&input).unwrap();
        assert_eq!(out, vec![2.0, -1.0]);

        // Score by hand: q R_t C_aᵀ R_0ᵀ e0ᵀ + q R_t C_bᵀ R_0ᵀ e1ᵀ.
        let (s, c) = (t as f64 * 0.3).sin_cos();
        let qr = [q[0] * c + q[1] * s, -q[0] * s + q[1] * c];
        let (xa, ya, xb, yb) = (1.3, 0.5, 0.4, -0.7);
        let pa = [qr[0] * xa + qr[1] * ya, -qr[0] * ya + qr[1] * xa];
        let pb = [qr[0] * xb + qr[1] * yb, -qr[0] * yb + qr[1] * xb];
        let hand = pa[0] + pb[1];
        let key = cluster_center(&kcb, 0, 0, 1, 0).unwrap();
        let direct = qr[0] * key[0] + qr[1] * key[1];
        assert!((hand - direct).abs() < 1e-14);

        // Second token at position 1 exercises the rotation of p.
        let kcodes2 = KeyCodes::new(&cfg, 2, vec![(1, 0), (0, 1)]).unwrap();
        let vcb2 = ValueCodebook::new(Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let vcodes2 = ValueCodes::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let input2 = AttnInput {
            key_codes: &kcodes2,
            value_codes: &vcodes2,
            value_codebook: &vcb2,
            ..input
        };
        let (s1, c1) = 0.3f64.sin_cos();
        let score0 = hand;
        let score1 = c1 * (pb[0] + pa[1]) + s1 * (pa[0] - pb[1]);
        let z = 2f64.sqrt();
        let (e0, e1) = ((score0 / z).exp(), (score1 / z).exp());
        let want = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let (out, _) = fused_attention(&input2).unwrap();
        assert!(relative_error(&out, &want) < 1e-14, "{out:?} vs {want:?}");
    }

    #[test]
    fn pathways_agree_on_random_configs() {
        let cases = [
            (1, KeyQuantConfig::new(8, 2, 4, 1).unwrap(), 8),
            (2, KeyQuantConfig::new(8, 4, 4, 3).unwrap(), 16),
            (64, KeyQuantConfig::new(16, 2, 4, 3).unwrap(), 16),
            (300, KeyQuantConfig::new(32, 16, 8, 2).unwrap(), 32),
        ];
        for (seed, (n, cfg, nc)) in cases.into_iter().enumerate() {
            let inst = Instance::random(seed as u64, n, cfg, nc);
            for t in [n - 1, n + 7] {
                let (a, _) = naive_quantized_attention(&inst.input(t)).unwrap();
                let (b, _) = fused_attention(&inst.input(t)).unwrap();
                assert!(relative_error(&b, &a) <= 1e-10, "case {seed}");
            }
        }
    }

    #[test]
    fn flop_counts_track_predictions() {
        let cfg = KeyQuantConfig::new(64, 32, 16, 3).unwrap();
        let inst = Instance::random(9, 1024, cfg, 64);
        let (_, naive) = naive_quantized_attention(&inst.input(1023)).unwrap();
        let (_, fused) = fused_attention(&inst.input(1023)).unwrap();
        assert!((0.5..=1.5).contains(&naive.ratio()), "{naive:?}");
        assert!((0.5..=1.5).contains(&fused.ratio()), "{fused:?}");
        assert!(fused.measured_mults < naive.measured_mults);
        // exact per-pathway tallies
        let (n, d, nc, r, nl) = (1024u64, 64u64, 64u64, 3u64, 16u64);
        assert_eq!(
            naive.measured_mults,
            2 * d + n * (nc * d + 2 * d + d + 2 + d)
        );
        assert_eq!(
            fused.measured_mults,
            2 * d + 2 * r * d * nl + n * (r * d + 2) + nc * d
        );
    }

    #[test]
    fn flop_report_json_fields() {
        let inst = Instance::random(1, 4, KeyQuantConfig::new(4, 1, 2, 1).unwrap(), 4);
        let (_, rep) = fused_attention(&inst.input(3)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for key in [
            "pathway",
            "N",
            "d",
            "N_c",
            "R",
            "N_cprime",
            "predicted_mults",
            "measured_mults",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["pathway"], "fused");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = KeyQuantConfig::new(8, 2, 4, 1).unwrap();
        let inst = Instance::random(2, 10, cfg, 8);
        assert!(fused_attention(&inst.input(5)).is_err());
        let empty_k = KeyCodes::empty(&cfg);
        let empty_v = ValueCodes::empty(8);
        let input = AttnInput {
            key_codes: &empty_k,
            value_codes: &empty_v,
            ..inst.input(0)
        };
        assert!(naive_quantized_attention(&input).is_err());
        assert!(fused_attention(&input).is_err());
        let short_q = [0.0; 6];
        let input = AttnInput {
            q: &short_q,
            ..inst.input(9)
        };
        assert!(fused_attention(&input).is_err());
        let table = RopeTable::new(&inst.rope, 5);
        assert!(fused_attention_with_table(&inst.input(9), &table).is_err());
    }
}
