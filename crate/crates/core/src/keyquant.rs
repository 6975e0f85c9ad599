//! RoPE-commutative key codebook.
//!
//! Each 2-dim key subspace `j` owns `n_levels` atoms `C^{jl} = [[x, y], [-y, x]]`.
//! A code `(a, b)` decodes subspace `j` to `row0(C^{ja}) + row1(C^{jb})`,
//! i.e. `(x_a - y_b, y_a + x_b)`. Consecutive `g` subspaces form a group that
//! shares one `(a, b)`, and `rounds` residual codebooks are stacked on top of
//! each other.
//!
//! Training is EM: soft assignment with an annealed temperature, then hard
//! assignment until the objective stalls. The M-step is the closed-form
//! weighted least-squares solve `φ = (TᵀST + λI)⁻¹(TᵀSm + λφ₀)`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{corrupt, invalid, Error, Result};
use crate::linalg::{cholesky_solve, dot, sq_dist, Mat};
use crate::rope::CommMat;

pub const KEY_MAGIC: &[u8; 4] = b"CVQK";
pub const KEY_FORMAT_VERSION: u32 = 1;

const MAX_LEVELS: usize = 1 << 16;
/// Upper bound on distance-matrix entries inspected when picking the
/// initial temperature.
const MEDIAN_SAMPLE_CAP: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyQuantConfig {
    /// Per-head hidden size (even).
    pub d: usize,
    /// Subspaces per group sharing one index pair.
    pub g: usize,
    /// Atoms per subspace codebook.
    pub n_levels: usize,
    /// Residual rounds.
    pub rounds: usize,
}

impl KeyQuantConfig {
    pub fn new(d: usize, g: usize, n_levels: usize, rounds: usize) -> Result<Self> {
        let cfg = Self {
            d,
            g,
            n_levels,
            rounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return invalid(format!("key d must be even and positive, got {}", self.d));
        }
        if self.g == 0 || (self.d / 2) % self.g != 0 {
            return invalid(format!(
                "group size g={} must divide d/2={}",
                self.g,
                self.d / 2
            ));
        }
        if self.n_levels < 2 || !self.n_levels.is_power_of_two() || self.n_levels > MAX_LEVELS {
            return invalid(format!(
                "n_levels must be a power of two in 2..={MAX_LEVELS}, got {}",
                self.n_levels
            ));
        }
        if self.rounds == 0 {
            return invalid("rounds must be >= 1");
        }
        Ok(())
    }

    #[inline]
    pub fn subspaces(&self) -> usize {
        self.d / 2
    }

    #[inline]
    pub fn groups(&self) -> usize {
        self.d / (2 * self.g)
    }

    #[inline]
    pub fn index_bits(&self) -> u32 {
        self.n_levels.trailing_zeros()
    }

    /// Packed bits per token: `R · (d/2g) · 2 · log₂ N_c′`.
    pub fn bits_per_token(&self) -> usize {
        self.rounds * self.groups() * 2 * self.index_bits() as usize
    }

    pub fn avg_bit(&self) -> f64 {
        avg_bit_key(self.rounds, self.n_levels, self.g)
    }
}

/// `R · log₂(N_c′) / g`.
pub fn avg_bit_key(rounds: usize, n_levels: usize, g: usize) -> f64 {
    rounds as f64 * (n_levels as f64).log2() / g as f64
}

/// Codebook footprint in 16-bit-equivalent bytes, counting all four entries
/// of every 2×2 atom: `2 · 2 · N_c′ · R · (d/2) · 2`.
pub fn key_codebook_bytes(n_levels: usize, rounds: usize, d: usize) -> u64 {
    2 * 2 * n_levels as u64 * rounds as u64 * (d as u64 / 2) * 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyCodebook {
    config: KeyQuantConfig,
    /// Round-major, subspace-major, level-minor.
    atoms: Vec<CommMat>,
}

impl KeyCodebook {
    pub fn new(config: KeyQuantConfig, atoms: Vec<CommMat>) -> Result<Self> {
        config.validate()?;
        let want = config.rounds * config.subspaces() * config.n_levels;
        if atoms.len() != want {
            return invalid(format!("expected {want} atoms, got {}", atoms.len()));
        }
        if atoms.iter().any(|c| !(c.x.is_finite() && c.y.is_finite())) {
            return invalid("codebook atoms must be finite");
        }
        Ok(Self { config, atoms })
    }

    pub fn zeros(config: KeyQuantConfig) -> Result<Self> {
        let n = config.rounds * config.subspaces() * config.n_levels;
        Self::new(config, vec![CommMat::default(); n])
    }

    #[inline]
    pub fn config(&self) -> &KeyQuantConfig {
        &self.config
    }

    pub fn atoms(&self) -> &[CommMat] {
        &self.atoms
    }

    #[inline]
    fn idx(&self, round: usize, j: usize, l: usize) -> usize {
        (round * self.config.subspaces() + j) * self.config.n_levels + l
    }

    #[inline]
    pub fn atom(&self, round: usize, j: usize, l: usize) -> CommMat {
        self.atoms[self.idx(round, j, l)]
    }

    #[inline]
    pub fn atom_mut(&mut self, round: usize, j: usize, l: usize) -> &mut CommMat {
        let i = self.idx(round, j, l);
        &mut self.atoms[i]
    }

    /// Rows `U_a` (row 0 of atom `a` in every subspace of the group), one
    /// per level, each of width `2g`.
    fn row0_stack(&self, round: usize, group: usize) -> Vec<f64> {
        let (g, n) = (self.config.g, self.config.n_levels);
        let mut out = vec![0.0; n * 2 * g];
        for l in 0..n {
            for s in 0..g {
                let c = self.atom(round, group * g + s, l);
                out[l * 2 * g + 2 * s] = c.x;
                out[l * 2 * g + 2 * s + 1] = c.y;
            }
        }
        out
    }

    /// Rows `V_b` (row 1 of atom `b`): `(-y_b, x_b)` per subspace.
    fn row1_stack(&self, round: usize, group: usize) -> Vec<f64> {
        let (g, n) = (self.config.g, self.config.n_levels);
        let mut out = vec![0.0; n * 2 * g];
        for l in 0..n {
            for s in 0..g {
                let c = self.atom(round, group * g + s, l);
                out[l * 2 * g + 2 * s] = -c.y;
                out[l * 2 * g + 2 * s + 1] = c.x;
            }
        }
        out
    }

    fn write_center(&self, round: usize, group: usize, a: usize, b: usize, out: &mut [f64]) {
        let g = self.config.g;
        for s in 0..g {
            let j = group * g + s;
            let ca = self.atom(round, j, a);
            let cb = self.atom(round, j, b);
            out[2 * s] = ca.x - cb.y;
            out[2 * s + 1] = ca.y + cb.x;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.atoms.len() * 8);
        buf.extend_from_slice(KEY_MAGIC);
        buf.extend_from_slice(&KEY_FORMAT_VERSION.to_le_bytes());
        for v in [
            self.config.d,
            self.config.g,
            self.config.n_levels,
            self.config.rounds,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in &self.atoms {
            buf.extend_from_slice(&(c.x as f32).to_le_bytes());
            buf.extend_from_slice(&(c.y as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::io::ByteReader::new(bytes);
        r.expect_magic(KEY_MAGIC)?;
        let version = r.u32()?;
        if version != KEY_FORMAT_VERSION {
            return corrupt(format!("unsupported key codebook version {version}"));
        }
        let d = r.u32()? as usize;
        let g = r.u32()? as usize;
        let n_levels = r.u32()? as usize;
        let rounds = r.u32()? as usize;
        let config = KeyQuantConfig::new(d, g, n_levels, rounds)
            .map_err(|e| Error::Corrupt(format!("key codebook header: {e}")))?;
        let count = rounds * config.subspaces() * n_levels;
        let mut atoms = Vec::with_capacity(count);
        for _ in 0..count {
            let x = r.f32()? as f64;
            let y = r.f32()? as f64;
            atoms.push(CommMat { x, y });
        }
        r.finish()?;
        Self::new(config, atoms).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Per-token index pairs, laid out token-major, then round, then group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyCodes {
    rounds: usize,
    groups: usize,
    n_levels: usize,
    tokens: usize,
    pairs: Vec<(u16, u16)>,
}

impl KeyCodes {
    pub fn new(config: &KeyQuantConfig, tokens: usize, pairs: Vec<(u16, u16)>) -> Result<Self> {
        let per = config.rounds * config.groups();
        if pairs.len() != per * tokens {
            return invalid(format!(
                "expected {} key index pairs, got {}",
                per * tokens,
                pairs.len()
            ));
        }
        let codes = Self {
            rounds: config.rounds,
            groups: config.groups(),
            n_levels: config.n_levels,
            tokens,
            pairs,
        };
        codes.check_range()?;
        Ok(codes)
    }

    pub fn empty(config: &KeyQuantConfig) -> Self {
        Self {
            rounds: config.rounds,
            groups: config.groups(),
            n_levels: config.n_levels,
            tokens: 0,
            pairs: Vec::new(),
        }
    }

    fn check_range(&self) -> Result<()> {
        if let Some(p) = self
            .pairs
            .iter()
            .position(|&(a, b)| a as usize >= self.n_levels || b as usize >= self.n_levels)
        {
            return corrupt(format!(
                "key code {:?} at flat index {p} exceeds n_levels {}",
                self.pairs[p], self.n_levels
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn pairs_per_token(&self) -> usize {
        self.rounds * self.groups
    }

    pub fn pairs(&self) -> &[(u16, u16)] {
        &self.pairs
    }

    #[inline]
    pub fn get(&self, token: usize, round: usize, group: usize) -> (usize, usize) {
        let (a, b) = self.pairs[(token * self.rounds + round) * self.groups + group];
        (a as usize, b as usize)
    }

    pub fn token(&self, token: usize) -> &[(u16, u16)] {
        let per = self.pairs_per_token();
        &self.pairs[token * per..(token + 1) * per]
    }

    pub fn push_token(&mut self, pairs: &[(u16, u16)]) -> Result<()> {
        if pairs.len() != self.pairs_per_token() {
            return invalid("token code width mismatch");
        }
        self.pairs.extend_from_slice(pairs);
        self.tokens += 1;
        Ok(())
    }

    pub fn extend(&mut self, other: &KeyCodes) -> Result<()> {
        if (other.rounds, other.groups, other.n_levels) != (self.rounds, self.groups, self.n_levels)
        {
            return invalid("cannot concatenate key codes of different configs");
        }
        self.pairs.extend_from_slice(&other.pairs);
        self.tokens += other.tokens;
        Ok(())
    }

    /// Checks the layout matches `config`.
    pub fn check_config(&self, config: &KeyQuantConfig) -> Result<()> {
        if (self.rounds, self.groups, self.n_levels)
            != (config.rounds, config.groups(), config.n_levels)
        {
            return invalid(format!(
                "key codes (R={}, groups={}, N={}) do not match codebook (R={}, groups={}, N={})",
                self.rounds,
                self.groups,
                self.n_levels,
                config.rounds,
                config.groups(),
                config.n_levels
            ));
        }
        self.check_range()
    }
}

/// Constant matrix mapping `φ = (x_0, y_0, x_1, y_1, …)` to the stacked
/// centers: rows `2(aN+b)` and `2(aN+b)+1` produce `x_a − y_b` and
/// `y_a + x_b`.
pub fn build_t(n_levels: usize) -> Mat {
    let n = n_levels;
    let mut t = Mat::zeros(2 * n * n, 2 * n);
    for a in 0..n {
        for b in 0..n {
            let r = 2 * (a * n + b);
            t.set(r, 2 * a, 1.0);
            t.set(r, 2 * b + 1, -1.0);
            t.set(r + 1, 2 * b, 1.0);
            t.set(r + 1, 2 * a + 1, 1.0);
        }
    }
    t
}

pub fn cluster_center(
    codebook: &KeyCodebook,
    round: usize,
    group: usize,
    a: usize,
    b: usize,
) -> Result<Vec<f64>> {
    let cfg = codebook.config();
    if round >= cfg.rounds || group >= cfg.groups() || a >= cfg.n_levels || b >= cfg.n_levels {
        return invalid(format!(
            "center index (round {round}, group {group}, a {a}, b {b}) out of range"
        ));
    }
    let mut out = vec![0.0; 2 * cfg.g];
    codebook.write_center(round, group, a, b, &mut out);
    Ok(out)
}

/// How to find the nearest `(a, b)` center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenterSearch {
    /// Materialize every center and scan. `N_c′² · 2g` per point.
    BruteForce,
    /// Expand `‖p − U_a − V_b‖²` and reuse a per-group Gram table.
    /// `2 · N_c′ · 2g + N_c′²` per point.
    #[default]
    Factorized,
}

/// Nearest-center assignment by exhaustive scan. Ties go to the smallest
/// `a · N_c′ + b`.
pub fn e_step_assign(
    points: &Mat,
    codebook: &KeyCodebook,
    round: usize,
    group: usize,
) -> Result<Vec<(usize, usize)>> {
    e_step_assign_with(points, codebook, round, group, CenterSearch::BruteForce)
}

pub fn e_step_assign_with(
    points: &Mat,
    codebook: &KeyCodebook,
    round: usize,
    group: usize,
    search: CenterSearch,
) -> Result<Vec<(usize, usize)>> {
    let cfg = codebook.config();
    if points.cols() != 2 * cfg.g {
        return invalid(format!(
            "points have {} columns, group width is {}",
            points.cols(),
            2 * cfg.g
        ));
    }
    if round >= cfg.rounds || group >= cfg.groups() {
        return invalid("round or group out of range");
    }
    let mut out = Vec::with_capacity(points.rows());
    match search {
        CenterSearch::BruteForce => {
            let n = cfg.n_levels;
            let mut centers = vec![0.0; n * n * 2 * cfg.g];
            for a in 0..n {
                for b in 0..n {
                    let off = (a * n + b) * 2 * cfg.g;
                    codebook.write_center(round, group, a, b, &mut centers[off..off + 2 * cfg.g]);
                }
            }
            for i in 0..points.rows() {
                let p = points.row(i);
                let mut best = (f64::INFINITY, 0);
                for (c, center) in centers.chunks_exact(2 * cfg.g).enumerate() {
                    let dist = sq_dist(p, center);
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                out.push((best.1 / n, best.1 % n));
            }
        }
        CenterSearch::Factorized => {
            let table = GroupTable::new(codebook, round, group);
            let mut scratch = Scratch::new(cfg.n_levels);
            for i in 0..points.rows() {
                let (a, b, _) = table.nearest(points.row(i), &mut scratch);
                out.push((a, b));
            }
        }
    }
    Ok(out)
}

/// Per-group precomputation for factorized distances.
struct GroupTable {
    n: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    /// `‖U_a‖² + ‖V_b‖² + 2 U_a·V_b`, row-major in `(a, b)`.
    gram: Vec<f64>,
}

struct Scratch {
    pu: Vec<f64>,
    pv: Vec<f64>,
    dist: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            pu: vec![0.0; n],
            pv: vec![0.0; n],
            dist: vec![0.0; n * n],
        }
    }
}

impl GroupTable {
    fn new(codebook: &KeyCodebook, round: usize, group: usize) -> Self {
        let cfg = codebook.config();
        let (n, width) = (cfg.n_levels, 2 * cfg.g);
        let u = codebook.row0_stack(round, group);
        let v = codebook.row1_stack(round, group);
        let un: Vec<f64> = u.chunks_exact(width).map(|r| dot(r, r)).collect();
        let vn: Vec<f64> = v.chunks_exact(width).map(|r| dot(r, r)).collect();
        let mut gram = vec![0.0; n * n];
        for a in 0..n {
            let ua = &u[a * width..(a + 1) * width];
            for b in 0..n {
                let vb = &v[b * width..(b + 1) * width];
                gram[a * n + b] = un[a] + vn[b] + 2.0 * dot(ua, vb);
            }
        }
        Self {
            n,
            width,
            u,
            v,
            gram,
        }
    }

    /// Fills `scratch.dist` with squared distances from `p` to all centers.
    fn distances(&self, p: &[f64], scratch: &mut Scratch) {
        let pn = dot(p, p);
        for l in 0..self.n {
            scratch.pu[l] = dot(p, &self.u[l * self.width..(l + 1) * self.width]);
            scratch.pv[l] = dot(p, &self.v[l * self.width..(l + 1) * self.width]);
        }
        for a in 0..self.n {
            let base = pn - 2.0 * scratch.pu[a];
            let row = &mut scratch.dist[a * self.n..(a + 1) * self.n];
            let grow = &self.gram[a * self.n..(a + 1) * self.n];
            for b in 0..self.n {
                row[b] = (base - 2.0 * scratch.pv[b] + grow[b]).max(0.0);
            }
        }
    }

    fn nearest(&self, p: &[f64], scratch: &mut Scratch) -> (usize, usize, f64) {
        self.distances(p, scratch);
        let mut best = (f64::INFINITY, 0);
        for (c, &dist) in scratch.dist.iter().enumerate() {
            if dist < best.0 {
                best = (dist, c);
            }
        }
        (best.1 / self.n, best.1 % self.n, best.0)
    }
}

/// Row-wise `softmax(−D / T)`.
pub fn soft_weights(dists: &Mat, temperature: f64) -> Result<Mat> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    let mut out = dists.clone();
    for r in 0..out.rows() {
        soft_row_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

fn soft_row_in_place(row: &mut [f64], temperature: f64) {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let inv_t = 1.0 / temperature;
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (-(*v - min) * inv_t).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Normal equations for one group: `TᵀST` is shared by every subspace of
/// the group, the right-hand side `TᵀSm` differs per subspace.
struct NormalEquations {
    n: usize,
    tst: Vec<f64>,
}

impl NormalEquations {
    /// Builds `TᵀST` from per-center total weights `s[a·N + b]`.
    fn from_center_weights(n: usize, s: &[f64]) -> Self {
        let dim = 2 * n;
        let mut tst = vec![0.0; dim * dim];
        let mut add = |r: usize, c: usize, v: f64| tst[r * dim + c] += v;
        for a in 0..n {
            for b in 0..n {
                let w = s[a * n + b];
                if w == 0.0 {
                    continue;
                }
                // t1 = e_{2a} − e_{2b+1}
                add(2 * a, 2 * a, w);
                add(2 * b + 1, 2 * b + 1, w);
                add(2 * a, 2 * b + 1, -w);
                add(2 * b + 1, 2 * a, -w);
                // t2 = e_{2b} + e_{2a+1}
                add(2 * b, 2 * b, w);
                add(2 * a + 1, 2 * a + 1, w);
                add(2 * b, 2 * a + 1, w);
                add(2 * a + 1, 2 * b, w);
            }
        }
        Self { n, tst }
    }

    fn trace(&self) -> f64 {
        let dim = 2 * self.n;
        (0..dim).map(|i| self.tst[i * dim + i]).sum()
    }

    fn default_ridge(&self) -> f64 {
        1e-8 * self.trace() / (2 * self.n) as f64
    }

    /// Solves `(TᵀST + ridge·I) φ = rhs + ridge·anchor` for each
    /// right-hand side, sharing one factorization.
    fn solve(&self, rhs: &[Vec<f64>], ridge: f64, anchors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let dim = 2 * self.n;
        let mut a = self.tst.clone();
        for i in 0..dim {
            a[i * dim + i] += ridge;
        }
        let l = cholesky_factor(&a, dim).map_err(|e| {
            Error::Training(format!(
                "M-step system singular (ridge {ridge:e}, trace {:e}): {e}",
                self.trace()
            ))
        })?;
        rhs.iter()
            .zip(anchors)
            .map(|(b, anchor)| {
                let b: Vec<f64> = b
                    .iter()
                    .zip(anchor)
                    .map(|(bv, av)| bv + ridge * av)
                    .collect();
                Ok(cholesky_apply(&l, &b, dim))
            })
            .collect()
    }
}

fn cholesky_factor(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Training(format!("non-positive pivot {s:e} at {i}")));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_apply(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn phi_to_atoms(phi: &[f64]) -> Vec<CommMat> {
    phi.chunks_exact(2)
        .map(|p| CommMat { x: p[0], y: p[1] })
        .collect()
}

/// Closed-form M-step for one subspace, written directly in terms of the
/// constant matrix `T`: builds per-center weighted means `m` and total
/// weights `S`, then solves `(TᵀST + ridge·I) φ = TᵀSm`.
pub fn m_step(points: &Mat, weights: &Mat, t_matrix: &Mat, ridge: f64) -> Result<Vec<CommMat>> {
    let centers = weights.cols();
    let n = (centers as f64).sqrt().round() as usize;
    if n * n != centers {
        return invalid(format!(
            "weights have {centers} columns, not a square count"
        ));
    }
    if points.cols() != 2 || points.rows() != weights.rows() {
        return invalid("m_step expects n×2 points and n×N² weights");
    }
    if t_matrix.rows() != 2 * centers || t_matrix.cols() != 2 * n {
        return invalid("T matrix shape does not match weights");
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return invalid(format!("ridge must be non-negative, got {ridge}"));
    }
    let mut s = vec![0.0; centers];
    let mut sums = vec![0.0; 2 * centers];
    for i in 0..points.rows() {
        let p = points.row(i);
        for (c, &w) in weights.row(i).iter().enumerate() {
            s[c] += w;
            sums[2 * c] += w * p[0];
            sums[2 * c + 1] += w * p[1];
        }
    }
    let m: Vec<f64> = (0..2 * centers)
        .map(|k| {
            if s[k / 2] > 0.0 {
                sums[k] / s[k / 2]
            } else {
                0.0
            }
        })
        .collect();
    let sdiag: Vec<f64> = (0..2 * centers).map(|k| s[k / 2]).collect();

    let dim = 2 * n;
    let mut tst = vec![0.0; dim * dim];
    let mut tsm = vec![0.0; dim];
    for r in 0..2 * centers {
        let row = t_matrix.row(r);
        for (p, &tp) in row.iter().enumerate() {
            if tp == 0.0 {
                continue;
            }
            tsm[p] += tp * sdiag[r] * m[r];
            for (q, &tq) in row.iter().enumerate() {
                if tq != 0.0 {
                    tst[p * dim + q] += tp * sdiag[r] * tq;
                }
            }
        }
    }
    for i in 0..dim {
        tst[i * dim + i] += ridge;
    }
    let phi = cholesky_solve(&tst, &tsm, dim).map_err(|e| {
        Error::Training(format!("M-step system singular with ridge {ridge:e}: {e}"))
    })?;
    Ok(phi_to_atoms(&phi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub soft_iters: usize,
    pub hard_iters_max: usize,
    /// Initial temperature; `None` picks the median initial distance.
    pub t0: Option<f64>,
    pub decay: f64,
    /// Relative objective change that ends the hard phase.
    pub tol: f64,
    /// M-step ridge; `None` uses `1e-8 · trace(TᵀST) / (2 N_c′)`.
    pub ridge: Option<f64>,
    pub seed: u64,
    pub search: CenterSearch,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            soft_iters: 30,
            hard_iters_max: 100,
            t0: None,
            decay: 0.9,
            tol: 1e-6,
            ridge: None,
            seed: 0,
            search: CenterSearch::Factorized,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return invalid(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if !(self.tol > 0.0) {
            return invalid(format!("tol must be positive, got {}", self.tol));
        }
        if let Some(t0) = self.t0 {
            if !(t0 > 0.0 && t0.is_finite()) {
                return invalid(format!("t0 must be positive, got {t0}"));
            }
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return invalid(format!("ridge must be non-negative, got {r}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub t0: f64,
    /// Mean squared error per scalar after every hard E-step.
    pub hard_objectives: Vec<f64>,
    pub repaired_levels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub groups: Vec<GroupReport>,
    /// Reconstruction MSE of the calibration set using rounds `0..=r`.
    pub residual_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyTrainReport {
    pub rounds: Vec<RoundReport>,
    pub final_mse: f64,
}

pub fn train_key_codebook(
    calib: &Mat,
    config: KeyQuantConfig,
    em: &EmConfig,
) -> Result<KeyCodebook> {
    train_key_codebook_with_report(calib, config, em).map(|(cb, _)| cb)
}

pub fn train_key_codebook_with_report(
    calib: &Mat,
    config: KeyQuantConfig,
    em: &EmConfig,
) -> Result<(KeyCodebook, KeyTrainReport)> {
    config.validate()?;
    em.validate()?;
    if calib.cols() != config.d {
        return invalid(format!(
            "calibration width {} != key d {}",
            calib.cols(),
            config.d
        ));
    }
    let n_centers = config.n_levels * config.n_levels;
    if calib.rows() < n_centers {
        return invalid(format!(
            "calibration has {} rows, need at least N_c'^2 = {n_centers}",
            calib.rows()
        ));
    }
    if calib.as_slice().iter().all(|v| *v == calib.as_slice()[0]) {
        return Err(Error::Training(
            "degenerate calibration: every entry is identical".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(em.seed);
    let mut codebook = KeyCodebook::zeros(config)?;
    let mut residual = calib.clone();
    let mut report = KeyTrainReport::default();
    let width = 2 * config.g;

    for round in 0..config.rounds {
        let mut round_report = RoundReport::default();
        for group in 0..config.groups() {
            let points = residual.columns(group * width, width);
            init_group(&mut codebook, round, group, &points, &mut rng)?;
            let gr = fit_group(&mut codebook, round, group, &points, em)?;
            round_report.groups.push(gr);
        }
        subtract_round(&mut residual, &codebook, round, em.search)?;
        round_report.residual_mse = residual.as_slice().iter().map(|v| v * v).sum::<f64>()
            / residual.as_slice().len() as f64;
        report.rounds.push(round_report);
    }
    report.final_mse = report.rounds.last().map_or(0.0, |r| r.residual_mse);
    Ok((codebook, report))
}

/// Draws atoms `(x, y) ~ N(0, σ̂_j² / 2)` per subspace.
fn init_group(
    codebook: &mut KeyCodebook,
    round: usize,
    group: usize,
    points: &Mat,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let cfg = *codebook.config();
    for s in 0..cfg.g {
        let col = points.columns(2 * s, 2);
        let sigma = col.variance().sqrt();
        let normal = Normal::new(0.0, sigma / 2f64.sqrt())
            .map_err(|e| Error::Training(format!("init distribution: {e}")))?;
        for l in 0..cfg.n_levels {
            let j = group * cfg.g + s;
            *codebook.atom_mut(round, j, l) = CommMat {
                x: normal.sample(rng),
                y: normal.sample(rng),
            };
        }
    }
    Ok(())
}

/// Weighted sufficient statistics gathered during one E-step.
struct Stats {
    n: usize,
    width: usize,
    /// Total weight per center `(a, b)`.
    s: Vec<f64>,
    /// `Σ_i Σ_b W_{i,ab} p_i`, one `width` vector per level `a`.
    row0: Vec<f64>,
    /// `Σ_i Σ_a W_{i,ab} p_i`, one `width` vector per level `b`.
    row1: Vec<f64>,
    /// Per-point distance to its nearest center.
    best: Vec<f64>,
}

impl Stats {
    fn new(n: usize, width: usize, points: usize) -> Self {
        Self {
            n,
            width,
            s: vec![0.0; n * n],
            row0: vec![0.0; n * width],
            row1: vec![0.0; n * width],
            best: vec![0.0; points],
        }
    }

    fn level_usage(&self) -> Vec<f64> {
        let n = self.n;
        let mut usage = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                let w = self.s[a * n + b];
                usage[a] += w;
                usage[b] += w;
            }
        }
        usage
    }

    fn accumulate(&mut self, p: &[f64], wa: &[f64], wb: &[f64]) {
        for l in 0..self.n {
            let (a, b) = (wa[l], wb[l]);
            let r0 = &mut self.row0[l * self.width..(l + 1) * self.width];
            if a != 0.0 {
                for (acc, v) in r0.iter_mut().zip(p) {
                    *acc += a * v;
                }
            }
            let r1 = &mut self.row1[l * self.width..(l + 1) * self.width];
            if b != 0.0 {
                for (acc, v) in r1.iter_mut().zip(p) {
                    *acc += b * v;
                }
            }
        }
    }
}

enum Assign {
    Soft(f64),
    Hard,
}

/// One E-step. Returns the statistics and the hard objective (mean squared
/// error per scalar to the nearest center).
fn e_step_stats(
    codebook: &KeyCodebook,
    round: usize,
    group: usize,
    points: &Mat,
    mode: Assign,
    search: CenterSearch,
) -> (Stats, f64) {
    let cfg = codebook.config();
    let (n, width) = (cfg.n_levels, 2 * cfg.g);
    let mut stats = Stats::new(n, width, points.rows());
    let table = GroupTable::new(codebook, round, group);
    let mut scratch = Scratch::new(n);
    let mut wa = vec![0.0; n];
    let mut wb = vec![0.0; n];
    let mut center = vec![0.0; width];
    let mut total = 0.0;
    for i in 0..points.rows() {
        let p = points.row(i);
        table.distances(p, &mut scratch);
        if search == CenterSearch::BruteForce {
            for a in 0..n {
                for b in 0..n {
                    codebook.write_center(round, group, a, b, &mut center);
                    scratch.dist[a * n + b] = sq_dist(p, &center);
                }
            }
        }
        let mut best = (f64::INFINITY, 0);
        for (c, &dist) in scratch.dist.iter().enumerate() {
            if dist < best.0 {
                best = (dist, c);
            }
        }
        stats.best[i] = best.0;
        total += best.0;
        wa.iter_mut().for_each(|w| *w = 0.0);
        wb.iter_mut().for_each(|w| *w = 0.0);
        match mode {
            Assign::Hard => {
                let (a, b) = (best.1 / n, best.1 % n);
                stats.s[best.1] += 1.0;
                wa[a] = 1.0;
                wb[b] = 1.0;
            }
            Assign::Soft(temp) => {
                soft_row_in_place(&mut scratch.dist, temp);
                for a in 0..n {
                    let row = &scratch.dist[a * n..(a + 1) * n];
                    for (b, &w) in row.iter().enumerate() {
                        stats.s[a * n + b] += w;
                        wa[a] += w;
                        wb[b] += w;
                    }
                }
            }
        }
        stats.accumulate(p, &wa, &wb);
    }
    let objective = total / (points.rows() * width) as f64;
    (stats, objective)
}

fn m_step_group(
    codebook: &mut KeyCodebook,
    round: usize,
    group: usize,
    stats: &Stats,
    ridge: Option<f64>,
) -> Result<()> {
    let cfg = *codebook.config();
    let n = cfg.n_levels;
    let eqs = NormalEquations::from_center_weights(n, &stats.s);
    let ridge = ridge.unwrap_or_else(|| eqs.default_ridge());
    let mut rhs = Vec::with_capacity(cfg.g);
    let mut anchors = Vec::with_capacity(cfg.g);
    for s in 0..cfg.g {
        let j = group * cfg.g + s;
        let mut b = vec![0.0; 2 * n];
        let mut anchor = vec![0.0; 2 * n];
        for l in 0..n {
            let r0 = &stats.row0[l * stats.width + 2 * s..l * stats.width + 2 * s + 2];
            let r1 = &stats.row1[l * stats.width + 2 * s..l * stats.width + 2 * s + 2];
            b[2 * l] = r0[0] + r1[1];
            b[2 * l + 1] = r0[1] - r1[0];
            let c = codebook.atom(round, j, l);
            anchor[2 * l] = c.x;
            anchor[2 * l + 1] = c.y;
        }
        rhs.push(b);
        anchors.push(anchor);
    }
    let solutions = eqs.solve(&rhs, ridge, &anchors)?;
    for (s, phi) in solutions.iter().enumerate() {
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "M-step produced non-finite atoms in round {round}, subspace {}",
                group * cfg.g + s
            )));
        }
        for (l, atom) in phi_to_atoms(phi).into_iter().enumerate() {
            *codebook.atom_mut(round, group * cfg.g + s, l) = atom;
        }
    }
    Ok(())
}

/// Re-seeds levels that attracted (almost) no weight so that center
/// `(l, l)` lands on a poorly fit point. Returns the number of levels
/// repaired.
fn repair_dead_levels(
    codebook: &mut KeyCodebook,
    round: usize,
    group: usize,
    points: &Mat,
    stats: &Stats,
) -> usize {
    let cfg = *codebook.config();
    let n = cfg.n_levels;
    let threshold = 1e-6 * points.rows() as f64 / (n * n) as f64;
    let dead: Vec<usize> = stats
        .level_usage()
        .iter()
        .enumerate()
        .filter(|(_, &u)| u < threshold)
        .map(|(l, _)| l)
        .collect();
    if dead.is_empty() {
        return 0;
    }
    let mut order: Vec<usize> = (0..points.rows()).collect();
    // worst first; index breaks ties
    order.sort_by(|&i, &j| stats.best[j].total_cmp(&stats.best[i]).then(i.cmp(&j)));
    for (&l, &i) in dead.iter().zip(order.iter()) {
        let p = points.row(i);
        for s in 0..cfg.g {
            let (u, v) = (p[2 * s], p[2 * s + 1]);
            // center (l, l) = (x − y, y + x)
            *codebook.atom_mut(round, group * cfg.g + s, l) = CommMat {
                x: 0.5 * (u + v),
                y: 0.5 * (v - u),
            };
        }
    }
    dead.len().min(points.rows())
}

fn median_initial_distance(
    codebook: &KeyCodebook,
    round: usize,
    group: usize,
    points: &Mat,
) -> f64 {
    let n = codebook.config().n_levels;
    let per_row = n * n;
    let rows = points.rows();
    let stride = (rows * per_row).div_ceil(MEDIAN_SAMPLE_CAP).max(1);
    let table = GroupTable::new(codebook, round, group);
    let mut scratch = Scratch::new(n);
    let mut all = Vec::with_capacity(rows.div_ceil(stride) * per_row);
    for i in (0..rows).step_by(stride) {
        table.distances(points.row(i), &mut scratch);
        all.extend_from_slice(&scratch.dist);
    }
    let mid = all.len() / 2;
    let (_, m, _) = all.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

fn fit_group(
    codebook: &mut KeyCodebook,
    round: usize,
    group: usize,
    points: &Mat,
    em: &EmConfig,
) -> Result<GroupReport> {
    let mut report = GroupReport::default();
    let t0 = match em.t0 {
        Some(t) => t,
        None => median_initial_distance(codebook, round, group, points),
    };
    report.t0 = t0;

    if t0 > 0.0 {
        let mut temp = t0;
        for _ in 0..em.soft_iters {
            let (stats, _) = e_step_stats(
                codebook,
                round,
                group,
                points,
                Assign::Soft(temp),
                em.search,
            );
            m_step_group(codebook, round, group, &stats, em.ridge)?;
            report.repaired_levels += repair_dead_levels(codebook, round, group, points, &stats);
            temp *= em.decay;
        }
    }

    let mut prev: Option<f64> = None;
    for _ in 0..em.hard_iters_max {
        let (stats, objective) =
            e_step_stats(codebook, round, group, points, Assign::Hard, em.search);
        if !objective.is_finite() {
            return Err(Error::Training(format!(
                "non-finite objective in round {round}, group {group}"
            )));
        }
        report.hard_objectives.push(objective);
        if let Some(p) = prev {
            if p <= 0.0 || (p - objective) <= em.tol * p {
                break;
            }
        }
        prev = Some(objective);
        m_step_group(codebook, round, group, &stats, em.ridge)?;
        report.repaired_levels += repair_dead_levels(codebook, round, group, points, &stats);
    }
    Ok(report)
}

/// Encodes every row against one round and subtracts the decoded centers.
fn subtract_round(
    residual: &mut Mat,
    codebook: &KeyCodebook,
    round: usize,
    search: CenterSearch,
) -> Result<Vec<(u16, u16)>> {
    let cfg = *codebook.config();
    let width = 2 * cfg.g;
    let mut codes = vec![(0u16, 0u16); residual.rows() * cfg.groups()];
    let mut center = vec![0.0; width];
    for group in 0..cfg.groups() {
        let points = residual.columns(group * width, width);
        let assign = e_step_assign_with(&points, codebook, round, group, search)?;
        for (i, (a, b)) in assign.into_iter().enumerate() {
            codes[i * cfg.groups() + group] = (a as u16, b as u16);
            codebook.write_center(round, group, a, b, &mut center);
            let row = &mut residual.row_mut(i)[group * width..(group + 1) * width];
            for (r, c) in row.iter_mut().zip(&center) {
                *r -= c;
            }
        }
    }
    Ok(codes)
}

pub fn encode_keys(keys: &Mat, codebook: &KeyCodebook) -> Result<KeyCodes> {
    encode_keys_with(keys, codebook, CenterSearch::Factorized)
}

/// Residual encoding: per round and group, pick the nearest center to the
/// current residual and subtract it.
pub fn encode_keys_with(
    keys: &Mat,
    codebook: &KeyCodebook,
    search: CenterSearch,
) -> Result<KeyCodes> {
    let cfg = *codebook.config();
    if keys.cols() != cfg.d {
        return invalid(format!(
            "keys have width {}, codebook d is {}",
            keys.cols(),
            cfg.d
        ));
    }
    let mut residual = keys.clone();
    let groups = cfg.groups();
    let mut pairs = vec![(0u16, 0u16); keys.rows() * cfg.rounds * groups];
    for round in 0..cfg.rounds {
        let codes = subtract_round(&mut residual, codebook, round, search)?;
        for i in 0..keys.rows() {
            let dst = (i * cfg.rounds + round) * groups;
            pairs[dst..dst + groups].copy_from_slice(&codes[i * groups..(i + 1) * groups]);
        }
    }
    KeyCodes::new(&cfg, keys.rows(), pairs)
}

/// Sum over rounds of the selected centers. The result carries no RoPE.
pub fn decode_keys(codes: &KeyCodes, codebook: &KeyCodebook) -> Result<Mat> {
    let cfg = *codebook.config();
    codes.check_config(&cfg)?;
    let mut out = Mat::zeros(codes.tokens(), cfg.d);
    for i in 0..codes.tokens() {
        decode_key_into(codes, codebook, i, out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn decode_key_into(
    codes: &KeyCodes,
    codebook: &KeyCodebook,
    token: usize,
    out: &mut [f64],
) {
    let cfg = codebook.config();
    out.iter_mut().for_each(|v| *v = 0.0);
    for round in 0..cfg.rounds {
        for group in 0..cfg.groups() {
            let (a, b) = codes.get(token, round, group);
            for s in 0..cfg.g {
                let j = group * cfg.g + s;
                let ca = codebook.atom(round, j, a);
                let cb = codebook.atom(round, j, b);
                out[2 * j] += ca.x - cb.y;
                out[2 * j + 1] += ca.y + cb.x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{apply_rope, mat2_mul, rope_block, RopeParams};
    use rand::Rng;

    fn random_codebook(cfg: KeyQuantConfig, seed: u64) -> KeyCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.rounds * cfg.subspaces() * cfg.n_levels;
        let atoms = (0..n)
            .map(|_| CommMat {
                x: rng.random_range(-1.0..1.0),
                y: rng.random_range(-1.0..1.0),
            })
            .collect();
        KeyCodebook::new(cfg, atoms).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(KeyQuantConfig::new(128, 64, 64, 11).is_ok());
        assert!(KeyQuantConfig::new(128, 48, 64, 1).is_err());
        assert!(KeyQuantConfig::new(128, 64, 3, 1).is_err());
        assert!(KeyQuantConfig::new(128, 64, 1, 1).is_err());
        assert!(KeyQuantConfig::new(128, 64, 4, 0).is_err());
        assert!(KeyQuantConfig::new(7, 1, 4, 1).is_err());
    }

    #[test]
    fn avg_bit_values() {
        assert_eq!(avg_bit_key(11, 64, 64), 1.03125);
        assert_eq!(avg_bit_key(8, 2, 8), 1.0);
        assert_eq!(avg_bit_key(1, 64, 64), 0.09375);
        assert_eq!(avg_bit_key(21, 64, 64), 21.0 * 6.0 / 64.0);
    }

    #[test]
    fn codebook_bytes() {
        assert_eq!(key_codebook_bytes(64, 11, 1024), 2_883_584);
        assert_eq!(key_codebook_bytes(64, 21, 1024), 5_505_024);
        assert_eq!(key_codebook_bytes(1, 1, 2), 8);
    }

    #[test]
    fn bits_per_token_matches_avg_bit() {
        let cfg = KeyQuantConfig::new(1024, 64, 64, 11).unwrap();
        assert_eq!(cfg.bits_per_token(), 1056);
        assert_eq!(cfg.bits_per_token() as f64, cfg.d as f64 * cfg.avg_bit());
    }

    #[test]
    fn t_matrix_single_level() {
        let t = build_t(1);
        assert_eq!((t.rows(), t.cols()), (2, 2));
        assert_eq!(t.row(0), &[1.0, -1.0]);
        assert_eq!(t.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn t_matrix_rows_have_two_nonzeros() {
        for n in [2, 3, 8] {
            let t = build_t(n);
            for r in 0..t.rows() {
                assert_eq!(t.row(r).iter().filter(|v| **v != 0.0).count(), 2);
            }
        }
    }

    #[test]
    fn t_matrix_reproduces_centers() {
        let phi = [0.3, -1.2, 2.0, 0.7];
        let t = build_t(2);
        let centers = crate::linalg::matmul(&t, &Mat::new(4, 1, phi.to_vec()).unwrap()).unwrap();
        let (x, y) = ([phi[0], phi[2]], [phi[1], phi[3]]);
        for a in 0..2 {
            for b in 0..2 {
                let r = 2 * (a * 2 + b);
                assert_eq!(centers.get(r, 0), x[a] - y[b]);
                assert_eq!(centers.get(r + 1, 0), y[a] + x[b]);
            }
        }
    }

    #[test]
    fn center_hand_expansion() {
        let cfg = KeyQuantConfig::new(2, 1, 2, 1).unwrap();
        let cb = KeyCodebook::new(
            cfg,
            vec![CommMat { x: 1.0, y: 0.0 }, CommMat { x: 0.0, y: 1.0 }],
        )
        .unwrap();
        assert_eq!(cluster_center(&cb, 0, 0, 0, 1).unwrap(), vec![0.0, 0.0]);
        let cb2 = KeyCodebook::new(
            cfg,
            vec![CommMat { x: 2.0, y: 0.5 }, CommMat { x: 0.0, y: 0.0 }],
        )
        .unwrap();
        assert_eq!(cluster_center(&cb2, 0, 0, 0, 0).unwrap(), vec![1.5, 2.5]);
        let zero = KeyCodebook::zeros(cfg).unwrap();
        assert_eq!(cluster_center(&zero, 0, 0, 1, 0).unwrap(), vec![0.0, 0.0]);
        assert!(cluster_center(&zero, 0, 0, 2, 0).is_err());
    }

    #[test]
    fn e_step_exact_center() {
        let cfg = KeyQuantConfig::new(8, 2, 8, 1).unwrap();
        let cb = random_codebook(cfg, 5);
        let p = cluster_center(&cb, 0, 1, 3, 5).unwrap();
        let pts = Mat::from_rows(&[p]).unwrap();
        assert_eq!(e_step_assign(&pts, &cb, 0, 1).unwrap(), vec![(3, 5)]);
    }

    #[test]
    fn e_step_ties_pick_lowest_index() {
        let cfg = KeyQuantConfig::new(2, 1, 2, 1).unwrap();
        let atom = CommMat { x: 0.5, y: 0.25 };
        let cb = KeyCodebook::new(cfg, vec![atom, atom]).unwrap();
        let pts = Mat::from_rows(&[[0.25, 0.75], [9.0, -3.0]]).unwrap();
        for search in [CenterSearch::BruteForce, CenterSearch::Factorized] {
            assert_eq!(
                e_step_assign_with(&pts, &cb, 0, 0, search).unwrap(),
                vec![(0, 0), (0, 0)]
            );
        }
    }

    #[test]
    fn e_step_matches_exhaustive_scan() {
        let cfg = KeyQuantConfig::new(16, 4, 4, 2).unwrap();
        let cb = random_codebook(cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = random_mat(&mut rng, 200, 8);
        for (round, group) in [(0, 0), (1, 1)] {
            let got = e_step_assign(&pts, &cb, round, group).unwrap();
            let fact =
                e_step_assign_with(&pts, &cb, round, group, CenterSearch::Factorized).unwrap();
            for i in 0..pts.rows() {
                let mut best = (f64::INFINITY, (0, 0));
                for a in 0..4 {
                    for b in 0..4 {
                        let c = cluster_center(&cb, round, group, a, b).unwrap();
                        let dist: f64 = pts
                            .row(i)
                            .iter()
                            .zip(&c)
                            .map(|(p, q)| (p - q).powi(2))
                            .sum();
                        if dist < best.0 {
                            best = (dist, (a, b));
                        }
                    }
                }
                assert_eq!(got[i], best.1);
                assert_eq!(fact[i], best.1);
            }
        }
    }

    #[test]
    fn soft_weight_cases() {
        let eq = Mat::from_rows(&[[2.0; 4]]).unwrap();
        let w = soft_weights(&eq, 0.7).unwrap();
        assert!(w.row(0).iter().all(|v| (v - 0.25).abs() < 1e-15));

        let sharp = soft_weights(&Mat::from_rows(&[[3.0, 1.0, 2.0]]).unwrap(), 1e-4).unwrap();
        assert_eq!(sharp.row(0), &[0.0, 1.0, 0.0]);

        let w = soft_weights(&Mat::from_rows(&[[0.0, 1.0]]).unwrap(), 1.0).unwrap();
        let e = (-1f64).exp();
        assert!((w.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);

        assert!(soft_weights(&eq, 0.0).is_err());
        assert!(soft_weights(&eq, -1.0).is_err());
    }

    #[test]
    fn m_step_single_level_recovers_mean() {
        let p = [0.8, -0.4];
        let points = Mat::from_rows(&[p, p, p]).unwrap();
        let weights = Mat::from_rows(&[[1.0], [1.0], [1.0]]).unwrap();
        let atoms = m_step(&points, &weights, &build_t(1), 0.0).unwrap();
        let c = atoms[0];
        assert!((c.x - c.y - p[0]).abs() < 1e-12);
        assert!((c.y + c.x - p[1]).abs() < 1e-12);
    }

    /// Stacks `W` and points into the explicit weighted least-squares
    /// problem and checks `m_step` against the statistics-based path used
    /// in training.
    #[test]
    fn m_step_matches_statistics_path() {
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let points = random_mat(&mut rng, 40, 2);
        let mut w = random_mat(&mut rng, 40, n * n);
        for r in 0..40 {
            let row = w.row_mut(r);
            row.iter_mut().for_each(|v| *v = v.abs());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let direct = m_step(&points, &w, &build_t(n), 0.0).unwrap();

        let mut stats = Stats::new(n, 2, 40);
        for i in 0..40 {
            let mut wa = vec![0.0; n];
            let mut wb = vec![0.0; n];
            for a in 0..n {
                for b in 0..n {
                    let v = w.get(i, a * n + b);
                    stats.s[a * n + b] += v;
                    wa[a] += v;
                    wb[b] += v;
                }
            }
            stats.accumulate(points.row(i), &wa, &wb);
        }
        let cfg = KeyQuantConfig {
            d: 2,
            g: 1,
            n_levels: n,
            rounds: 1,
        };
        let mut cb = KeyCodebook {
            config: cfg,
            atoms: vec![CommMat::default(); n],
        };
        m_step_group(&mut cb, 0, 0, &stats, Some(0.0)).unwrap();
        for (d, s) in direct.iter().zip(cb.atoms()) {
            assert!((d.x - s.x).abs() < 1e-10 && (d.y - s.y).abs() < 1e-10);
        }
    }

    #[test]
    fn m_step_ridge_perturbation_is_small() {
        let n = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points = random_mat(&mut rng, 100, 2);
        let w = soft_weights(&random_mat(&mut rng, 100, n * n), 0.5).unwrap();
        let a = m_step(&points, &w, &build_t(n), 0.0).unwrap();
        let b = m_step(&points, &w, &build_t(n), 1e-8).unwrap();
        let norm: f64 = a.iter().map(|c| c.x * c.x + c.y * c.y).sum::<f64>().sqrt();
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p.x - q.x).powi(2) + (p.y - q.y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * norm);
    }

    #[test]
    fn m_step_reports_singular_system() {
        let points = Mat::from_rows(&[[1.0, 1.0]]).unwrap();
        let weights = Mat::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            m_step(&points, &weights, &build_t(2), 0.0),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn decode_hand_expansion() {
        let cfg = KeyQuantConfig::new(2, 1, 2, 1).unwrap();
        let atoms = vec![CommMat { x: 1.5, y: -2.0 }, CommMat { x: 0.25, y: 3.0 }];
        let cb = KeyCodebook::new(cfg, atoms.clone()).unwrap();
        let codes = KeyCodes::new(&cfg, 2, vec![(0, 1), (1, 1)]).unwrap();
        let out = decode_keys(&codes, &cb).unwrap();
        assert_eq!(out.row(0), &[1.5 - 3.0, -2.0 + 0.25]);
        assert_eq!(out.row(1), &[0.25 - 3.0, 3.0 + 0.25]);
        let zero = decode_keys(&codes, &KeyCodebook::zeros(cfg).unwrap()).unwrap();
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_rejects_bad_codes() {
        let cfg = KeyQuantConfig::new(2, 1, 2, 1).unwrap();
        assert!(KeyCodes::new(&cfg, 1, vec![(2, 0)]).is_err());
        let other = KeyQuantConfig::new(4, 1, 2, 1).unwrap();
        let codes = KeyCodes::new(&other, 1, vec![(0, 0), (1, 1)]).unwrap();
        assert!(decode_keys(&codes, &KeyCodebook::zeros(cfg).unwrap()).is_err());
    }

    #[test]
    fn encode_representable_keys_roundtrip() {
        let cfg = KeyQuantConfig::new(16, 2, 8, 1).unwrap();
        let cb = random_codebook(cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pairs: Vec<(u16, u16)> = (0..50 * cfg.groups())
            .map(|_| (rng.random_range(0..8), rng.random_range(0..8)))
            .collect();
        let codes = KeyCodes::new(&cfg, 50, pairs).unwrap();
        let keys = decode_keys(&codes, &cb).unwrap();
        let re = encode_keys(&keys, &cb).unwrap();
        assert_eq!(re, codes);
        let back = decode_keys(&re, &cb).unwrap();
        for (a, b) in back.as_slice().iter().zip(keys.as_slice()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn encode_is_idempotent_single_round() {
        let cfg = KeyQuantConfig::new(16, 4, 4, 1).unwrap();
        let cb = random_codebook(cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let keys = random_mat(&mut rng, 80, 16);
        let once = encode_keys(&keys, &cb).unwrap();
        let twice = encode_keys(&decode_keys(&once, &cb).unwrap(), &cb).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn encode_matches_brute_force_joint_search() {
        let cfg = KeyQuantConfig::new(16, 4, 4, 3).unwrap();
        let cb = random_codebook(cfg, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let keys = random_mat(&mut rng, 60, 16);
        let fast = encode_keys(&keys, &cb).unwrap();
        let brute = encode_keys_with(&keys, &cb, CenterSearch::BruteForce).unwrap();
        assert_eq!(fast, brute);
        // Independent residual loop over all 16 (a, b) per group.
        for i in 0..keys.rows() {
            let mut res = keys.row(i).to_vec();
            for r in 0..cfg.rounds {
                for grp in 0..cfg.groups() {
                    let span = grp * 8..(grp + 1) * 8;
                    let mut best = (f64::INFINITY, (0, 0));
                    for a in 0..4 {
                        for b in 0..4 {
                            let c = cluster_center(&cb, r, grp, a, b).unwrap();
                            let dist: f64 = res[span.clone()]
                                .iter()
                                .zip(&c)
                                .map(|(p, q)| (p - q).powi(2))
                                .sum();
                            if dist < best.0 {
                                best = (dist, (a, b));
                            }
                        }
                    }
                    assert_eq!(fast.get(i, r, grp), best.1);
                    let c = cluster_center(&cb, r, grp, best.1 .0, best.1 .1).unwrap();
                    for (v, cv) in res[span].iter_mut().zip(&c) {
                        *v -= cv;
                    }
                }
            }
        }
    }

    #[test]
    fn decode_commutes_with_rope() {
        // apply_rope(decode(code), m) == Σ row-selections of (atom · R_m)
        let cfg = KeyQuantConfig::new(16, 2, 4, 3).unwrap();
        let cb = random_codebook(cfg, 51);
        let rope = RopeParams::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let pairs: Vec<(u16, u16)> = (0..cfg.rounds * cfg.groups())
            .map(|_| (rng.random_range(0..4), rng.random_range(0..4)))
            .collect();
        let codes = KeyCodes::new(&cfg, 1, pairs).unwrap();
        let decoded = decode_keys(&codes, &cb).unwrap();
        for m in [0, 1, 17, 4000] {
            let lhs = apply_rope(&rope, decoded.row(0), m).unwrap();
            let mut rhs = vec![0.0; 16];
            for r in 0..cfg.rounds {
                for grp in 0..cfg.groups() {
                    let (a, b) = codes.get(0, r, grp);
                    for s in 0..cfg.g {
                        let j = grp * cfg.g + s;
                        let rot = rope_block(&rope, m, j).unwrap();
                        let ra = mat2_mul(rot, cb.atom(r, j, a).to_mat2());
                        let rb = mat2_mul(rot, cb.atom(r, j, b).to_mat2());
                        rhs[2 * j] += ra[0][0] + rb[1][0];
                        rhs[2 * j + 1] += ra[0][1] + rb[1][1];
                    }
                }
            }
            let norm: f64 = lhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (x, y) in lhs.iter().zip(&rhs) {
                assert!((x - y).abs() <= 1e-10 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn serialization_roundtrip_and_corruption() {
        let cfg = KeyQuantConfig::new(8, 2, 4, 2).unwrap();
        let cb = random_codebook(cfg, 61);
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"CVQK");
        assert_eq!(bytes.len(), 24 + 2 * 4 * 4 * 8);
        let back = KeyCodebook::from_bytes(&bytes).unwrap();
        for (a, b) in back.atoms().iter().zip(cb.atoms()) {
            assert_eq!(a.x, b.x as f32 as f64);
            assert_eq!(a.y, b.y as f32 as f64);
        }
        assert!(matches!(
            KeyCodebook::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(KeyCodebook::from_bytes(&bad).is_err());
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let cfg = KeyQuantConfig::new(4, 1, 2, 1).unwrap();
        let em = EmConfig::default();
        assert!(matches!(
            train_key_codebook(&Mat::zeros(2, 4), cfg, &em),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            train_key_codebook(&Mat::zeros(20, 4), cfg, &em),
            Err(Error::Training(_))
        ));
        let bad_em = EmConfig {
            decay: 1.0,
            ..EmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(train_key_codebook(&random_mat(&mut rng, 20, 4), cfg, &bad_em).is_err());
    }

    #[test]
    fn hard_objective_is_monotone_and_roundtrip_matches() {
        let cfg = KeyQuantConfig::new(16, 4, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let calib = random_mat(&mut rng, 400, 16);
        let em = EmConfig {
            seed: 3,
            ..EmConfig::default()
        };
        let (cb, report) = train_key_codebook_with_report(&calib, cfg, &em).unwrap();
        for round in &report.rounds {
            for g in &round.groups {
                assert!(!g.hard_objectives.is_empty());
                for w in g.hard_objectives.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
                }
            }
        }
        let mses: Vec<f64> = report.rounds.iter().map(|r| r.residual_mse).collect();
        assert!(mses.windows(2).all(|w| w[1] <= w[0]));
        let codes = encode_keys(&calib, &cb).unwrap();
        let recon = decode_keys(&codes, &cb).unwrap();
        let rt = crate::linalg::mse(&calib, &recon).unwrap();
        assert!(
            rt <= report.final_mse + 1e-9,
            "{rt} vs {}",
            report.final_mse
        );
    }
}
