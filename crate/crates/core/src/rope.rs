//! Rotary position embedding in the interleaved-pair basis, and the 2×2
//! matrices of the form `[[x, y], [-y, x]]` that commute with it.
//!
//! Vectors are rows and rotations act from the right (`v ← v·R`). Pairs are
//! adjacent elements `(v[2j], v[2j+1])`; many transformer codebases rotate
//! the two halves of the vector instead, which is a different basis.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// A 2×2 matrix, `m[row][col]`.
pub type Mat2 = [[f64; 2]; 2];

/// Angle `base^(-2(i-1)/d)` for the 1-based subspace index `i`.
pub fn theta(i: usize, d: usize) -> Result<f64> {
    theta_with_base(i, d, DEFAULT_BASE)
}

pub fn theta_with_base(i: usize, d: usize, base: f64) -> Result<f64> {
    if d == 0 || d % 2 != 0 {
        return invalid(format!("rope dimension must be even and positive, got {d}"));
    }
    if i == 0 || i > d / 2 {
        return invalid(format!("theta index {i} outside 1..={}", d / 2));
    }
    Ok(base.powf(-2.0 * (i - 1) as f64 / d as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    d: usize,
    base: f64,
    thetas: Vec<f64>,
}

impl RopeParams {
    pub fn new(d: usize) -> Result<Self> {
        Self::with_base(d, DEFAULT_BASE)
    }

    pub fn with_base(d: usize, base: f64) -> Result<Self> {
        if !(base.is_finite() && base > 1.0) {
            return invalid(format!("rope base must be > 1, got {base}"));
        }
        let thetas = (1..=d / 2)
            .map(|i| theta_with_base(i, d, base))
            .collect::<Result<Vec<_>>>()?;
        if thetas.is_empty() {
            return invalid(format!("rope dimension must be even and positive, got {d}"));
        }
        Ok(Self { d, base, thetas })
    }

    /// Arbitrary per-subspace angles. Used for synthetic checks where a
    /// specific angle (e.g. π/2) is wanted.
    pub fn from_thetas(thetas: Vec<f64>) -> Result<Self> {
        if thetas.is_empty() || thetas.iter().any(|t| !t.is_finite()) {
            return invalid("thetas must be non-empty and finite");
        }
        Ok(Self {
            d: thetas.len() * 2,
            base: f64::NAN,
            thetas,
        })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }
}

/// Rotation block for position `m` in subspace `j` (0-based, angle
/// `thetas[j]`): `[[cos mθ, -sin mθ], [sin mθ, cos mθ]]`.
pub fn rope_block(params: &RopeParams, m: usize, j: usize) -> Result<Mat2> {
    let Some(&th) = params.thetas.get(j) else {
        return invalid(format!("subspace {j} outside 0..{}", params.thetas.len()));
    };
    Ok(rotation(m as f64 * th))
}

pub fn rotation(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    [[c, -s], [s, c]]
}

/// `v·R_m` applied pairwise.
pub fn apply_rope(params: &RopeParams, v: &[f64], m: usize) -> Result<Vec<f64>> {
    if v.len() != params.d {
        return invalid(format!("vector length {} != rope d {}", v.len(), params.d));
    }
    let mut out = vec![0.0; v.len()];
    for (j, &th) in params.thetas.iter().enumerate() {
        let (s, c) = (m as f64 * th).sin_cos();
        let (x, y) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = x * c + y * s;
        out[2 * j + 1] = -x * s + y * c;
    }
    Ok(out)
}

/// Precomputed `cos(m θ_j)`, `sin(m θ_j)` for positions `0..positions`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(params: &RopeParams, positions: usize) -> Self {
        let half = params.thetas.len();
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for m in 0..positions {
            for &th in &params.thetas {
                let (s, c) = (m as f64 * th).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { half, cos, sin }
    }

    pub fn positions(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }

    #[inline]
    pub fn cos(&self, m: usize) -> &[f64] {
        &self.cos[m * self.half..(m + 1) * self.half]
    }

    #[inline]
    pub fn sin(&self, m: usize) -> &[f64] {
        &self.sin[m * self.half..(m + 1) * self.half]
    }
}

/// `[[x, y], [-y, x]]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommMat {
    pub x: f64,
    pub y: f64,
}

impl CommMat {
    pub fn to_mat2(self) -> Mat2 {
        [[self.x, self.y], [-self.y, self.x]]
    }

    /// Recovers `(x, y)` if `m` has the commutative structure within `tol`.
    pub fn from_mat2(m: Mat2, tol: f64) -> Option<Self> {
        let ok = (m[0][0] - m[1][1]).abs() <= tol && (m[0][1] + m[1][0]).abs() <= tol;
        ok.then_some(Self {
            x: 0.5 * (m[0][0] + m[1][1]),
            y: 0.5 * (m[0][1] - m[1][0]),
        })
    }

    pub fn frobenius(self) -> f64 {
        (2.0 * (self.x * self.x + self.y * self.y)).sqrt()
    }
}

impl std::ops::Add for CommMat {
    type Output = CommMat;
    fn add(self, o: CommMat) -> CommMat {
        CommMat {
            x: self.x + o.x,
            y: self.y + o.y,
        }
    }
}

pub fn comm_mat(x: f64, y: f64) -> Result<CommMat> {
    if !(x.is_finite() && y.is_finite()) {
        return invalid(format!("comm_mat entries must be finite, got ({x}, {y})"));
    }
    Ok(CommMat { x, y })
}

pub fn mat2_mul(a: Mat2, b: Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn frobenius(m: Mat2) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖r·c − c·r‖_F`. `r` is expected to be a rotation.
pub fn commute_residual(c: Mat2, r: Mat2) -> f64 {
    let rc = mat2_mul(r, c);
    let cr = mat2_mul(c, r);
    let mut diff = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            diff[i][j] = rc[i][j] - cr[i][j];
        }
    }
    frobenius(diff)
}
