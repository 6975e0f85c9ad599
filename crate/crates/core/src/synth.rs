//! Seeded low-rank calibration data and the `CVQT` tensor file.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{corrupt, invalid, Result};
use crate::io::{put_u32, put_u64, write_atomic, ByteReader};
use crate::linalg::Mat;

pub const CTF_MAGIC: &[u8; 4] = b"CVQT";
pub const CTF_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub seed: u64,
    /// With `false` the latent is used as-is (requires `rank == d`).
    pub mixing: bool,
}

/// `x = z·A + ε` with `z ~ N(0, I_rank)`, `A` a seeded `rank × d` Gaussian
/// mixing matrix scaled so each coordinate has unit signal variance on
/// average, and isotropic noise at 1% of the signal standard deviation.
pub fn gen_synth(spec: &SynthSpec) -> Result<Mat> {
    let SynthSpec {
        n,
        d,
        rank,
        seed,
        mixing,
    } = *spec;
    if d == 0 || rank == 0 || rank > d {
        return invalid(format!("rank must lie in 1..={d}, got {rank}"));
    }
    if !mixing && rank != d {
        return invalid("unmixed data requires rank == d");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = if mixing {
        let scale = 1.0 / (rank as f64).sqrt();
        let data = (0..rank * d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect();
        Mat::new(rank, d, data)?
    } else {
        Mat::identity(d)
    };
    let signal_var = mix.as_slice().iter().map(|v| v * v).sum::<f64>() / d as f64;
    let noise_sigma = 0.01 * signal_var.sqrt();

    let mut out = Mat::zeros(n, d);
    let mut z = vec![0.0; rank];
    for i in 0..n {
        z.iter_mut()
            .for_each(|v| *v = StandardNormal.sample(&mut rng));
        let row = out.row_mut(i);
        for (k, &zk) in z.iter().enumerate() {
            for (o, &a) in row.iter_mut().zip(mix.row(k)) {
                *o += zk * a;
            }
        }
        for o in row.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *o += noise_sigma * e;
        }
    }
    Ok(out)
}

/// A dense f32 tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CtfFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl CtfFile {
    pub fn from_mat(m: &Mat) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().iter().map(|v| *v as f32).collect(),
        }
    }

    /// Interprets a rank-2 tensor as a matrix.
    pub fn to_mat(&self) -> Result<Mat> {
        if self.dims.len() != 2 {
            return invalid(format!(
                "expected a 2-d tensor, got {} dims",
                self.dims.len()
            ));
        }
        Mat::new(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.data.iter().map(|v| f64::from(*v)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.dims.len() + 4 * self.data.len());
        buf.extend_from_slice(CTF_MAGIC);
        put_u32(&mut buf, CTF_VERSION);
        put_u32(&mut buf, self.dims.len() as u32);
        for &dim in &self.dims {
            put_u64(&mut buf, dim);
        }
        put_u32(&mut buf, DTYPE_F32);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CTF_MAGIC)?;
        let version = r.u32()?;
        if version != CTF_VERSION {
            return corrupt(format!("unsupported tensor file version {version}"));
        }
        let ndims = r.u32()? as usize;
        let dims = r.u64_vec(ndims)?;
        let dtype = r.u32()?;
        if dtype != DTYPE_F32 {
            return corrupt(format!("unsupported dtype code {dtype}"));
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| crate::Error::Corrupt("tensor dims overflow".into()))?;
        let payload = r.take(count as usize * 4)?;
        r.finish()?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
