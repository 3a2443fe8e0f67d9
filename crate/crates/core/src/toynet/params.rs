use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyNetDims {
    /// Latent frame dimension.
    pub latent: usize,
    /// Conditioning dimension (0 for none).
    pub cond: usize,
    /// Hidden width.
    pub hidden: usize,
    /// Feed-forward width.
    pub ff: usize,
    /// Sinusoidal timestep features fed to the timestep projection (even).
    pub temb: usize,
    /// Largest timestep; sets the slowest timestep frequency.
    pub t_max: usize,
}

impl Default for ToyNetDims {
    fn default() -> Self {
        Self { latent: 8, cond: 0, hidden: 32, ff: 64, temb: 16, t_max: 1000 }
    }
}

impl ToyNetDims {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.ff == 0 {
            return Err(Error::config("latent, hidden and ff widths must be positive"));
        }
        if self.t_max == 0 {
            return Err(Error::config("t_max must be positive"));
        }
        if self.temb == 0 || self.temb % 2 != 0 {
            return Err(Error::config(format!("timestep feature width must be even and positive, got {}", self.temb)));
        }
        Ok(())
    }
}

/// Weights of the toy denoiser. Biases are stored as single-column matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetParams {
    pub dims: ToyNetDims,
    pub w_in: DMatrix<f64>,
    pub b_in: DMatrix<f64>,
    pub w_cond: DMatrix<f64>,
    pub w_temb: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub w_f1: DMatrix<f64>,
    pub b_f1: DMatrix<f64>,
    pub w_f2: DMatrix<f64>,
    pub b_f2: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DMatrix<f64>,
}

pub const PARAM_NAMES: [&str; 14] = [
    "w_in", "b_in", "w_cond", "w_temb", "w_q", "w_k", "w_v", "w_o", "w_f1", "b_f1", "w_f2", "b_f2", "w_out", "b_out",
];

impl ToyNetParams {
    pub fn zeros(dims: ToyNetDims) -> Self {
        let ToyNetDims { latent: d, cond: c, hidden: h, ff: f, temb: e, .. } = dims;
        let z = DMatrix::zeros;
        Self {
            dims,
            w_in: z(h, d),
            b_in: z(h, 1),
            w_cond: z(h, c),
            w_temb: z(h, e),
            w_q: z(h, h),
            w_k: z(h, h),
            w_v: z(h, h),
            w_o: z(h, h),
            w_f1: z(f, h),
            b_f1: z(f, 1),
            w_f2: z(h, f),
            b_f2: z(h, 1),
            w_out: z(d, h),
            b_out: z(d, 1),
        }
    }

    /// Scaled Gaussian init: weights `N(0, 1 / fan_in)`, biases zero. The
    /// residual branches start small so the network begins near a linear map.
    pub fn init<R: Rng + ?Sized>(dims: ToyNetDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        let mut fill = |m: &mut DMatrix<f64>, scale: f64| {
            let fan_in = m.ncols().max(1) as f64;
            let n = Normal::new(0.0, scale / fan_in.sqrt()).expect("finite std");
            m.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        fill(&mut p.w_in, 1.0);
        fill(&mut p.w_cond, 1.0);
        fill(&mut p.w_temb, 1.0);
        fill(&mut p.w_q, 1.0);
        fill(&mut p.w_k, 1.0);
        fill(&mut p.w_v, 1.0);
        fill(&mut p.w_o, 0.5);
        fill(&mut p.w_f1, 1.0);
        fill(&mut p.w_f2, 0.5);
        fill(&mut p.w_out, 1.0);
        Ok(p)
    }

    pub fn tensors(&self) -> [&DMatrix<f64>; 14] {
        [
            &self.w_in, &self.b_in, &self.w_cond, &self.w_temb, &self.w_q, &self.w_k, &self.w_v, &self.w_o,
            &self.w_f1, &self.b_f1, &self.w_f2, &self.b_f2, &self.w_out, &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 14] {
        [
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_cond,
            &mut self.w_temb,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_f1,
            &mut self.b_f1,
            &mut self.w_f2,
            &mut self.b_f2,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// All weights in `PARAM_NAMES` order, each tensor column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut at = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn from_flat(dims: ToyNetDims, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(dims);
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}
