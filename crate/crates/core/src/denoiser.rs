//! The interface every denoiser in the pipeline implements.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// One joint denoiser evaluation over a window of frames.
///
/// Windows are `d x n` matrices: one column per frame, oldest frame first.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub latents: &'a DMatrix<f64>,
    /// Per-frame timesteps, `latents.ncols()` entries.
    pub timesteps: &'a [usize],
    /// `c x n` conditioning, one column per frame. `c` may be zero.
    pub cond: &'a DMatrix<f64>,
    pub reference: Option<&'a DVector<f64>>,
}

/// A map from a noisy window to an estimate of its clean frames.
///
/// What "estimate" means is up to the implementation: a posterior mean for
/// solver-style samplers or a consistency function for predict-and-renoise
/// sampling.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>>;

    fn latent_dim(&self) -> usize;

    fn cond_dim(&self) -> usize {
        0
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        (**self).denoise(req)
    }
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        (**self).denoise(req)
    }
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
}

pub(crate) fn check_request(req: &DenoiseRequest<'_>, dim: usize, cond_dim: usize) -> Result<()> {
    use crate::error::Error;
    let n = req.latents.ncols();
    if req.latents.nrows() != dim {
        return Err(Error::shape(format!("latent dim {} != {}", req.latents.nrows(), dim)));
    }
    if req.timesteps.len() != n {
        return Err(Error::shape(format!("{} timesteps for {} frames", req.timesteps.len(), n)));
    }
    if req.cond.ncols() != n || req.cond.nrows() != cond_dim {
        return Err(Error::shape(format!(
            "conditioning is {}x{}, expected {}x{}",
            req.cond.nrows(),
            req.cond.ncols(),
            cond_dim,
            n
        )));
    }
    if let Some(r) = req.reference {
        if r.len() != dim {
            return Err(Error::shape(format!("reference dim {} != {}", r.len(), dim)));
        }
    }
    Ok(())
}
