//! A one-layer temporal-attention denoiser with hand-written gradients.
//!
//! Each frame is encoded to a hidden vector, conditioning and timestep
//! embeddings are added, frames attend to each other (and to an optional
//! reference hidden state), a feed-forward block follows, and a linear head
//! predicts `v`.

mod checkpoint;
mod model;
mod optim;
mod params;
mod train;

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorShape};
pub use model::{
    attention_weights, encode_reference, forward, forward_with_hidden, loss_and_grad, position_encoding,
    temporal_attention, timestep_features, vjp, AttentionMask, Sample,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ToyNetDims, ToyNetParams, PARAM_NAMES};
pub use train::{
    denoiser_v_mse, make_sample, train_temporal_adaptive, validation_set, GaussianSequences, LossRecord,
    NoiseLayout, SequenceSampler, TrainConfig,
};

use crate::denoiser::{check_request, DenoiseRequest, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;

/// Parameters plus the attention mask they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub params: ToyNetParams,
    pub mask: AttentionMask,
}

impl ToyNet {
    pub fn new(params: ToyNetParams, mask: AttentionMask) -> Self {
        Self { params, mask }
    }

    pub fn dims(&self) -> ToyNetDims {
        self.params.dims
    }

    /// Clean estimate `sqrt(ab) x_t - sqrt(1 - ab) v` for every frame.
    pub fn predict_x0(&self, req: &DenoiseRequest<'_>, schedule: &NoiseSchedule) -> Result<DMatrix<f64>> {
        let v = forward(&self.params, req.latents, req.timesteps, req.cond, req.reference, self.mask)?;
        v_to_x0(req.latents, &v, req.timesteps, schedule)
    }
}

pub(crate) fn v_to_x0(
    xt: &DMatrix<f64>,
    v: &DMatrix<f64>,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<DMatrix<f64>> {
    let mut out = v.clone();
    for (f, &t) in timesteps.iter().enumerate() {
        let (a, s) = schedule.coefficients(t)?;
        for k in 0..xt.nrows() {
            out[(k, f)] = a * xt[(k, f)] - s * v[(k, f)];
        }
    }
    Ok(out)
}

/// The toy net behind the [`Denoiser`] interface, returning clean estimates.
///
/// The reference hidden state is encoded once and reused until a different
/// reference arrives, unless `recompute_reference` is set.
pub struct ToyNetDenoiser {
    net: ToyNet,
    schedule: Arc<NoiseSchedule>,
    pub recompute_reference: bool,
    reference_cache: Mutex<Option<(DVector<f64>, DVector<f64>)>>,
    encodes: Mutex<u64>,
}

impl ToyNetDenoiser {
    pub fn new(net: ToyNet, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            net,
            schedule,
            recompute_reference: false,
            reference_cache: Mutex::new(None),
            encodes: Mutex::new(0),
        }
    }

    pub fn net(&self) -> &ToyNet {
        &self.net
    }

    /// How many times the reference has been run through the encoder.
    pub fn reference_encodes(&self) -> u64 {
        *self.encodes.lock().expect("counter poisoned")
    }

    fn reference_hidden(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut cache = self.reference_cache.lock().expect("reference cache poisoned");
        if !self.recompute_reference {
            if let Some((key, z)) = cache.as_ref() {
                if key == r {
                    return z.clone();
                }
            }
        }
        *self.encodes.lock().expect("counter poisoned") += 1;
        let z = encode_reference(&self.net.params, r);
        *cache = Some((r.clone(), z.clone()));
        z
    }
}

impl Denoiser for ToyNetDenoiser {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        let dims = self.net.dims();
        check_request(req, dims.latent, dims.cond)?;
        let z = req.reference.map(|r| self.reference_hidden(r));
        let v = forward_with_hidden(&self.net.params, req.latents, req.timesteps, req.cond, z.as_ref(), self.net.mask)?;
        v_to_x0(req.latents, &v, req.timesteps, &self.schedule)
    }

    fn latent_dim(&self) -> usize {
        self.net.dims().latent
    }

    fn cond_dim(&self) -> usize {
        self.net.dims().cond
    }
}
