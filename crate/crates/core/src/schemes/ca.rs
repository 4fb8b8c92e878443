//! Compressed analog transport. Devices error-compensate, keep the top-k
//! gradient entries, push them through a shared random projection into a
//! vector of length `s̃ = 2sN`, and send it over `N` analog slots with
//! threshold channel inversion. The server rebuilds the scaled observation
//! vector and inverts the projection with AMP; an all-zero observation
//! leaves the model untouched.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::ChannelRealization;
use crate::compress::top_k_indices;
use crate::learner::{adam_step, AdamState, ModelParams};
use crate::power::PowerLedger;
use crate::project::{amp_recover, AmpConfig, ProjectionMatrix};
use crate::{Error, Result};

use super::{pack_complex_slices, transmit_slot, AnalogParams, StepReport};

/// How the sparsified gradients travel and get recovered.
pub enum CaTransport {
    /// Random Gaussian projection at the devices, AMP at the server.
    Projected {
        matrix: ProjectionMatrix,
        amp: AmpConfig,
    },
    /// No projection and no recovery: estimates are read out coordinate by
    /// coordinate. With `k = d` and enough slots for the whole gradient this
    /// reproduces the error-compensated entry-wise scheme.
    Direct,
}

pub struct CaDsgd {
    transport: CaTransport,
    params: AnalogParams,
    buffers: Vec<Vec<f64>>,
    sparsity: usize,
    n_slots: usize,
    dim: usize,
    subchannels: usize,
}

impl CaDsgd {
    pub fn new(
        transport: CaTransport,
        params: AnalogParams,
        devices: usize,
        dim: usize,
        subchannels: usize,
        n_slots: usize,
        sparsity: usize,
    ) -> Result<Self> {
        let s_tilde = 2 * subchannels * n_slots;
        match &transport {
            CaTransport::Projected { matrix, .. } => {
                if matrix.rows() != s_tilde || matrix.cols() != dim {
                    return Err(Error::Config(format!(
                        "projection is {}×{}, transport needs {s_tilde}×{dim}",
                        matrix.rows(),
                        matrix.cols()
                    )));
                }
                if sparsity > s_tilde {
                    return Err(Error::Config(format!(
                        "sparsity {sparsity} exceeds projected dimension {s_tilde}"
                    )));
                }
            }
            CaTransport::Direct => {
                if s_tilde < dim {
                    return Err(Error::Config(format!(
                        "direct transport needs 2sN >= d, got {s_tilde} < {dim}"
                    )));
                }
            }
        }
        if sparsity == 0 || sparsity > dim {
            return Err(Error::Config(format!(
                "sparsity {sparsity} out of range for dimension {dim}"
            )));
        }
        Ok(Self {
            transport,
            params,
            buffers: vec![vec![0.0; dim]; devices],
            sparsity,
            n_slots,
            dim,
            subchannels,
        })
    }

    pub fn slots_per_iteration(&self) -> usize {
        self.n_slots
    }

    pub fn buffer(&self, device: usize) -> &[f64] {
        &self.buffers[device]
    }

    pub fn step_with(
        &mut self,
        model: &mut ModelParams,
        adam: &mut AdamState,
        grads: &[Vec<f64>],
        reals: &[ChannelRealization],
        mut noise_rng: Option<&mut ChaCha8Rng>,
        ledger: &mut PowerLedger,
    ) -> Result<StepReport> {
        if reals.len() != self.n_slots {
            return Err(Error::ShapeMismatch(format!(
                "compressed analog step needs {} realizations, got {}",
                self.n_slots,
                reals.len()
            )));
        }
        let s = self.subchannels;
        let s_tilde = 2 * s * self.n_slots;
        let k = self.sparsity;

        // Device side: error compensation, top-k, buffer update, projection.
        let projected: Vec<Vec<f64>> = self
            .buffers
            .par_iter_mut()
            .zip(grads.par_iter())
            .map(|(buffer, grad)| -> Result<Vec<f64>> {
                let compensated: Vec<f64> =
                    grad.iter().zip(buffer.iter()).map(|(g, b)| g + b).collect();
                let kept = top_k_indices(&compensated, k);
                let mut sparse = vec![0.0f64; compensated.len()];
                for &i in &kept {
                    sparse[i] = compensated[i];
                }
                for i in 0..buffer.len() {
                    buffer[i] = compensated[i] - sparse[i];
                }
                match &self.transport {
                    CaTransport::Projected { matrix, .. } => matrix.project(&sparse),
                    CaTransport::Direct => {
                        let mut padded = sparse;
                        padded.resize(s_tilde, 0.0);
                        Ok(padded)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;

        // On air: N slots of threshold inversion and superposition.
        let sliced: Vec<Vec<Vec<Complex64>>> = projected
            .iter()
            .map(|g| pack_complex_slices(g, s, self.n_slots))
            .collect();
        let mut observation = vec![0.0f64; s_tilde];
        let mut energy_total = 0.0;
        for (n, real) in reals.iter().enumerate() {
            let signals: Vec<Vec<Complex64>> =
                sliced.iter().map(|slices| slices[n].clone()).collect();
            let out = transmit_slot(&signals, real, &self.params, noise_rng.as_deref_mut())?;
            for i in 0..s {
                observation[2 * n * s + i] = out.estimates[i].re;
                observation[(2 * n + 1) * s + i] = out.estimates[i].im;
            }
            for (dev, &e) in out.energy.iter().enumerate() {
                ledger.record(dev, e);
                energy_total += e;
            }
            ledger.advance(1);
        }

        // Server side: nothing received means no update at all.
        if observation.iter().all(|&v| v == 0.0) {
            return Ok(StepReport {
                slots: self.n_slots as u32,
                bits_sent: 0.0,
                energy: energy_total,
                selected_device: None,
                updated: false,
                estimate: None,
            });
        }
        let estimate = match &self.transport {
            CaTransport::Projected { matrix, amp } => amp_recover(matrix, &observation, amp)?,
            CaTransport::Direct => observation[..self.dim].to_vec(),
        };
        adam_step(model, adam, &estimate)?;
        Ok(StepReport {
            slots: self.n_slots as u32,
            bits_sent: 0.0,
            energy: energy_total,
            selected_device: None,
            updated: true,
            estimate: Some(estimate),
        })
    }
}
