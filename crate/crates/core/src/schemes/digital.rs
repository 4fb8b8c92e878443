//! Digital transport: the uplink is an error-free bit pipe whose per-slot
//! budget is the waterfilling capacity bound, so whatever the codec emits
//! within budget arrives intact.

use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelRealization;
use crate::compress::{
    error_feedback_update, max_q_for_budget, qsgd_bits, qsgd_encode, signsgd_bits, signsgd_encode,
    sparse_binary_bits, sparse_binary_encode,
};
use crate::learner::{adam_step, AdamState, ModelParams};
use crate::power::{capacity_bound, PowerLedger};
use crate::{Error, Result};

use super::{select_device, StepReport};

/// Gradient codec used on the digital pipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigitalCodec {
    /// Sparse binary compression: one-sided support at a shared magnitude.
    SparseBinary,
    /// QSGD with `2^level_bits` stochastic quantization levels.
    Qsgd { level_bits: u32 },
    /// Sign-only transmission over the top-q support.
    SignSgd,
}

impl DigitalCodec {
    fn bits(&self, dim: usize, q: usize) -> f64 {
        match self {
            DigitalCodec::SparseBinary => sparse_binary_bits(dim, q).unwrap_or(f64::INFINITY),
            DigitalCodec::Qsgd { level_bits } => {
                qsgd_bits(dim, q, *level_bits).unwrap_or(f64::INFINITY)
            }
            DigitalCodec::SignSgd => signsgd_bits(dim, q).unwrap_or(f64::INFINITY),
        }
    }

    fn encode_decode(&self, v: &[f64], q: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            DigitalCodec::SparseBinary => Ok(sparse_binary_encode(v, q)?.decode()),
            DigitalCodec::Qsgd { level_bits } => Ok(qsgd_encode(v, q, *level_bits, rng)?.decode()),
            DigitalCodec::SignSgd => Ok(signsgd_encode(v, q)?.decode()),
        }
    }
}

/// Single-device opportunistic digital transport. The device with the best
/// channel this slot waterfills its power budget, sets the sparsity to the
/// largest value whose bit cost fits the capacity bound, and ships the
/// compressed gradient. Unselected devices fold their gradients into their
/// error buffers when error feedback is on.
pub struct DigitalDsgd {
    codec: DigitalCodec,
    error_feedback: bool,
    buffers: Vec<Vec<f64>>,
    codec_rngs: Vec<ChaCha8Rng>,
    p_bar: f64,
    dim: usize,
}

impl DigitalDsgd {
    pub fn new(
        codec: DigitalCodec,
        error_feedback: bool,
        devices: usize,
        dim: usize,
        p_bar: f64,
        master_seed: u64,
    ) -> Self {
        let buffers = if error_feedback {
            vec![vec![0.0; dim]; devices]
        } else {
            Vec::new()
        };
        let codec_rngs = (0..devices)
            .map(|m| crate::seeded_stream(master_seed, &format!("codec/{m}")))
            .collect();
        Self {
            codec,
            error_feedback,
            buffers,
            codec_rngs,
            p_bar,
            dim,
        }
    }

    pub fn buffer(&self, device: usize) -> Option<&[f64]> {
        self.buffers.get(device).map(Vec::as_slice)
    }

    pub fn step_with(
        &mut self,
        model: &mut ModelParams,
        adam: &mut AdamState,
        grads: &[Vec<f64>],
        real: &ChannelRealization,
        ledger: &mut PowerLedger,
    ) -> Result<StepReport> {
        let selected = select_device(real);
        let s = real.subchannels();
        let gains: Vec<f64> = (0..s)
            .map(|i| real.device_csi(selected, i).norm_sqr())
            .collect();
        let rate = capacity_bound(&gains, self.p_bar)?;
        let q = max_q_for_budget(self.dim, rate, |q| self.codec.bits(self.dim, q));

        let report = if q == 0 {
            // Channel too weak for even one entry: nobody transmits, every
            // buffer accumulates as unscheduled.
            if self.error_feedback {
                for (buffer, grad) in self.buffers.iter_mut().zip(grads) {
                    error_feedback_update(buffer, grad, &[], false)?;
                }
            }
            ledger.advance(1);
            StepReport::skipped(1)
        } else {
            let source = if self.error_feedback {
                grads[selected]
                    .iter()
                    .zip(&self.buffers[selected])
                    .map(|(g, b)| g + b)
                    .collect::<Vec<f64>>()
            } else {
                grads[selected].clone()
            };
            let decoded = self
                .codec
                .encode_decode(&source, q, &mut self.codec_rngs[selected])?;
            if self.error_feedback {
                for (m, (buffer, grad)) in self.buffers.iter_mut().zip(grads).enumerate() {
                    error_feedback_update(buffer, grad, &decoded, m == selected)?;
                }
            }
            adam_step(model, adam, &decoded)?;
            ledger.record(selected, self.p_bar);
            ledger.advance(1);
            StepReport {
                slots: 1,
                bits_sent: self.codec.bits(self.dim, q),
                energy: self.p_bar,
                selected_device: Some(selected),
                updated: true,
                estimate: Some(decoded),
            }
        };
        Ok(report)
    }
}

/// Orthogonal digital transport: every device owns `⌊s/M⌋` subchannels and
/// ships a sparse-binary-compressed gradient within its own capacity bound
/// each slot; the server averages the decodes.
pub struct OdDsgd {
    buffers: Vec<Vec<f64>>,
    p_bar: f64,
    dim: usize,
}

impl OdDsgd {
    pub fn new(devices: usize, subchannels: usize, dim: usize, p_bar: f64) -> Result<Self> {
        if subchannels / devices == 0 {
            return Err(Error::Config(format!(
                "orthogonal transport needs at least one subchannel per device, \
                 got {subchannels} subchannels for {devices} devices"
            )));
        }
        Ok(Self {
            buffers: vec![vec![0.0; dim]; devices],
            p_bar,
            dim,
        })
    }

    pub fn buffer(&self, device: usize) -> &[f64] {
        &self.buffers[device]
    }

    pub fn step_with(
        &mut self,
        model: &mut ModelParams,
        adam: &mut AdamState,
        grads: &[Vec<f64>],
        real: &ChannelRealization,
        ledger: &mut PowerLedger,
    ) -> Result<StepReport> {
        let devices = grads.len();
        let width = real.subchannels() / devices;
        let mut sum = vec![0.0f64; self.dim];
        let mut bits_total = 0.0;
        let mut energy_total = 0.0;
        let mut any = false;

        for (m, grad) in grads.iter().enumerate() {
            let gains: Vec<f64> = (0..width)
                .map(|j| real.device_csi(m, m * width + j).norm_sqr())
                .collect();
            let rate = capacity_bound(&gains, self.p_bar)?;
            let q = max_q_for_budget(self.dim, rate, |q| {
                sparse_binary_bits(self.dim, q).unwrap_or(f64::INFINITY)
            });
            if q == 0 {
                error_feedback_update(&mut self.buffers[m], grad, &[], false)?;
                continue;
            }
            let source: Vec<f64> = grad
                .iter()
                .zip(&self.buffers[m])
                .map(|(g, b)| g + b)
                .collect();
            let decoded = sparse_binary_encode(&source, q)?.decode();
            error_feedback_update(&mut self.buffers[m], grad, &decoded, true)?;
            for (acc, d) in sum.iter_mut().zip(&decoded) {
                *acc += d;
            }
            bits_total += sparse_binary_bits(self.dim, q)?;
            ledger.record(m, self.p_bar);
            energy_total += self.p_bar;
            any = true;
        }
        ledger.advance(1);

        if !any {
            return Ok(StepReport::skipped(1));
        }
        let inv = 1.0 / devices as f64;
        for v in &mut sum {
            *v *= inv;
        }
        adam_step(model, adam, &sum)?;
        Ok(StepReport {
            slots: 1,
            bits_sent: bits_total,
            energy: energy_total,
            selected_device: None,
            updated: true,
            estimate: Some(sum),
        })
    }
}
