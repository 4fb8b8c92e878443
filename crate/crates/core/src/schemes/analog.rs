//! Entry-wise analog over-the-air transport. The whole gradient goes on air
//! across `⌈d/2s⌉` slots, each entry channel-inverted when its gain clears
//! the threshold. The error-compensated variant additionally retains
//! untransmitted entries in per-slot complex buffers and lets the server
//! fall back to its previous estimate for subchannels nobody reached.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelRealization;
use crate::learner::{adam_step, AdamState, ModelParams};
use crate::power::PowerLedger;
use crate::{Error, Result};

use super::{pack_complex_slices, transmit_slot, AnalogParams, StepReport};

fn check_slots(reals: &[ChannelRealization], expected: usize) -> Result<()> {
    if reals.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "analog step needs {expected} channel realizations, got {}",
            reals.len()
        )));
    }
    Ok(())
}

/// Entry-wise scheduled analog transport, no memory between iterations.
pub struct EsaDsgd {
    params: AnalogParams,
    dim: usize,
    subchannels: usize,
}

impl EsaDsgd {
    pub fn new(params: AnalogParams, dim: usize, subchannels: usize) -> Self {
        Self {
            params,
            dim,
            subchannels,
        }
    }

    pub fn slots_per_iteration(&self) -> usize {
        self.dim.div_ceil(2 * self.subchannels)
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
        let n_slots = self.slots_per_iteration();
        check_slots(reals, n_slots)?;
        let s = self.subchannels;
        let sliced: Vec<Vec<Vec<Complex64>>> = grads
            .iter()
            .map(|g| pack_complex_slices(g, s, n_slots))
            .collect();

        let mut estimate = vec![0.0f64; self.dim];
        let mut energy_total = 0.0;
        for (n, real) in reals.iter().enumerate() {
            let signals: Vec<Vec<Complex64>> =
                sliced.iter().map(|slices| slices[n].clone()).collect();
            let out = transmit_slot(&signals, real, &self.params, noise_rng.as_deref_mut())?;
            for i in 0..s {
                let re_idx = 2 * n * s + i;
                let im_idx = (2 * n + 1) * s + i;
                if re_idx < self.dim {
                    estimate[re_idx] = out.estimates[i].re;
                }
                if im_idx < self.dim {
                    estimate[im_idx] = out.estimates[i].im;
                }
            }
            for (dev, &e) in out.energy.iter().enumerate() {
                ledger.record(dev, e);
                energy_total += e;
            }
            ledger.advance(1);
        }

        adam_step(model, adam, &estimate)?;
        Ok(StepReport {
            slots: n_slots as u32,
            bits_sent: 0.0,
            energy: energy_total,
            selected_device: None,
            updated: true,
            estimate: Some(estimate),
        })
    }
}

/// Error-compensated entry-wise analog transport.
///
/// Each device keeps one complex buffer entry per (slot, subchannel). The
/// transmitted value is the fresh slice plus the buffer; whatever the
/// threshold silences is retained in full for the next iteration, so a
/// persistently silent entry holds the running sum of its gradient history.
/// On the server side, subchannels with an empty schedule set reuse the
/// estimate from the previous iteration.
pub struct EcesaDsgd {
    params: AnalogParams,
    dim: usize,
    subchannels: usize,
    buffers: Vec<Vec<Complex64>>,
    previous_estimate: Vec<f64>,
}

impl EcesaDsgd {
    pub fn new(params: AnalogParams, devices: usize, dim: usize, subchannels: usize) -> Self {
        let n_slots = dim.div_ceil(2 * subchannels);
        Self {
            params,
            dim,
            subchannels,
            buffers: vec![vec![Complex64::new(0.0, 0.0); n_slots * subchannels]; devices],
            previous_estimate: vec![0.0; dim],
        }
    }

    pub fn slots_per_iteration(&self) -> usize {
        self.dim.div_ceil(2 * self.subchannels)
    }

    pub fn buffer(&self, device: usize) -> &[Complex64] {
        &self.buffers[device]
    }

    pub fn previous_estimate(&self) -> &[f64] {
        &self.previous_estimate
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
        let n_slots = self.slots_per_iteration();
        check_slots(reals, n_slots)?;
        let s = self.subchannels;
        let sliced: Vec<Vec<Vec<Complex64>>> = grads
            .iter()
            .map(|g| pack_complex_slices(g, s, n_slots))
            .collect();

        // Stale values survive wherever no device clears the threshold.
        let mut estimate = self.previous_estimate.clone();
        let mut energy_total = 0.0;
        for (n, real) in reals.iter().enumerate() {
            let signals: Vec<Vec<Complex64>> = sliced
                .iter()
                .zip(&self.buffers)
                .map(|(slices, buffer)| {
                    slices[n]
                        .iter()
                        .zip(&buffer[n * s..(n + 1) * s])
                        .map(|(fresh, carried)| fresh + carried)
                        .collect()
                })
                .collect();
            let out = transmit_slot(&signals, real, &self.params, noise_rng.as_deref_mut())?;

            for dev in 0..grads.len() {
                let sent = out.gammas[dev] > 0.0;
                for i in 0..s {
                    let transmitted = sent && out.mask.get(dev, i);
                    self.buffers[dev][n * s + i] = if transmitted {
                        Complex64::new(0.0, 0.0)
                    } else {
                        signals[dev][i]
                    };
                }
                ledger.record(dev, out.energy[dev]);
                energy_total += out.energy[dev];
            }
            ledger.advance(1);

            let fresh = out.gamma_bar > 0.0;
            for i in 0..s {
                if fresh && out.scheduled[i] > 0 {
                    let re_idx = 2 * n * s + i;
                    let im_idx = (2 * n + 1) * s + i;
                    if re_idx < self.dim {
                        estimate[re_idx] = out.estimates[i].re;
                    }
                    if im_idx < self.dim {
                        estimate[im_idx] = out.estimates[i].im;
                    }
                }
            }
        }

        self.previous_estimate.copy_from_slice(&estimate);
        adam_step(model, adam, &estimate)?;
        Ok(StepReport {
            slots: n_slots as u32,
            bits_sent: 0.0,
            energy: energy_total,
            selected_device: None,
            updated: true,
            estimate: Some(estimate),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::AdamHyper;
    use approx::assert_relative_eq;

    fn params(lambda: f64) -> AnalogParams {
        AnalogParams {
            lambda,
            p_bar_slot: 20.0,
            sigma: 1.0,
        }
    }

    fn model_of_dim(features: usize) -> (ModelParams, AdamState) {
        let model = ModelParams::zeros(2, features);
        let adam = AdamState::new(model.dim(), AdamHyper::default());
        (model, adam)
    }

    fn gains(devices: usize, s: usize, value: Complex64) -> ChannelRealization {
        ChannelRealization::from_gains(devices, s, vec![value; devices * s]).unwrap()
    }

    fn random_grad(seed: u64, dim: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::seeded_stream(seed, "grad");
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_device_clean_channel_is_exact() {
        let (mut model, mut adam) = model_of_dim(3); // d = 8
        let d = model.dim();
        let s = 2;
        let n = d.div_ceil(2 * s); // 2 slots
        let mut scheme = EsaDsgd::new(params(1e-9), d, s);
        let g = random_grad(1, d);
        let reals: Vec<_> = (0..n)
            .map(|_| gains(1, s, Complex64::new(0.8, -0.6)))
            .collect();
        let mut ledger = PowerLedger::new(1, 20.0);
        let report = scheme
            .step_with(&mut model, &mut adam, &[g.clone()], &reals, None, &mut ledger)
            .unwrap();
        let est = report.estimate.unwrap();
        for i in 0..d {
            assert_relative_eq!(est[i], g[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn all_entries_below_threshold_estimate_zero() {
        let (mut model, mut adam) = model_of_dim(3);
        let d = model.dim();
        let s = 2;
        let n = d.div_ceil(2 * s);
        let mut scheme = EsaDsgd::new(params(1e9), d, s); // impossible threshold
        let g = random_grad(2, d);
        let reals: Vec<_> = (0..n).map(|_| gains(1, s, Complex64::new(1.0, 0.0))).collect();
        let mut ledger = PowerLedger::new(1, 20.0);
        let report = scheme
            .step_with(&mut model, &mut adam, &[g], &reals, None, &mut ledger)
            .unwrap();
        assert!(report.estimate.unwrap().iter().all(|&v| v == 0.0));
        // Zero-gradient first step leaves the parameters untouched.
        assert!(model.weights().iter().all(|&w| w == 0.0));
        assert_eq!(report.energy, 0.0);
    }

    #[test]
    fn two_identical_devices_recover_common_gradient() {
        let (mut model, mut adam) = model_of_dim(3);
        let d = model.dim();
        let s = 2;
        let n = d.div_ceil(2 * s);
        let mut scheme = EsaDsgd::new(params(1e-9), d, s);
        let g = random_grad(3, d);
        let grads = vec![g.clone(), g.clone()];
        let reals: Vec<_> = (0..n)
            .map(|_| {
                let mut v = vec![Complex64::new(1.2, 0.4); s];
                v.extend(vec![Complex64::new(-0.3, 0.9); s]);
                ChannelRealization::from_gains(2, s, v).unwrap()
            })
            .collect();
        let mut ledger = PowerLedger::new(2, 20.0);
        let report = scheme
            .step_with(&mut model, &mut adam, &grads, &reals, None, &mut ledger)
            .unwrap();
        let est = report.estimate.unwrap();
        for i in 0..d {
            assert_relative_eq!(est[i], g[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn compensated_buffer_holds_running_sum_while_silent() {
        let (mut model, mut adam) = model_of_dim(3);
        let d = model.dim();
        let s = 2;
        let n = d.div_ceil(2 * s);
        let mut scheme = EcesaDsgd::new(params(1e9), 1, d, s); // nothing ever transmits
        let mut ledger = PowerLedger::new(1, 20.0);
        let g1 = random_grad(4, d);
        let g2 = random_grad(5, d);
        let g3 = random_grad(6, d);
        for g in [&g1, &g2, &g3] {
            let reals: Vec<_> =
                (0..n).map(|_| gains(1, s, Complex64::new(1.0, 0.0))).collect();
            scheme
                .step_with(&mut model, &mut adam, &[g.clone()], &reals, None, &mut ledger)
                .unwrap();
        }
        let expected: Vec<f64> = (0..d).map(|i| g1[i] + g2[i] + g3[i]).collect();
        let packed = pack_complex_slices(&expected, s, n);
        for slot in 0..n {
            for i in 0..s {
                let b = scheme.buffer(0)[slot * s + i];
                assert_relative_eq!(b.re, packed[slot][i].re, max_relative = 1e-12);
                assert_relative_eq!(b.im, packed[slot][i].im, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn transmitted_entries_reset_their_buffer() {
        let (mut model, mut adam) = model_of_dim(3);
        let d = model.dim();
        let s = 2;
        let n = d.div_ceil(2 * s);
        let mut scheme = EcesaDsgd::new(params(1e-9), 1, d, s);
        let mut ledger = PowerLedger::new(1, 20.0);
        let g = random_grad(7, d);
        let reals: Vec<_> = (0..n).map(|_| gains(1, s, Complex64::new(0.7, 0.7))).collect();
        scheme
            .step_with(&mut model, &mut adam, &[g], &reals, None, &mut ledger)
            .unwrap();
        assert!(scheme
            .buffer(0)
            .iter()
            .all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn empty_schedule_set_reuses_previous_estimate() {
        let (mut model, mut adam) = model_of_dim(3);
        let d = model.dim();
        let s = 2;
        let n = d.div_ceil(2 * s);
        let mut scheme = EcesaDsgd::new(params(0.5), 1, d, s);
        let mut ledger = PowerLedger::new(1, 20.0);

        // Iteration 1: strong gains everywhere, estimate is fresh.
        let g1 = random_grad(8, d);
        let reals: Vec<_> = (0..n).map(|_| gains(1, s, Complex64::new(2.0, 0.0))).collect();
        let r1 = scheme
            .step_with(&mut model, &mut adam, &[g1], &reals, None, &mut ledger)
            .unwrap();
        let est1 = r1.estimate.unwrap();

        // Iteration 2: slot 0 subchannel 1 falls below threshold; those two
        // coordinates must carry over from iteration 1.
        let g2 = random_grad(9, d);
        let mut v = vec![Complex64::new(2.0, 0.0); s];
        v[1] = Complex64::new(0.1, 0.0); // |h|² = 0.01 < λ = 0.5
        let mut reals2 = vec![ChannelRealization::from_gains(1, s, v).unwrap()];
        reals2.extend((1..n).map(|_| gains(1, s, Complex64::new(2.0, 0.0))));
        let r2 = scheme
            .step_with(&mut model, &mut adam, &[g2], &reals2, None, &mut ledger)
            .unwrap();
        let est2 = r2.estimate.unwrap();
        assert_eq!(est2[1], est1[1]); // Re coordinate of slot 0, subchannel 1
        assert_eq!(est2[s + 1], est1[s + 1]); // Im coordinate
        assert_ne!(est2[0], est1[0]);
    }

    #[test]
    fn esa_discards_while_ecesa_retains() {
        // Same sequence, one subchannel permanently below threshold: the
        // compensated variant keeps its history, the plain one forgets.
        let d = 8;
        let s = 2;
        let n = 2;
        let (mut model_a, mut adam_a) = model_of_dim(3);
        let (mut model_b, mut adam_b) = model_of_dim(3);
        let mut esa = EsaDsgd::new(params(0.5), d, s);
        let mut ecesa = EcesaDsgd::new(params(0.5), 1, d, s);
        let mut ledger = PowerLedger::new(1, 20.0);
        let g = random_grad(10, d);
        let make_reals = || -> Vec<ChannelRealization> {
            (0..n)
                .map(|_| {
                    let mut v = vec![Complex64::new(2.0, 0.0); s];
                    v[0] = Complex64::new(0.05, 0.0);
                    ChannelRealization::from_gains(1, s, v).unwrap()
                })
                .collect()
        };
        esa.step_with(&mut model_a, &mut adam_a, &[g.clone()], &make_reals(), None, &mut ledger)
            .unwrap();
        ecesa
            .step_with(&mut model_b, &mut adam_b, &[g.clone()], &make_reals(), None, &mut ledger)
            .unwrap();
        // ESA keeps no state; the compensated buffer holds the silenced entries.
        let buf = ecesa.buffer(0);
        assert_relative_eq!(buf[0].re, g[0], max_relative = 1e-12);
        assert_relative_eq!(buf[0].im, g[s], max_relative = 1e-12);
        assert_eq!(buf[1], Complex64::new(0.0, 0.0));
    }
}
