//! One-iteration transport protocols: each scheme turns the devices' local
//! gradients into the parameter-server estimate that drives the optimizer,
//! accounting for channel slots, bits and transmit energy along the way.

mod analog;
mod ca;
mod digital;

pub use analog::{EcesaDsgd, EsaDsgd};
pub use ca::{CaDsgd, CaTransport};
pub use digital::{DigitalCodec, DigitalDsgd, OdDsgd};

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

use crate::channel::{mac_transmit, ChannelRealization, ChannelSampler, ScheduleMask};
use crate::learner::{adam_step, AdamState, ModelParams};
use crate::power::{analog_gamma, PowerLedger};
use crate::{Error, Result};

/// The transport schemes under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    /// Noiseless shared link: the exact gradient average reaches the server.
    ErrorFree,
    /// Digital uplink, one opportunistically scheduled device, sparse binary
    /// compression with error feedback.
    DDsgd,
    /// Digital uplink with orthogonal subchannel slices, all devices at once.
    OdDsgd,
    /// Entry-wise scheduled analog over-the-air transport.
    EsaDsgd,
    /// Analog transport with per-entry error accumulation and stale-estimate
    /// reuse at the server.
    EcesaDsgd,
    /// Compressed analog transport: top-k + error feedback + random
    /// projection, recovered with AMP.
    CaDsgd,
    /// Digital uplink with QSGD quantization (no error feedback by default).
    DQsgd,
    /// Digital uplink with SignSGD quantization (no error feedback by default).
    DSignSgd,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 8] = [
        SchemeKind::ErrorFree,
        SchemeKind::DDsgd,
        SchemeKind::OdDsgd,
        SchemeKind::EsaDsgd,
        SchemeKind::EcesaDsgd,
        SchemeKind::CaDsgd,
        SchemeKind::DQsgd,
        SchemeKind::DSignSgd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::ErrorFree => "error_free",
            SchemeKind::DDsgd => "d_dsgd",
            SchemeKind::OdDsgd => "od_dsgd",
            SchemeKind::EsaDsgd => "esa_dsgd",
            SchemeKind::EcesaDsgd => "ecesa_dsgd",
            SchemeKind::CaDsgd => "ca_dsgd",
            SchemeKind::DQsgd => "d_qsgd",
            SchemeKind::DSignSgd => "d_signsgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }

    /// Channel slots consumed per DSGD iteration. The entry-wise analog
    /// schemes need the whole gradient on air, the rest are one slot unless
    /// the compressed scheme is configured wider.
    pub fn slots_per_iteration(&self, dim: usize, subchannels: usize, ca_slots: usize) -> usize {
        match self {
            SchemeKind::EsaDsgd | SchemeKind::EcesaDsgd => dim.div_ceil(2 * subchannels),
            SchemeKind::CaDsgd => ca_slots,
            _ => 1,
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What one scheme iteration did, for metrics and the energy ledger.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Channel slots consumed.
    pub slots: u32,
    /// Bits delivered over the digital pipe (0 for analog schemes).
    pub bits_sent: f64,
    /// Total realized transmit energy across devices.
    pub energy: f64,
    /// Scheduled device, for the single-device digital schemes.
    pub selected_device: Option<usize>,
    /// False when the iteration degenerated to a skip (no optimizer update).
    pub updated: bool,
    /// The gradient estimate fed to the optimizer, when one was formed.
    pub estimate: Option<Vec<f64>>,
}

impl StepReport {
    fn skipped(slots: u32) -> Self {
        Self {
            slots,
            bits_sent: 0.0,
            energy: 0.0,
            selected_device: None,
            updated: false,
            estimate: None,
        }
    }
}

/// Splits a real vector into `n_slots` complex slices of `s` entries: slot
/// `n` carries coordinates `[2ns, (2n+1)s)` as real parts and
/// `[(2n+1)s, (2n+2)s)` as imaginary parts, zero-padded past the end.
pub fn pack_complex_slices(v: &[f64], subchannels: usize, n_slots: usize) -> Vec<Vec<Complex64>> {
    let s = subchannels;
    let at = |idx: usize| -> f64 {
        if idx < v.len() {
            v[idx]
        } else {
            0.0
        }
    };
    (0..n_slots)
        .map(|n| {
            (0..s)
                .map(|i| Complex64::new(at(2 * n * s + i), at((2 * n + 1) * s + i)))
                .collect()
        })
        .collect()
}

/// Inverse of [`pack_complex_slices`]; returns the zero-padded vector of
/// length `2 · s · n_slots`.
pub fn unpack_complex_slices(slots: &[Vec<Complex64>], subchannels: usize) -> Vec<f64> {
    let s = subchannels;
    let mut out = vec![0.0f64; 2 * s * slots.len()];
    for (n, slot) in slots.iter().enumerate() {
        for (i, z) in slot.iter().enumerate() {
            out[2 * n * s + i] = z.re;
            out[(2 * n + 1) * s + i] = z.im;
        }
    }
    out
}

/// Opportunistic scheduling: the device with the largest total channel
/// energy `Σ_i |h_{m,i}|²` this slot. Ties break toward the lowest index.
pub fn select_device(real: &ChannelRealization) -> usize {
    let mut best = 0usize;
    let mut best_energy = real.row_energy(0);
    for m in 1..real.devices() {
        let e = real.row_energy(m);
        if e > best_energy {
            best = m;
            best_energy = e;
        }
    }
    best
}

/// Shared parameters of the analog schemes.
#[derive(Debug, Clone, Copy)]
pub struct AnalogParams {
    /// Gain threshold below which an entry is not transmitted.
    pub lambda: f64,
    /// Average transmit power target per device per slot.
    pub p_bar_slot: f64,
    /// Channel gain standard deviation (sqrt of the gain variance).
    pub sigma: f64,
}

/// Result of one analog over-the-air slot.
pub(crate) struct SlotOutcome {
    /// Per-subchannel estimate `y_i / (γ̄ · |M_i|)`, zero where nobody passed.
    pub estimates: Vec<Complex64>,
    /// Per-subchannel count of devices whose CSI cleared the threshold.
    pub scheduled: Vec<u32>,
    /// Which (device, subchannel) pairs cleared the threshold.
    pub mask: ScheduleMask,
    /// Per-device channel-inversion factors (0 for silent devices).
    pub gammas: Vec<f64>,
    /// Mean of the per-device factors.
    pub gamma_bar: f64,
    /// Realized transmit energy per device.
    pub energy: Vec<f64>,
}

/// One analog slot: every device inverts its channel above the gain
/// threshold and scales by its γ; the server divides the superposed
/// observation by `γ̄ · |M_i|` per subchannel.
///
/// Devices threshold and invert on their own CSI copy, while the channel
/// itself applies the true gains; the server mirrors the device-side
/// threshold decisions when counting `|M_i|`. A device whose slice carries
/// no energy stays silent and contributes γ = 0 to the average.
pub(crate) fn transmit_slot(
    signals: &[Vec<Complex64>],
    real: &ChannelRealization,
    params: &AnalogParams,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<SlotOutcome> {
    let m = real.devices();
    let s = real.subchannels();
    if signals.len() != m || signals.iter().any(|sig| sig.len() != s) {
        return Err(Error::ShapeMismatch(format!(
            "transmit_slot: {} signal rows for {m} devices × {s} subchannels",
            signals.len()
        )));
    }

    let mut inputs = vec![Complex64::new(0.0, 0.0); m * s];
    let mut mask = ScheduleMask::all_off(m, s);
    let mut scheduled = vec![0u32; s];
    let mut gammas = vec![0.0f64; m];
    let mut energy = vec![0.0f64; m];

    for dev in 0..m {
        let p_signal: f64 = signals[dev].iter().map(|z| z.norm_sqr()).sum();
        if p_signal > 0.0 {
            gammas[dev] = analog_gamma(params.p_bar_slot, params.lambda, params.sigma, p_signal)?;
        }
        for i in 0..s {
            let csi = real.device_csi(dev, i);
            if csi.norm_sqr() >= params.lambda {
                mask.set(dev, i, true);
                scheduled[i] += 1;
                if gammas[dev] > 0.0 {
                    let x = signals[dev][i] * gammas[dev] / csi;
                    energy[dev] += x.norm_sqr();
                    inputs[dev * s + i] = x;
                }
            }
        }
    }

    let gamma_bar = gammas.iter().sum::<f64>() / m as f64;
    let received = mac_transmit(&inputs, real, &mask, noise_rng)?;
    let mut estimates = vec![Complex64::new(0.0, 0.0); s];
    if gamma_bar > 0.0 {
        for i in 0..s {
            if scheduled[i] > 0 {
                estimates[i] = received[i] / (gamma_bar * f64::from(scheduled[i]));
            }
        }
    }
    Ok(SlotOutcome {
        estimates,
        scheduled,
        mask,
        gammas,
        gamma_bar,
        energy,
    })
}

/// Ideal baseline: the server receives the exact gradient average over one
/// slot and updates the model.
#[derive(Debug, Default)]
pub struct ErrorFreeScheme;

impl ErrorFreeScheme {
    pub fn step(
        &mut self,
        model: &mut ModelParams,
        adam: &mut AdamState,
        grads: &[Vec<f64>],
        ledger: &mut PowerLedger,
    ) -> Result<StepReport> {
        let mean = mean_of_gradients(grads, model.dim())?;
        adam_step(model, adam, &mean)?;
        ledger.advance(1);
        Ok(StepReport {
            slots: 1,
            bits_sent: 0.0,
            energy: 0.0,
            selected_device: None,
            updated: true,
            estimate: Some(mean),
        })
    }
}

/// Mean over devices, summed in ascending device index so the result is
/// identical for every execution schedule.
pub(crate) fn mean_of_gradients(grads: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if grads.is_empty() {
        return Err(Error::InvalidArgument("no device gradients".into()));
    }
    let mut mean = vec![0.0f64; dim];
    for g in grads {
        if g.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "gradient of {} entries, expected {dim}",
                g.len()
            )));
        }
        for (acc, &v) in mean.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let inv = 1.0 / grads.len() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    Ok(mean)
}

/// A configured transport scheme with its per-run state.
pub enum Engine {
    ErrorFree(ErrorFreeScheme),
    Digital(DigitalDsgd),
    Orthogonal(OdDsgd),
    Esa(EsaDsgd),
    Ecesa(EcesaDsgd),
    Ca(CaDsgd),
}

impl Engine {
    pub fn slots_per_iteration(&self) -> usize {
        match self {
            Engine::ErrorFree(_) | Engine::Digital(_) | Engine::Orthogonal(_) => 1,
            Engine::Esa(e) => e.slots_per_iteration(),
            Engine::Ecesa(e) => e.slots_per_iteration(),
            Engine::Ca(c) => c.slots_per_iteration(),
        }
    }

    /// Runs one DSGD iteration, drawing whatever channel state it needs from
    /// the sampler.
    pub fn step(
        &mut self,
        model: &mut ModelParams,
        adam: &mut AdamState,
        grads: &[Vec<f64>],
        sampler: &mut ChannelSampler,
        ledger: &mut PowerLedger,
    ) -> Result<StepReport> {
        match self {
            Engine::ErrorFree(e) => e.step(model, adam, grads, ledger),
            Engine::Digital(e) => {
                let real = sampler.next_realization();
                e.step_with(model, adam, grads, &real, ledger)
            }
            Engine::Orthogonal(e) => {
                let real = sampler.next_realization();
                e.step_with(model, adam, grads, &real, ledger)
            }
            Engine::Esa(e) => {
                let reals: Vec<_> = (0..e.slots_per_iteration())
                    .map(|_| sampler.next_realization())
                    .collect();
                e.step_with(model, adam, grads, &reals, Some(sampler.noise_rng()), ledger)
            }
            Engine::Ecesa(e) => {
                let reals: Vec<_> = (0..e.slots_per_iteration())
                    .map(|_| sampler.next_realization())
                    .collect();
                e.step_with(model, adam, grads, &reals, Some(sampler.noise_rng()), ledger)
            }
            Engine::Ca(e) => {
                let reals: Vec<_> = (0..e.slots_per_iteration())
                    .map(|_| sampler.next_realization())
                    .collect();
                e.step_with(model, adam, grads, &reals, Some(sampler.noise_rng()), ledger)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_realization;

    #[test]
    fn pack_small_example() {
        let slots = pack_complex_slices(&[1.0, 2.0, 3.0, 4.0], 1, 2);
        assert_eq!(slots.len(), 2);
        assert_eq!(slots[0], vec![Complex64::new(1.0, 2.0)]);
        assert_eq!(slots[1], vec![Complex64::new(3.0, 4.0)]);
    }

    #[test]
    fn pack_zero_pads_the_tail() {
        let slots = pack_complex_slices(&[1.0, 2.0, 3.0], 1, 2);
        assert_eq!(slots[1], vec![Complex64::new(3.0, 0.0)]);
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let v: Vec<f64> = (0..23).map(|i| i as f64 * 0.7 - 3.0).collect();
        let s = 4;
        let n = v.len().div_ceil(2 * s);
        let slots = pack_complex_slices(&v, s, n);
        let back = unpack_complex_slices(&slots, s);
        assert_eq!(back.len(), 2 * s * n);
        assert_eq!(&back[..v.len()], &v[..]);
        assert!(back[v.len()..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn select_single_device() {
        let mut rng = crate::seeded_stream(1, "sel");
        let real = sample_realization(1, 4, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(select_device(&real), 0);
    }

    #[test]
    fn select_picks_largest_row_energy() {
        use num_complex::Complex64;
        let mut gains = vec![Complex64::new(0.1, 0.0); 9];
        for i in 0..3 {
            gains[2 * 3 + i] = Complex64::new(2.0, 1.0);
        }
        let real = crate::channel::ChannelRealization::from_gains(3, 3, gains).unwrap();
        assert_eq!(select_device(&real), 2);
    }

    #[test]
    fn selection_is_symmetric_across_devices() {
        let mut rng = crate::seeded_stream(2, "sel");
        let mut counts = [0usize; 4];
        let rounds = 100_000;
        for _ in 0..rounds {
            let real = sample_realization(4, 3, 1.0, 0.0, &mut rng).unwrap();
            counts[select_device(&real)] += 1;
        }
        for c in counts {
            let frac = c as f64 / rounds as f64;
            assert!((frac - 0.25).abs() < 0.015, "selection fraction {frac}");
        }
    }

    #[test]
    fn mean_of_gradients_matches_compensated_sum() {
        let mut rng = crate::seeded_stream(3, "mean");
        use rand::Rng;
        let grads: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mean = mean_of_gradients(&grads, 40).unwrap();
        for i in 0..40 {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for g in &grads {
                let y = g[i] - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            assert!((mean[i] - sum / 7.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn scheme_kind_names_roundtrip() {
        for kind in SchemeKind::ALL {
            assert_eq!(SchemeKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(SchemeKind::parse("bogus").is_err());
    }

    #[test]
    fn slots_per_iteration_accounting() {
        let d = 7850;
        let s = 393;
        assert_eq!(SchemeKind::DDsgd.slots_per_iteration(d, s, 1), 1);
        assert_eq!(SchemeKind::ErrorFree.slots_per_iteration(d, s, 1), 1);
        assert_eq!(SchemeKind::EsaDsgd.slots_per_iteration(d, s, 1), 10);
        assert_eq!(SchemeKind::EcesaDsgd.slots_per_iteration(d, s, 1), 10);
        assert_eq!(SchemeKind::CaDsgd.slots_per_iteration(d, s, 2), 2);
    }
}
