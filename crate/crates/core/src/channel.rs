//! Fading multiple-access channel: complex gain sampling, noisy-CSI copies,
//! and the superposition-plus-noise uplink.
//!
//! Gains are i.i.d. circularly-symmetric complex Gaussian with variance
//! `σ²` (Rayleigh envelope); receiver noise is fixed at unit variance, so
//! the signal-to-noise operating point is controlled entirely through the
//! transmit power budget.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// One slot of channel state: an `M × s` complex gain matrix, plus an
/// optional noisy copy as seen by the devices when CSI is imperfect.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    devices: usize,
    subchannels: usize,
    gains: Vec<Complex64>,
    csi: Option<Vec<Complex64>>,
}

impl ChannelRealization {
    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn subchannels(&self) -> usize {
        self.subchannels
    }

    /// True channel gain from device `m` on subchannel `i`.
    pub fn gain(&self, m: usize, i: usize) -> Complex64 {
        self.gains[m * self.subchannels + i]
    }

    /// The gain estimate device `m` works with: the noisy copy when CSI is
    /// imperfect, the true gain otherwise.
    pub fn device_csi(&self, m: usize, i: usize) -> Complex64 {
        match &self.csi {
            Some(csi) => csi[m * self.subchannels + i],
            None => self.gain(m, i),
        }
    }

    pub fn has_noisy_csi(&self) -> bool {
        self.csi.is_some()
    }

    /// Σ_i |h_{m,i}|² for one device row.
    pub fn row_energy(&self, m: usize) -> f64 {
        (0..self.subchannels).map(|i| self.gain(m, i).norm_sqr()).sum()
    }

    /// Test constructor from explicit gains (row-major `M × s`).
    pub fn from_gains(devices: usize, subchannels: usize, gains: Vec<Complex64>) -> Result<Self> {
        if gains.len() != devices * subchannels {
            return Err(Error::ShapeMismatch(format!(
                "{} gains for {devices} × {subchannels}",
                gains.len()
            )));
        }
        Ok(Self {
            devices,
            subchannels,
            gains,
            csi: None,
        })
    }
}

/// Boolean transmit mask over (device, subchannel).
#[derive(Debug, Clone)]
pub struct ScheduleMask {
    devices: usize,
    subchannels: usize,
    mask: Vec<bool>,
}

impl ScheduleMask {
    pub fn all_on(devices: usize, subchannels: usize) -> Self {
        Self {
            devices,
            subchannels,
            mask: vec![true; devices * subchannels],
        }
    }

    pub fn all_off(devices: usize, subchannels: usize) -> Self {
        Self {
            devices,
            subchannels,
            mask: vec![false; devices * subchannels],
        }
    }

    pub fn set(&mut self, m: usize, i: usize, on: bool) {
        self.mask[m * self.subchannels + i] = on;
    }

    pub fn get(&self, m: usize, i: usize) -> bool {
        self.mask[m * self.subchannels + i]
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn subchannels(&self) -> usize {
        self.subchannels
    }
}

fn complex_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * scale, im * scale)
}

/// Draws one slot of channel state from a single stream: gains i.i.d.
/// CN(0, σ²) and, when `csi_noise_var > 0`, a device-side copy
/// `ĥ = h + CN(0, csi_noise_var)`.
pub fn sample_realization(
    devices: usize,
    subchannels: usize,
    sigma_sq: f64,
    csi_noise_var: f64,
    rng: &mut impl Rng,
) -> Result<ChannelRealization> {
    if devices == 0 || subchannels == 0 {
        return Err(Error::InvalidArgument(
            "channel needs at least one device and one subchannel".into(),
        ));
    }
    if !(sigma_sq > 0.0) || csi_noise_var < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bad channel variances: sigma_sq={sigma_sq}, csi_noise_var={csi_noise_var}"
        )));
    }
    let total = devices * subchannels;
    let gains: Vec<Complex64> = (0..total).map(|_| complex_gaussian(rng, sigma_sq)).collect();
    let csi = if csi_noise_var > 0.0 {
        Some(
            gains
                .iter()
                .map(|&h| h + complex_gaussian(rng, csi_noise_var))
                .collect(),
        )
    } else {
        None
    };
    Ok(ChannelRealization {
        devices,
        subchannels,
        gains,
        csi,
    })
}

/// Superposition uplink: `y_i = Σ_m h_{m,i} · μ_{m,i} · x_{m,i} + z_i` with
/// `z_i` i.i.d. CN(0, 1). Pass `None` to disable the noise for tests.
pub fn mac_transmit(
    inputs: &[Complex64],
    real: &ChannelRealization,
    mask: &ScheduleMask,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Complex64>> {
    let (m, s) = (real.devices, real.subchannels);
    if inputs.len() != m * s || mask.devices() != m || mask.subchannels() != s {
        return Err(Error::ShapeMismatch(format!(
            "mac_transmit: {} inputs, mask {}×{}, channel {m}×{s}",
            inputs.len(),
            mask.devices(),
            mask.subchannels()
        )));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); s];
    for device in 0..m {
        for i in 0..s {
            if mask.get(device, i) {
                out[i] += real.gain(device, i) * inputs[device * s + i];
            }
        }
    }
    if let Some(rng) = noise_rng {
        for y in &mut out {
            *y += complex_gaussian(rng, 1.0);
        }
    }
    Ok(out)
}

/// Per-run channel state source with one gain stream and one CSI stream per
/// device plus a receiver-noise stream, all derived from the master seed by
/// fixed labels. Slot `k` of a run therefore sees the same gains no matter
/// which scheme is running.
pub struct ChannelSampler {
    devices: usize,
    subchannels: usize,
    sigma_sq: f64,
    csi_noise_var: f64,
    gain_streams: Vec<ChaCha8Rng>,
    csi_streams: Vec<ChaCha8Rng>,
    noise_stream: ChaCha8Rng,
}

impl ChannelSampler {
    pub fn new(
        master_seed: u64,
        devices: usize,
        subchannels: usize,
        sigma_sq: f64,
        csi_noise_var: f64,
    ) -> Self {
        let gain_streams = (0..devices)
            .map(|m| crate::seeded_stream(master_seed, &format!("gain/{m}")))
            .collect();
        let csi_streams = (0..devices)
            .map(|m| crate::seeded_stream(master_seed, &format!("csi/{m}")))
            .collect();
        Self {
            devices,
            subchannels,
            sigma_sq,
            csi_noise_var,
            gain_streams,
            csi_streams,
            noise_stream: crate::seeded_stream(master_seed, "noise"),
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn subchannels(&self) -> usize {
        self.subchannels
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Next slot of channel state; each device row comes from that device's
    /// own stream.
    pub fn next_realization(&mut self) -> ChannelRealization {
        let s = self.subchannels;
        let mut gains = Vec::with_capacity(self.devices * s);
        for m in 0..self.devices {
            let rng = &mut self.gain_streams[m];
            gains.extend((0..s).map(|_| complex_gaussian(rng, self.sigma_sq)));
        }
        let csi = if self.csi_noise_var > 0.0 {
            let mut noisy = Vec::with_capacity(self.devices * s);
            for m in 0..self.devices {
                let rng = &mut self.csi_streams[m];
                for i in 0..s {
                    noisy.push(gains[m * s + i] + complex_gaussian(rng, self.csi_noise_var));
                }
            }
            Some(noisy)
        } else {
            None
        };
        ChannelRealization {
            devices: self.devices,
            subchannels: s,
            gains,
            csi,
        }
    }

    pub fn noise_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.noise_stream
    }
}
