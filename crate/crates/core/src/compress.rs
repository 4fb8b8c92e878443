//! Gradient codecs and error-feedback bookkeeping: top-k sparsification,
//! sparse binary compression, QSGD and SignSGD quantizers, and the bit
//! budgets each needs on the digital uplink.
//!
//! Bits are counted, never serialized: supports are charged their idealized
//! positional cost `log2 C(d, q)` and magnitudes a flat 32 bits.

use rand::Rng;

use crate::{Error, Result};

/// Natural log-gamma via the Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection formula; never hit for binomial arguments but keeps the
        // helper total.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * z).sin().ln()
            - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut acc = 0.999_999_999_999_809_93;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (z + i as f64 + 1.0);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// `log2 C(n, k)` through log-gamma.
pub fn log2_binomial(n: usize, k: usize) -> f64 {
    if k == 0 || k == n {
        return 0.0;
    }
    let (n, k) = (n as f64, k as f64);
    (ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)) / std::f64::consts::LN_2
}

/// Indices of the `k` largest-magnitude entries. Magnitude ties break toward
/// the lower index, so the selected set is unique and deterministic.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .expect("finite entries")
            .then(a.cmp(&b))
    };
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx
}

/// Keeps the `k` largest-magnitude coordinates of `v`, zeroes the rest.
pub fn topk_sparsify(v: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in top_k_indices(v, k) {
        out[i] = v[i];
    }
    out
}

/// One-sided sparse binary code: a support, one magnitude and one sign.
#[derive(Debug, Clone)]
pub struct SparseBinaryCode {
    pub support: Vec<usize>,
    pub magnitude: f64,
    pub positive: bool,
    pub sparsity: usize,
    dim: usize,
}

impl SparseBinaryCode {
    pub fn decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let value = if self.positive {
            self.magnitude
        } else {
            -self.magnitude
        };
        for &i in &self.support {
            out[i] = value;
        }
        out
    }
}

/// Sparse binary compression: keep the `q` highest positive and `q` most
/// negative entries, average each side, and keep only the side with the
/// larger mean magnitude at its mean value.
///
/// If one side has no kept entries its mean is 0, so the other side wins.
pub fn sparse_binary_encode(v: &[f64], q: usize) -> Result<SparseBinaryCode> {
    check_sparsity(v.len(), q)?;

    let mut positive: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    positive.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).expect("finite").then(a.cmp(&b)));
    positive.truncate(q);
    let mut negative: Vec<usize> = (0..v.len()).filter(|&i| v[i] < 0.0).collect();
    negative.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite").then(a.cmp(&b)));
    negative.truncate(q);

    let mean = |idx: &[usize]| -> f64 {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| v[i].abs()).sum::<f64>() / idx.len() as f64
        }
    };
    let plus = mean(&positive);
    let minus = mean(&negative);

    let (support, magnitude, is_positive) = if plus >= minus {
        (positive, plus, true)
    } else {
        (negative, minus, false)
    };
    Ok(SparseBinaryCode {
        support,
        magnitude,
        positive: is_positive,
        sparsity: q,
        dim: v.len(),
    })
}

fn check_sparsity(dim: usize, q: usize) -> Result<()> {
    if q == 0 || 2 * q > dim {
        return Err(Error::InvalidArgument(format!(
            "sparsity q = {q} out of range for dimension {dim}"
        )));
    }
    Ok(())
}

/// Bit cost of the sparse binary code: support positions plus a 32-bit
/// magnitude and one sign bit.
pub fn sparse_binary_bits(dim: usize, q: usize) -> Result<f64> {
    check_sparsity(dim, q)?;
    Ok(log2_binomial(dim, q) + 33.0)
}

/// Largest `q` in `[1, d/2]` whose bit cost fits the budget, or 0 when even
/// `q = 1` does not fit (skip the slot). The cost function must be monotone
/// nondecreasing in `q` over that range.
pub fn max_q_for_budget(dim: usize, budget: f64, bits: impl Fn(usize) -> f64) -> usize {
    let cap = dim / 2;
    if cap == 0 || budget < bits(1) {
        return 0;
    }
    let (mut lo, mut hi) = (1usize, cap);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if bits(mid) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Sign-only code over a top-q support.
#[derive(Debug, Clone)]
pub struct SignCode {
    pub support: Vec<usize>,
    pub signs: Vec<i8>,
    dim: usize,
}

impl SignCode {
    pub fn decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &s) in self.support.iter().zip(&self.signs) {
            out[i] = f64::from(s);
        }
        out
    }
}

/// Keep the `q` largest-magnitude entries and transmit only their signs.
pub fn signsgd_encode(v: &[f64], q: usize) -> Result<SignCode> {
    if q == 0 || q > v.len() {
        return Err(Error::InvalidArgument(format!(
            "SignSGD sparsity q = {q} out of range for dimension {}",
            v.len()
        )));
    }
    let support = top_k_indices(v, q);
    let signs = support
        .iter()
        .map(|&i| if v[i] < 0.0 { -1i8 } else { 1 })
        .collect();
    Ok(SignCode {
        support,
        signs,
        dim: v.len(),
    })
}

/// Bit cost of SignSGD: support positions plus one sign bit per entry.
pub fn signsgd_bits(dim: usize, q: usize) -> Result<f64> {
    if q == 0 || q > dim {
        return Err(Error::InvalidArgument(format!(
            "SignSGD sparsity q = {q} out of range for dimension {dim}"
        )));
    }
    Ok(log2_binomial(dim, q) + q as f64)
}

/// QSGD code over a top-q support: the kept vector's l2 norm, plus one sign
/// and one quantization level per kept entry.
#[derive(Debug, Clone)]
pub struct QsgdCode {
    pub support: Vec<usize>,
    pub norm: f64,
    pub signs: Vec<i8>,
    pub levels: Vec<u32>,
    pub level_bits: u32,
    dim: usize,
}

impl QsgdCode {
    pub fn decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let denom = f64::from(1u32 << self.level_bits);
        for ((&i, &s), &u) in self.support.iter().zip(&self.signs).zip(&self.levels) {
            out[i] = f64::from(s) * self.norm * f64::from(u) / denom;
        }
        out
    }
}

/// QSGD with stochastic rounding to `2^level_bits` levels over the top-q
/// support. The dither makes the decode unbiased on the kept support.
pub fn qsgd_encode(
    v: &[f64],
    q: usize,
    level_bits: u32,
    rng: &mut impl Rng,
) -> Result<QsgdCode> {
    if q == 0 || q > v.len() {
        return Err(Error::InvalidArgument(format!(
            "QSGD sparsity q = {q} out of range for dimension {}",
            v.len()
        )));
    }
    if level_bits == 0 || level_bits > 30 {
        return Err(Error::InvalidArgument(format!(
            "QSGD level bits {level_bits} out of range"
        )));
    }
    let support = top_k_indices(v, q);
    let norm = support
        .iter()
        .map(|&i| v[i] * v[i])
        .sum::<f64>()
        .sqrt();
    let scale = f64::from(1u32 << level_bits);
    let mut signs = Vec::with_capacity(q);
    let mut levels = Vec::with_capacity(q);
    for &i in &support {
        signs.push(if v[i] < 0.0 { -1i8 } else { 1 });
        if norm == 0.0 {
            levels.push(0);
            continue;
        }
        let scaled = scale * v[i].abs() / norm;
        let floor = scaled.floor();
        let frac = scaled - floor;
        let bump = u32::from(rng.gen_range(0.0..1.0) < frac);
        levels.push(floor as u32 + bump);
    }
    Ok(QsgdCode {
        support,
        norm,
        signs,
        levels,
        level_bits,
        dim: v.len(),
    })
}

/// Bit cost of QSGD: a 32-bit norm, support positions, and `1 + level_bits`
/// bits per kept entry.
pub fn qsgd_bits(dim: usize, q: usize, level_bits: u32) -> Result<f64> {
    if q == 0 || q > dim {
        return Err(Error::InvalidArgument(format!(
            "QSGD sparsity q = {q} out of range for dimension {dim}"
        )));
    }
    Ok(32.0 + log2_binomial(dim, q) + f64::from(1 + level_bits) * q as f64)
}

/// Error-feedback recursion: the buffer absorbs whatever the codec did not
/// deliver. Scheduled: `Δ ← g + Δ - decoded`; unscheduled: `Δ ← g + Δ`.
pub fn error_feedback_update(
    buffer: &mut [f64],
    grad: &[f64],
    decoded: &[f64],
    scheduled: bool,
) -> Result<()> {
    if buffer.len() != grad.len() || (scheduled && decoded.len() != grad.len()) {
        return Err(Error::ShapeMismatch(format!(
            "error feedback: buffer {}, grad {}, decoded {}",
            buffer.len(),
            grad.len(),
            decoded.len()
        )));
    }
    if scheduled {
        for i in 0..buffer.len() {
            buffer[i] = grad[i] + buffer[i] - decoded[i];
        }
    } else {
        for i in 0..buffer.len() {
            buffer[i] += grad[i];
        }
    }
    Ok(())
}
