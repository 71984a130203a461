//! Air-interface model at baseband: numerology, reference sequences, static
//! multipath with AWGN, timing advance and correlation delay estimation.
//!
//! Signals are complex samples at rate 1/ts. A transmitted reference is the
//! sequence with a cyclic prefix of `cp_samples` in front; the receiver
//! correlates the `n` samples after the prefix against the sequence, so any
//! delay up to the prefix length shows up as a cyclic shift.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Duration, PS_PER_S};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("no correlation peak above threshold (rho {rho:.3})")]
    NoDetection { rho: f64 },
    #[error("estimate {0} exceeds the cyclic prefix")]
    BeyondCp(Duration),
    #[error("round trip {0} outside the timing-advance range")]
    Range(Duration),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Numerology {
    pub mu: u32,
    pub scs: f64,
    pub n_fft: u32,
    pub ts: Duration,
    pub tc: Duration,
    pub cp: Duration,
}

impl Numerology {
    /// 30 kHz subcarriers, 4096-point FFT.
    pub fn mu1() -> Self {
        // Tc = 1 / (480 kHz * 4096) = 508.6 ps, held as the nearest picosecond
        let tc = Duration::from_ps((PS_PER_S as f64 / (480e3 * 4096.0)).round() as i64);
        // one sample at 30 kHz * 4096 spans 480 / 30 = 16 Tc
        let ts = tc * 16;
        Numerology { mu: 1, scs: 30e3, n_fft: 4096, ts, tc, cp: Duration::from_ns(2340) }
    }

    /// Cyclic prefix length in whole samples (rounded up).
    pub fn cp_samples(&self) -> usize {
        (self.cp.as_ps() as u64).div_ceil(self.ts.as_ps() as u64) as usize
    }

    pub fn ta_step(&self) -> Duration {
        self.ts * 16
    }
}

impl Default for Numerology {
    fn default() -> Self {
        Self::mu1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    #[serde(rename = "delay_ns", with = "crate::time::serde_ns")]
    pub delay: Duration,
    /// linear amplitude
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub paths: Vec<Path>,
    pub snr_db: f64,
    #[serde(default)]
    pub doppler_hz: f64,
}

impl ChannelRealization {
    pub fn single_path(snr_db: f64) -> Self {
        ChannelRealization { paths: vec![Path { delay: Duration::ZERO, gain: 1.0 }], snr_db, doppler_hz: 0.0 }
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if self.paths.is_empty() || !self.paths.iter().any(|p| p.gain > 0.0) {
            return Err(PhyError::Param("channel needs at least one path with positive gain".into()));
        }
        if self.paths.windows(2).any(|w| w[1].delay < w[0].delay) {
            return Err(PhyError::Param("path delays must be ascending".into()));
        }
        if self.paths[0].delay.is_negative() {
            return Err(PhyError::Param("path delays must be non-negative".into()));
        }
        if self.doppler_hz != 0.0 {
            return Err(PhyError::Param("doppler is not modelled and must be zero".into()));
        }
        if self.snr_db.is_nan() {
            return Err(PhyError::Param("snr_db is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMethod {
    Ta,
    Srs,
    Prs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub method: DelayMethod,
    pub value: Duration,
    pub resolution: Duration,
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zadoff-Chu sequence of root `u`.
pub fn gen_zc(u: usize, n_len: usize) -> Result<Vec<Complex64>, PhyError> {
    if n_len < 2 || u == 0 || u >= n_len || gcd(u, n_len) != 1 {
        return Err(PhyError::Param(format!("zc root {u} invalid for length {n_len}")));
    }
    let n_len_u = n_len as u128;
    Ok((0..n_len)
        .map(|n| {
            // reduce the phase index exactly before going to floating point
            let k = (u as u128 * n as u128 * (n as u128 + 1)) % (2 * n_len_u);
            Complex64::from_polar(1.0, -PI * k as f64 / n_len as f64)
        })
        .collect())
}

const GOLD_NC: usize = 1600;

/// Length-31 Gold sequence c(n), n in [0, len).
pub fn gold_sequence(c_init: u32, len: usize) -> Vec<u8> {
    let total = GOLD_NC + len + 31;
    let mut x1 = vec![0u8; total];
    let mut x2 = vec![0u8; total];
    x1[0] = 1;
    for (i, b) in x2.iter_mut().take(31).enumerate() {
        *b = (c_init >> i & 1) as u8;
    }
    for n in 0..total - 31 {
        x1[n + 31] = x1[n + 3] ^ x1[n];
        x2[n + 31] = x2[n + 3] ^ x2[n + 2] ^ x2[n + 1] ^ x2[n];
    }
    (0..len).map(|n| x1[n + GOLD_NC] ^ x2[n + GOLD_NC]).collect()
}

/// QPSK positioning reference sequence over a Gold sequence.
pub fn gen_prs(c_init: u32, n_len: usize) -> Vec<Complex64> {
    let c = gold_sequence(c_init, 2 * n_len);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (0..n_len)
        .map(|m| Complex64::new(a * (1.0 - 2.0 * c[2 * m] as f64), a * (1.0 - 2.0 * c[2 * m + 1] as f64)))
        .collect()
}

/// Sequence with its cyclic prefix prepended.
pub fn with_cyclic_prefix(seq: &[Complex64], cp_len: usize) -> Vec<Complex64> {
    let n = seq.len();
    (0..cp_len + n).map(|i| seq[(i + n * cp_len - cp_len) % n]).collect()
}

/// Superpose delayed copies of `signal` and add white noise.
///
/// Every path is shifted by `true_delay + path.delay` rounded to whole
/// samples. Noise power is set relative to the summed path power; an
/// infinite SNR adds nothing. Negative total shifts are clamped to zero.
pub fn apply_channel(
    signal: &[Complex64],
    channel: &ChannelRealization,
    true_delay: Duration,
    numerology: &Numerology,
    seed: u64,
) -> Vec<Complex64> {
    assert!(!signal.is_empty(), "signal must be non-empty");
    let shifts: Vec<usize> = channel
        .paths
        .iter()
        .map(|p| (true_delay + p.delay).count_of(numerology.ts).max(0) as usize)
        .collect();
    let max_shift = shifts.iter().copied().max().unwrap_or(0);
    let mut out = vec![Complex64::new(0.0, 0.0); signal.len() + max_shift];
    for (p, &s) in channel.paths.iter().zip(&shifts) {
        for (i, x) in signal.iter().enumerate() {
            out[i + s] += x * p.gain;
        }
    }
    if channel.snr_db.is_finite() {
        let sig_power = signal.iter().map(|x| x.norm_sqr()).sum::<f64>() / signal.len() as f64;
        let path_power: f64 = channel.paths.iter().map(|p| p.gain * p.gain).sum();
        let noise_power = sig_power * path_power / 10f64.powf(channel.snr_db / 10.0);
        let sd = (noise_power / 2.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in out.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *x += Complex64::new(re * sd, im * sd);
        }
    }
    out
}

/// Normalised correlation below which no peak is reported.
pub const DETECTION_THRESHOLD: f64 = 0.2;

/// Correlation receiver for one reference sequence.
///
/// Holds the FFT plans and the conjugated reference spectrum so repeated
/// estimates against the same sequence only cost two transforms.
pub struct DelayEstimator {
    method: DelayMethod,
    numerology: Numerology,
    cp_len: usize,
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    ref_conj_spectrum: Vec<Complex64>,
    ref_energy: f64,
    transmitted: Vec<Complex64>,
}

impl std::fmt::Debug for DelayEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DelayEstimator").field("method", &self.method).field("n", &self.n).finish()
    }
}

impl DelayEstimator {
    pub fn new(reference: &[Complex64], method: DelayMethod, numerology: Numerology) -> Result<Self, PhyError> {
        let cp_len = numerology.cp_samples();
        let n = reference.len();
        if n <= cp_len {
            return Err(PhyError::Param(format!("reference length {n} must exceed the prefix {cp_len}")));
        }
        if method == DelayMethod::Ta {
            return Err(PhyError::Param("timing advance is not a correlation method".into()));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut spec = reference.to_vec();
        fft.process(&mut spec);
        for x in spec.iter_mut() {
            *x = x.conj();
        }
        Ok(DelayEstimator {
            method,
            numerology,
            cp_len,
            n,
            fft,
            ifft,
            ref_conj_spectrum: spec,
            ref_energy: reference.iter().map(|x| x.norm_sqr()).sum(),
            transmitted: with_cyclic_prefix(reference, cp_len),
        })
    }

    /// The prefixed waveform to push through a channel.
    pub fn transmitted(&self) -> &[Complex64] {
        &self.transmitted
    }

    pub fn cp_len(&self) -> usize {
        self.cp_len
    }

    /// Cyclic correlation of the post-prefix window against the reference.
    pub fn correlate(&self, received: &[Complex64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = (0..self.n)
            .map(|i| received.get(self.cp_len + i).copied().unwrap_or_default())
            .collect();
        self.fft.process(&mut buf);
        for (x, r) in buf.iter_mut().zip(&self.ref_conj_spectrum) {
            *x *= r;
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
        buf
    }

    fn window_energy(&self, received: &[Complex64]) -> f64 {
        (0..self.n).map(|i| received.get(self.cp_len + i).map_or(0.0, |x| x.norm_sqr())).sum()
    }

    /// First-arrival delay estimate.
    pub fn estimate(&self, received: &[Complex64]) -> Result<DelayEstimate, PhyError> {
        let corr = self.correlate(received);
        let mag: Vec<f64> = corr.iter().map(|c| c.norm()).collect();
        let max_lag = self.cp_len.min(self.n - 1);
        let (peak_lag, peak) = mag[..=max_lag]
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc });
        let energy = self.window_energy(received);
        let rho = if energy > 0.0 { peak / (self.ref_energy * energy).sqrt() } else { 0.0 };
        if rho < DETECTION_THRESHOLD {
            return Err(PhyError::NoDetection { rho });
        }
        // earliest lag within 3 dB of the maximum, then climb to its local peak
        let floor = peak * std::f64::consts::FRAC_1_SQRT_2;
        let mut lag = (0..=peak_lag).find(|&i| mag[i] >= floor).unwrap_or(peak_lag);
        while lag < max_lag && mag[lag + 1] > mag[lag] {
            lag += 1;
        }
        let a = mag[(lag + self.n - 1) % self.n];
        let b = mag[lag];
        let c = mag[(lag + 1) % self.n];
        let denom = a - 2.0 * b + c;
        let delta = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let ts = self.numerology.ts.as_ps() as f64;
        let tc = self.numerology.tc;
        let raw = Duration::from_ps(((lag as f64 + delta) * ts).round() as i64);
        let value = raw.round_to(tc).max(Duration::ZERO);
        if value > self.numerology.cp {
            return Err(PhyError::BeyondCp(value));
        }
        Ok(DelayEstimate { method: self.method, value, resolution: tc })
    }

    /// Correlation magnitude per lag in units of Tc, for debugging dumps.
    pub fn profile(&self, received: &[Complex64]) -> Vec<(i64, f64)> {
        let per = self.numerology.ts / self.numerology.tc;
        self.correlate(received).iter().enumerate().map(|(i, c)| (i as i64 * per, c.norm())).collect()
    }
}

pub fn write_profile_csv<W: Write>(out: W, profile: &[(i64, f64)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lag_tc", "magnitude"])?;
    for (lag, m) in profile {
        w.write_record([lag.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One-shot estimate; builds a fresh [`DelayEstimator`].
pub fn estimate_delay(
    received: &[Complex64],
    reference: &[Complex64],
    method: DelayMethod,
    numerology: &Numerology,
) -> Result<DelayEstimate, PhyError> {
    DelayEstimator::new(reference, method, *numerology)?.estimate(received)
}

/// Timing advance for a round trip, on the 16 ts grid, without range checks.
pub fn ta_round(round_trip: Duration, numerology: &Numerology) -> Duration {
    round_trip.round_to(numerology.ta_step())
}

/// TA-based one-way estimate: half the quantised round trip.
pub fn quantize_ta(round_trip: Duration, numerology: &Numerology) -> Result<DelayEstimate, PhyError> {
    if round_trip.is_negative() || round_trip > numerology.cp * 2 {
        return Err(PhyError::Range(round_trip));
    }
    Ok(DelayEstimate {
        method: DelayMethod::Ta,
        value: ta_round(round_trip, numerology) / 2,
        resolution: numerology.ta_step(),
    })
}
