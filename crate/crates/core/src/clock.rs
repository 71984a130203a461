//! Clock models and clock-quality analysis.
//!
//! An [`OscillatorClock`] turns elapsed master time into elapsed local time
//! with a fixed fractional offset, a random-walk frequency term and white
//! phase noise. Offset series feed [`dtheta_series`] and the Allan tools.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Duration, TimePoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OscillatorModel {
    pub nominal_frequency: f64,
    /// df/f
    pub fractional_offset: f64,
    /// frequency random walk, per sqrt(second)
    pub random_walk_sigma: f64,
    /// seconds of white phase noise added to every step
    pub white_noise_sigma: f64,
    pub seed: u64,
}

impl Default for OscillatorModel {
    fn default() -> Self {
        OscillatorModel {
            nominal_frequency: 10e6,
            fractional_offset: 0.0,
            random_walk_sigma: 0.0,
            white_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl OscillatorModel {
    pub fn ideal() -> Self {
        Self::default()
    }
}

/// A simulated local clock driven by master elapsed time.
#[derive(Clone, Debug)]
pub struct OscillatorClock {
    model: OscillatorModel,
    rng: ChaCha8Rng,
    random_walk_state: f64,
    /// local minus master, accumulated over all steps
    offset: Duration,
}

impl OscillatorClock {
    pub fn new(model: OscillatorModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        OscillatorClock { model, rng, random_walk_state: 0.0, offset: Duration::ZERO }
    }

    pub fn with_offset(model: OscillatorModel, initial: Duration) -> Self {
        let mut c = Self::new(model);
        c.offset = initial;
        c
    }

    pub fn model(&self) -> &OscillatorModel {
        &self.model
    }

    /// Local minus master time accumulated so far.
    pub fn offset(&self) -> Duration {
        self.offset
    }

    pub fn frequency_state(&self) -> f64 {
        self.model.fractional_offset + self.random_walk_state
    }

    /// Local time elapsed while `master_elapsed` passes on the master.
    ///
    /// Panics if `master_elapsed` is not positive.
    pub fn advance(&mut self, master_elapsed: Duration) -> Duration {
        assert!(master_elapsed.as_ps() > 0, "master_elapsed must be positive");
        let m = &self.model;
        let ps = master_elapsed.as_ps() as f64;
        let drift = (ps * (m.fractional_offset + self.random_walk_state)).round() as i64;
        let white = if m.white_noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            (z * m.white_noise_sigma * 1e12).round() as i64
        } else {
            0
        };
        if m.random_walk_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.random_walk_state += z * m.random_walk_sigma * master_elapsed.as_secs_f64().sqrt();
        }
        let extra = Duration::from_ps(drift + white);
        self.offset += extra;
        master_elapsed + extra
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    #[default]
    None,
    SfnMismatch,
    CrcFail,
    PrsSenseFail,
    ThresholdExceeded,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::None => "none",
            RejectReason::SfnMismatch => "sfn_mismatch",
            RejectReason::CrcFail => "crc_fail",
            RejectReason::PrsSenseFail => "prs_sense_fail",
            RejectReason::ThresholdExceeded => "threshold_exceeded",
        }
    }
}

/// One UE observation of the broadcast time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetObservation {
    /// true master time of the event; never used by the UE itself
    pub t_master: TimePoint,
    pub t_bs_stamp: TimePoint,
    pub t_ue_local: TimePoint,
    pub t_est: Duration,
    pub t0: Duration,
    pub t_offset: Duration,
    pub dtheta: Duration,
    pub accepted: bool,
    pub reject_reason: RejectReason,
}

impl OffsetObservation {
    pub fn new(
        t_master: TimePoint,
        t_bs_stamp: TimePoint,
        t_ue_local: TimePoint,
        t_est: Duration,
        t0: Duration,
    ) -> Self {
        let t_offset = t_ue_local - (t_bs_stamp + t_est + t0);
        OffsetObservation {
            t_master,
            t_bs_stamp,
            t_ue_local,
            t_est,
            t0,
            t_offset,
            dtheta: Duration::ZERO,
            accepted: false,
            reject_reason: RejectReason::None,
        }
    }

    /// The absolute timing result T_t.
    pub fn t_result(&self) -> TimePoint {
        self.t_bs_stamp + self.t_est + self.t0
    }
}

/// Successive differences of the raw offsets.
pub fn dtheta_series(observations: &[OffsetObservation]) -> Vec<Duration> {
    observations.windows(2).map(|w| w[1].t_offset - w[0].t_offset).collect()
}

/// Fill `dtheta` on each observation; the first one gets zero.
pub fn assign_dtheta(observations: &mut [OffsetObservation]) {
    let mut prev = None;
    for o in observations.iter_mut() {
        o.dtheta = match prev {
            Some(p) => o.t_offset - p,
            None => Duration::ZERO,
        };
        prev = Some(o.t_offset);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    pub tau: Duration,
    /// seconds^2 per second of averaging (the 1/(2 tau) normalisation)
    pub variance: f64,
    pub sample_count: usize,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AllanError {
    #[error("series too short: tau {tau} needs {needed} samples, have {have}")]
    TooShort { tau: Duration, needed: usize, have: usize },
    #[error("samples are not uniformly spaced")]
    NonUniform,
    #[error("tau {tau} is not a positive multiple of the spacing {spacing}")]
    TauNotMultiple { tau: Duration, spacing: Duration },
}

fn uniform_spacing(series: &[(TimePoint, Duration)]) -> Result<Duration, AllanError> {
    if series.len() < 2 {
        return Err(AllanError::TooShort { tau: Duration::ZERO, needed: 2, have: series.len() });
    }
    let spacing = series[1].0 - series[0].0;
    if spacing.as_ps() <= 0 || series.windows(2).any(|w| w[1].0 - w[0].0 != spacing) {
        return Err(AllanError::NonUniform);
    }
    Ok(spacing)
}

/// Overlapping Allan variance of an offset series at averaging time `tau`.
///
/// Each term is the squared second difference of the offset over `tau`
/// (the integral of dθ over one window minus the next) divided by `2 tau`.
pub fn allan_variance(series: &[(TimePoint, Duration)], tau: Duration) -> Result<AllanPoint, AllanError> {
    let spacing = uniform_spacing(series)?;
    if tau.as_ps() <= 0 || tau.as_ps() % spacing.as_ps() != 0 {
        return Err(AllanError::TauNotMultiple { tau, spacing });
    }
    let m = (tau.as_ps() / spacing.as_ps()) as usize;
    let n = series.len();
    if n < 2 * m + 1 {
        return Err(AllanError::TooShort { tau, needed: 2 * m + 1, have: n });
    }
    let count = n - 2 * m;
    let mut acc = 0.0f64;
    for i in 0..count {
        let d = series[i + 2 * m].1.as_ps() as i128 - 2 * series[i + m].1.as_ps() as i128
            + series[i].1.as_ps() as i128;
        let s = d as f64 * 1e-12;
        acc += s * s;
    }
    let variance = acc / count as f64 / (2.0 * tau.as_secs_f64());
    Ok(AllanPoint { tau, variance, sample_count: count })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AllanCurve {
    pub points: Vec<AllanPoint>,
    pub skipped: Vec<AllanError>,
}

impl AllanCurve {
    pub fn argmin(&self) -> Option<&AllanPoint> {
        self.points.iter().min_by(|a, b| a.variance.total_cmp(&b.variance))
    }
}

pub fn allan_curve(series: &[(TimePoint, Duration)], tau_grid: &[Duration]) -> AllanCurve {
    let mut curve = AllanCurve::default();
    for &tau in tau_grid {
        match allan_variance(series, tau) {
            Ok(p) => curve.points.push(p),
            Err(e) => curve.skipped.push(e),
        }
    }
    curve
}

/// Octave grid `spacing * 2^k` for every tau the series can support.
pub fn octave_tau_grid(spacing: Duration, len: usize) -> Vec<Duration> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while len > 2 * m {
        out.push(spacing * m as i64);
        m *= 2;
    }
    out
}

/// Snap a jittered log onto a uniform grid.
///
/// `spacing` defaults to the median interval rounded to 1 ms. Every sample
/// must fall within half a spacing of its grid slot and no slot may be
/// skipped.
pub fn snap_to_grid(series: &[(TimePoint, Duration)], spacing: Option<Duration>) -> Result<Vec<(TimePoint, Duration)>, AllanError> {
    if series.len() < 2 {
        return Err(AllanError::TooShort { tau: Duration::ZERO, needed: 2, have: series.len() });
    }
    let spacing = match spacing {
        Some(s) => s,
        None => {
            let mut gaps: Vec<Duration> = series.windows(2).map(|w| w[1].0 - w[0].0).collect();
            let k = gaps.len() / 2;
            let (_, m, _) = gaps.select_nth_unstable(k);
            m.round_to(Duration::from_ms(1))
        }
    };
    if spacing.as_ps() <= 0 {
        return Err(AllanError::NonUniform);
    }
    let t0 = series[0].0;
    series
        .iter()
        .enumerate()
        .map(|(i, &(t, x))| {
            let slot = t0 + spacing * i as i64;
            if (t - slot).abs() * 2 > spacing {
                Err(AllanError::NonUniform)
            } else {
                Ok((slot, x))
            }
        })
        .collect()
}

/// Offset series as `(t_master, t_offset)` pairs, optionally only accepted ones.
pub fn offset_series(observations: &[OffsetObservation], accepted_only: bool) -> Vec<(TimePoint, Duration)> {
    observations
        .iter()
        .filter(|o| !accepted_only || o.accepted)
        .map(|o| (o.t_master, o.t_offset))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetRecord {
    pub t_master_ps: i64,
    pub offset_ps: i64,
    pub accepted: bool,
    pub reject_reason: RejectReason,
}

impl From<&OffsetObservation> for OffsetRecord {
    fn from(o: &OffsetObservation) -> Self {
        OffsetRecord {
            t_master_ps: o.t_master.as_ps(),
            offset_ps: o.t_offset.as_ps(),
            accepted: o.accepted,
            reject_reason: o.reject_reason,
        }
    }
}

pub fn write_offset_csv<W: Write>(out: W, records: &[OffsetRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_offset_csv<R: Read>(input: R) -> csv::Result<Vec<OffsetRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AllanRow {
    tau_s: f64,
    adev_variance: f64,
    n: usize,
}

pub fn write_allan_csv<W: Write>(out: W, points: &[AllanPoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(AllanRow { tau_s: p.tau.as_secs_f64(), adev_variance: p.variance, n: p.sample_count })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(offsets_ns: &[i64], spacing: Duration) -> Vec<(TimePoint, Duration)> {
        offsets_ns
            .iter()
            .enumerate()
            .map(|(i, &o)| (TimePoint::EPOCH + spacing * i as i64, Duration::from_ns(o)))
            .collect()
    }

    #[test]
    fn noiseless_clock_is_identity() {
        let mut c = OscillatorClock::new(OscillatorModel::ideal());
        assert_eq!(c.advance(Duration::from_secs(1)), Duration::from_secs(1));
        assert_eq!(c.offset(), Duration::ZERO);
    }

    #[test]
    fn fractional_offset_is_linear_drift() {
        let model = OscillatorModel { fractional_offset: 1e-6, ..Default::default() };
        let mut c = OscillatorClock::new(model);
        assert_eq!(c.advance(Duration::from_secs(1)), Duration::from_secs(1) + Duration::from_us(1));
    }

    #[test]
    fn white_noise_std_matches_sigma() {
        let model = OscillatorModel { white_noise_sigma: 10e-9, seed: 7, ..Default::default() };
        let mut c = OscillatorClock::new(model);
        let step = Duration::from_ms(320);
        let errs: Vec<f64> = (0..10_000).map(|_| (c.advance(step) - step).as_secs_f64()).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 10e-9).abs() < 0.5e-9, "sd {sd}");
    }

    #[test]
    fn same_seed_same_noise() {
        let model = OscillatorModel { white_noise_sigma: 5e-9, random_walk_sigma: 1e-10, seed: 3, ..Default::default() };
        let mut a = OscillatorClock::new(model.clone());
        let mut b = OscillatorClock::new(model);
        for _ in 0..100 {
            assert_eq!(a.advance(Duration::from_ms(10)), b.advance(Duration::from_ms(10)));
        }
    }

    #[test]
    fn dtheta_examples() {
        let mk = |v: &[i64]| -> Vec<OffsetObservation> {
            v.iter()
                .map(|&o| {
                    let mut ob = OffsetObservation::new(TimePoint(0), TimePoint(0), TimePoint(0), Duration::ZERO, Duration::ZERO);
                    ob.t_offset = Duration::from_ns(o);
                    ob
                })
                .collect()
        };
        assert_eq!(dtheta_series(&mk(&[5, 5, 5])), vec![Duration::ZERO; 2]);
        assert_eq!(dtheta_series(&mk(&[0, 10, 30])), vec![Duration::from_ns(10), Duration::from_ns(20)]);
        assert!(dtheta_series(&mk(&[1])).is_empty());
        let mut obs = mk(&[3, 4, 9]);
        assign_dtheta(&mut obs);
        assert_eq!(obs[0].dtheta, Duration::ZERO);
        assert_eq!(obs[2].dtheta, Duration::from_ns(5));
    }

    #[test]
    fn drift_clock_gives_constant_dtheta() {
        let model = OscillatorModel { fractional_offset: 1e-6, ..Default::default() };
        let mut c = OscillatorClock::new(model);
        let mut obs = Vec::new();
        for i in 0..5 {
            let t = TimePoint::EPOCH + Duration::from_secs(i);
            let mut o = OffsetObservation::new(t, t, t, Duration::ZERO, Duration::ZERO);
            o.t_offset = c.offset();
            obs.push(o);
            c.advance(Duration::from_secs(1));
        }
        assert!(dtheta_series(&obs).iter().all(|d| *d == Duration::from_us(1)));
    }

    #[test]
    fn constant_and_drift_series_have_zero_variance() {
        let sp = Duration::from_ms(320);
        let flat = series(&[7; 40], sp);
        let ramp: Vec<i64> = (0..40).map(|i| 3 * i - 11).collect();
        let ramp = series(&ramp, sp);
        for m in [1, 2, 4, 8] {
            assert_eq!(allan_variance(&flat, sp * m).unwrap().variance, 0.0);
            assert_eq!(allan_variance(&ramp, sp * m).unwrap().variance, 0.0);
        }
    }

    #[test]
    fn too_short_and_misaligned_are_reported() {
        let sp = Duration::from_ms(320);
        let s = series(&[1, 2, 3, 4], sp);
        assert!(matches!(allan_variance(&s, sp * 2), Err(AllanError::TooShort { .. })));
        assert!(matches!(allan_variance(&s, Duration::from_ms(100)), Err(AllanError::TauNotMultiple { .. })));
        let curve = allan_curve(&s, &[sp, sp * 2, sp * 4]);
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.skipped.len(), 2);
    }

    #[test]
    fn octave_grid_stops_at_feasible_tau() {
        let g = octave_tau_grid(Duration::from_ms(320), 20);
        assert_eq!(g, vec![Duration::from_ms(320), Duration::from_ms(640), Duration::from_ms(1280), Duration::from_ms(2560)]);
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            OffsetRecord { t_master_ps: 1, offset_ps: -5, accepted: true, reject_reason: RejectReason::None },
            OffsetRecord { t_master_ps: 2, offset_ps: 9, accepted: false, reject_reason: RejectReason::SfnMismatch },
        ];
        let mut buf = Vec::new();
        write_offset_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_master_ps,offset_ps,accepted,reject_reason\n"));
        assert!(text.contains("sfn_mismatch"));
        assert_eq!(read_offset_csv(&buf[..]).unwrap(), recs);
    }
}
