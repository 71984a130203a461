//! Base-station side: reference clock, SIB9 generation, radio trigger and
//! the RNTI to SRS-delay cache.

use indexmap::IndexMap;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{OscillatorClock, OscillatorModel};
use crate::phy::{DelayEstimator, Numerology, PhyError};
use crate::signaling::{encode_sib9, BitString, Sib9Message, SignalingError, SrsPair, GR_R15, MAX_SRS_PAIRS};
use crate::time::{serde_ms, serde_ns, Duration, TimePoint};

pub const FRAME: Duration = Duration::from_ms(10);
pub const SFN_CYCLE: u64 = 1024;

fn default_t_p() -> Duration {
    Duration::from_secs(1) - Duration::from_ns(22)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsConfig {
    #[serde(rename = "gr_ns", with = "serde_ns")]
    pub gr: Duration,
    #[serde(rename = "sib9_period_ms", with = "serde_ms")]
    pub sib9_period: Duration,
    #[serde(rename = "sched_pre_ms", with = "serde_ms")]
    pub sched_pre: Duration,
    /// offset of the radio frame grid from the 10 ms grid
    #[serde(rename = "t_c_ns", with = "serde_ns")]
    pub t_c: Duration,
    /// PPS generation delay used to pre-compensate the trigger
    #[serde(rename = "t_p_ns", with = "serde_ns")]
    pub t_p: Duration,
    /// fixed delay from PPS to the radio boundary
    #[serde(rename = "trigger_delay_ns", with = "serde_ns")]
    pub trigger_delay: Duration,
    #[serde(rename = "trigger_jitter_ns", with = "serde_ns")]
    pub trigger_jitter: Duration,
    pub reference_clock: OscillatorModel,
    pub hops_to_mc: u32,
    #[serde(rename = "e_node_ns", with = "serde_ns")]
    pub e_node_per_hop: Duration,
    #[serde(rename = "e_node_jitter_ns", with = "serde_ns")]
    pub e_node_jitter: Duration,
    /// probability that a scheduled SIB9 goes out late
    pub slip_probability: f64,
    pub slip_frames: u32,
}

impl Default for BsConfig {
    fn default() -> Self {
        BsConfig {
            gr: GR_R15,
            sib9_period: Duration::from_ms(320),
            sched_pre: Duration::from_ms(20),
            t_c: Duration::from_ns(4),
            t_p: default_t_p(),
            trigger_delay: Duration::from_ns(22),
            trigger_jitter: Duration::ZERO,
            reference_clock: OscillatorModel::ideal(),
            hops_to_mc: 1,
            e_node_per_hop: Duration::ZERO,
            e_node_jitter: Duration::ZERO,
            slip_probability: 0.0,
            slip_frames: 1,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum BsError {
    #[error("invalid base-station config: {0}")]
    Config(String),
    #[error(transparent)]
    Signaling(#[from] SignalingError),
    #[error(transparent)]
    Phy(#[from] PhyError),
}

impl BsConfig {
    pub fn validate(&self) -> Result<(), BsError> {
        let bad = |m: &str| Err(BsError::Config(m.to_string()));
        if self.gr.as_ps() <= 0 {
            return bad("gr must be positive");
        }
        if self.sib9_period.as_ps() <= 0 || self.sib9_period % FRAME != Duration::ZERO {
            return bad("sib9_period must be a positive multiple of 10 ms");
        }
        if self.sched_pre.is_negative() || self.sched_pre >= self.sib9_period {
            return bad("sched_pre must lie in [0, sib9_period)");
        }
        if self.sched_pre % FRAME != Duration::ZERO {
            return bad("sched_pre must be a multiple of 10 ms");
        }
        if self.t_c.is_negative() || self.t_c >= FRAME {
            return bad("t_c must lie in [0, 10 ms)");
        }
        if !(0.0..=1.0).contains(&self.slip_probability) {
            return bad("slip_probability must be in [0, 1]");
        }
        if self.trigger_jitter.is_negative() || self.e_node_jitter.is_negative() {
            return bad("jitter must be non-negative");
        }
        Ok(())
    }

    pub fn frames_per_period(&self) -> u64 {
        (self.sib9_period / FRAME) as u64
    }
}

/// SRS delay service rate: 88 estimates every SIB9 period.
pub fn capacity_per_minute(config: &BsConfig) -> u64 {
    let minute = Duration::from_secs(60).as_ps() as u128;
    (MAX_SRS_PAIRS as u128 * minute / config.sib9_period.as_ps() as u128) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    /// frame number actually on air
    pub frame: u64,
    /// boundary the message was stamped for, BS time
    pub intended: TimePoint,
    /// boundary actually triggered, BS time
    pub actual: TimePoint,
    pub trigger_error: Duration,
    pub slip_frames: u32,
    pub bits: BitString,
}

pub struct BaseStation {
    config: BsConfig,
    reference: OscillatorClock,
    reference_time: TimePoint,
    rng: ChaCha8Rng,
    srs_cache: IndexMap<u16, u16>,
    numerology: Numerology,
    pub diagnostics: Vec<String>,
}

impl BaseStation {
    pub fn new(config: BsConfig, numerology: Numerology, seed: u64) -> Result<Self, BsError> {
        config.validate()?;
        let reference = OscillatorClock::new(config.reference_clock.clone());
        Ok(BaseStation {
            config,
            reference,
            reference_time: TimePoint::EPOCH,
            rng: ChaCha8Rng::seed_from_u64(seed),
            srs_cache: IndexMap::new(),
            numerology,
            diagnostics: Vec::new(),
        })
    }

    pub fn config(&self) -> &BsConfig {
        &self.config
    }

    /// Radio frame boundary `frame` in BS time.
    pub fn frame_boundary(&self, frame: u64) -> TimePoint {
        TimePoint::EPOCH + FRAME * frame as i64 + self.config.t_c
    }

    /// Build the SIB9 for the boundary of `target_frame`.
    pub fn generate_sib9(&self, target_frame: u64) -> Sib9Message {
        let gr = self.config.gr;
        let boundary = self.frame_boundary(target_frame).since_epoch();
        let time_info_utc = boundary.as_ps().div_euclid(gr.as_ps());
        let t_c = boundary - gr * time_info_utc;
        Sib9Message {
            time_info_utc: time_info_utc as u64,
            ref_sfn: (target_frame % SFN_CYCLE) as u16,
            sched_pre: self.config.sched_pre,
            t_c,
            ext_pairs: self.srs_cache.iter().map(|(&rnti, &srs_delay)| SrsPair { rnti, srs_delay }).collect(),
        }
    }

    /// Residual trigger error after PPS pre-compensation.
    pub fn trigger_error(&mut self) -> Duration {
        let jitter = gaussian(&mut self.rng, self.config.trigger_jitter);
        self.config.trigger_delay + (self.config.t_p - Duration::from_secs(1)) + jitter
    }

    /// Trigger the radio for `msg`, possibly late by a scheduler slip.
    pub fn transmit_event(&mut self, msg: &Sib9Message) -> Result<Transmission, BsError> {
        let bits = encode_sib9(msg)?;
        let intended = msg.timestamp(self.config.gr);
        let frame = (intended - self.config.t_c).since_epoch() / FRAME;
        let slip_frames = if self.config.slip_probability > 0.0 && self.rng.random::<f64>() < self.config.slip_probability {
            self.config.slip_frames
        } else {
            0
        };
        let trigger_error = self.trigger_error();
        let actual = intended + FRAME * slip_frames as i64 + trigger_error;
        Ok(Transmission { frame: frame as u64 + slip_frames as u64, intended, actual, trigger_error, slip_frames, bits })
    }

    /// Reference-clock offset (BS minus master) at master time `now`.
    pub fn source_offset(&mut self, now: TimePoint) -> Duration {
        if now > self.reference_time {
            self.reference.advance(now - self.reference_time);
            self.reference_time = now;
        }
        self.reference.offset()
    }

    /// Backhaul error for one delivery: a per-hop constant plus jitter.
    pub fn node_offset(&mut self) -> Duration {
        self.config.e_node_per_hop * self.config.hops_to_mc as i64 + gaussian(&mut self.rng, self.config.e_node_jitter)
    }

    /// Record a one-way delay from an uplink SRS.
    ///
    /// `window_start` is the round-trip time already removed by the receive
    /// window (the timing advance plus any guard); the correlation supplies
    /// the remainder.
    pub fn serve_srs(
        &mut self,
        rnti: u16,
        received: &[Complex64],
        window_start: Duration,
        estimator: &DelayEstimator,
    ) -> Result<u16, PhyError> {
        let est = estimator.estimate(received)?;
        let one_way = (window_start + est.value) / 2;
        let units = one_way.count_of(self.numerology.tc).clamp(0, u16::MAX as i64) as u16;
        self.cache_srs(rnti, units);
        Ok(units)
    }

    /// Insert or refresh an entry, evicting the least recently served.
    pub fn cache_srs(&mut self, rnti: u16, srs_delay: u16) {
        self.srs_cache.shift_remove(&rnti);
        self.srs_cache.insert(rnti, srs_delay);
        while self.srs_cache.len() > MAX_SRS_PAIRS {
            if let Some((old, _)) = self.srs_cache.shift_remove_index(0) {
                self.diagnostics.push(format!("srs cache full, evicted rnti {old:#06x}"));
            }
        }
    }

    pub fn srs_cache(&self) -> &IndexMap<u16, u16> {
        &self.srs_cache
    }
}

pub(crate) fn gaussian<R: Rng>(rng: &mut R, sigma: Duration) -> Duration {
    if sigma.as_ps() == 0 {
        return Duration::ZERO;
    }
    let z: f64 = StandardNormal.sample(rng);
    Duration::from_ps((z * sigma.as_ps() as f64).round() as i64)
}
