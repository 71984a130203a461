//! Discrete-event simulation harness.
//!
//! A [`Scenario`] describes one cell: the BS, its UEs with their mobility and
//! oscillators, the radio channel, an optional attacker and the comparison
//! baseline. [`run`] drives everything from a single event queue and records,
//! per UE, every decoded SIB9 together with the ground-truth error budget.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path as FsPath;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::attack::{AttackConfig, Capture, Emission, EmissionTruth, LinkInjector, Origin};
use crate::bs::{gaussian, BaseStation, BsConfig, BsError, FRAME};
use crate::clock::{
    allan_curve, octave_tau_grid, write_allan_csv, write_offset_csv, AllanPoint, OffsetObservation, OffsetRecord,
    OscillatorClock, OscillatorModel, RejectReason,
};
use crate::phy::{
    apply_channel, gen_prs, gen_zc, ta_round, ChannelRealization, DelayEstimate, DelayEstimator, DelayMethod,
    Numerology, Path, PhyError,
};
use crate::signaling::{decode_sib9, Sib9Message};
use crate::time::{serde_ns, serde_s, Duration, TimePoint};
use crate::ue::{compute_offset, mechanism_checks, Action, Phase, StatisticalMode, UeConfig, UeError, UeTiming};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const MAX_RANGE_M: f64 = 10_000.0;

/// SRS root and sequence length; PRS shares the length.
const SRS_ROOT: usize = 25;
const SEQ_LEN: usize = 293;
const PRS_C_INIT: u32 = 0x2a5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Bs(#[from] BsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<UeError> for SimError {
    fn from(e: UeError) -> Self {
        SimError::Config(e.to_string())
    }
}

impl From<PhyError> for SimError {
    fn from(e: PhyError) -> Self {
        SimError::Config(e.to_string())
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Config(msg.into()))
}

// ---------------------------------------------------------------- mobility

/// Distance from the BS over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mobility {
    Static { distance_m: f64 },
    /// `(t_s, distance_m)` knots, linearly interpolated and held at the ends
    Piecewise { points: Vec<(f64, f64)> },
    /// random targets in `[min_m, max_m]`, travelled at `speed_mps`
    RandomWaypoint { min_m: f64, max_m: f64, speed_mps: f64, pause_s: f64 },
}

impl Default for Mobility {
    fn default() -> Self {
        Mobility::Static { distance_m: 100.0 }
    }
}

impl Mobility {
    fn validate(&self) -> Result<(), SimError> {
        let in_range = |d: f64| (0.0..=MAX_RANGE_M).contains(&d);
        match self {
            Mobility::Static { distance_m } if !in_range(*distance_m) => config_err("distance outside 0..10 km"),
            Mobility::Piecewise { points } => {
                if points.is_empty() {
                    return config_err("piecewise mobility needs at least one point");
                }
                if points.iter().any(|&(_, d)| !in_range(d)) {
                    return config_err("distance outside 0..10 km");
                }
                if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return config_err("piecewise times must increase");
                }
                Ok(())
            }
            Mobility::RandomWaypoint { min_m, max_m, speed_mps, pause_s } => {
                if !(in_range(*min_m) && in_range(*max_m) && min_m <= max_m) {
                    return config_err("waypoint range outside 0..10 km");
                }
                if !(*speed_mps > 0.0) || pause_s.is_nan() || *pause_s < 0.0 {
                    return config_err("waypoint speed must be positive and pause non-negative");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Expand into knots covering `duration`.
    pub fn trajectory<R: Rng>(&self, duration: Duration, rng: &mut R) -> Trajectory {
        let end = duration.as_secs_f64();
        let points = match self {
            Mobility::Static { distance_m } => vec![(0.0, *distance_m)],
            Mobility::Piecewise { points } => points.clone(),
            Mobility::RandomWaypoint { min_m, max_m, speed_mps, pause_s } => {
                let pick = |rng: &mut R| if max_m > min_m { rng.random_range(*min_m..=*max_m) } else { *min_m };
                let mut t = 0.0;
                let mut d = pick(rng);
                let mut pts = vec![(t, d)];
                while t <= end {
                    let next = pick(rng);
                    t += (next - d).abs() / speed_mps;
                    d = next;
                    pts.push((t, d));
                    if *pause_s > 0.0 {
                        t += pause_s;
                        pts.push((t, d));
                    }
                }
                pts.dedup_by(|b, a| b.0 <= a.0);
                pts
            }
        };
        Trajectory { points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    points: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn distance(&self, t: TimePoint) -> f64 {
        let s = t.as_secs_f64();
        let p = &self.points;
        let i = p.partition_point(|&(ti, _)| ti <= s);
        if i == 0 {
            return p[0].1;
        }
        if i == p.len() {
            return p[i - 1].1;
        }
        let (t0, d0) = p[i - 1];
        let (t1, d1) = p[i];
        d0 + (d1 - d0) * (s - t0) / (t1 - t0)
    }

    /// One-way propagation delay at `t`.
    pub fn delay(&self, t: TimePoint) -> Duration {
        Duration::from_secs_f64(self.distance(t) / SPEED_OF_LIGHT)
    }
}

// ---------------------------------------------------------------- scenario

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UeSpec {
    /// defaults to 0x4601 + index
    pub rnti: Option<u16>,
    pub config: UeConfig,
    pub mobility: Mobility,
    /// the seed field is replaced by one derived from the scenario seed
    pub clock: OscillatorModel,
    #[serde(rename = "initial_offset_ns", with = "serde_ns")]
    pub initial_offset: Duration,
    /// true mean of the receive-to-output processing delay
    #[serde(rename = "t0_true_ns", with = "serde_ns")]
    pub t0_true: Duration,
    #[serde(rename = "processing_jitter_ns", with = "serde_ns")]
    pub processing_jitter: Duration,
    /// timing advance refresh interval; zero keeps the initial TA
    #[serde(rename = "ta_update_s", with = "serde_s")]
    pub ta_update: Duration,
}

impl Default for UeSpec {
    fn default() -> Self {
        UeSpec {
            rnti: None,
            config: UeConfig::default(),
            mobility: Mobility::default(),
            clock: OscillatorModel::default(),
            initial_offset: Duration::from_us(50),
            t0_true: Duration::ZERO,
            processing_jitter: Duration::ZERO,
            ta_update: Duration::from_secs(1),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    PtpOverAir,
    KAvgTap,
}

/// Two-way exchange over the air with asymmetric stack delays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtpConfig {
    /// log-normal shape of |downlink - uplink| stack delay
    pub asymmetry_sigma: f64,
    /// fraction of exchanges whose error (half the asymmetry) stays below `bound_ns`
    pub target_probability: f64,
    #[serde(rename = "bound_ns", with = "serde_ns")]
    pub bound: Duration,
    /// replaces the random draw when set
    pub fixed_asymmetry_ns: Option<f64>,
    #[serde(rename = "stack_delay_ns", with = "serde_ns")]
    pub stack_delay: Duration,
    #[serde(rename = "turnaround_ns", with = "serde_ns")]
    pub turnaround: Duration,
}

impl Default for PtpConfig {
    fn default() -> Self {
        PtpConfig {
            asymmetry_sigma: 0.8,
            target_probability: 0.978,
            bound: Duration::from_us(1),
            fixed_asymmetry_ns: None,
            stack_delay: Duration::from_us(50),
            turnaround: Duration::from_us(500),
        }
    }
}

impl PtpConfig {
    /// Log-mean (ln ns) of |asymmetry| so that P(|a|/2 < bound) hits the target.
    pub fn asymmetry_mu(&self) -> f64 {
        let z = Normal::standard().inverse_cdf(self.target_probability);
        (2.0 * self.bound.as_ns_f64()).ln() - self.asymmetry_sigma * z
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.asymmetry_sigma > 0.0) || !(self.target_probability > 0.0 && self.target_probability < 1.0) {
            return config_err("ptp asymmetry needs sigma > 0 and target probability in (0, 1)");
        }
        if self.bound.as_ps() <= 0 || self.stack_delay.is_negative() || self.turnaround.is_negative() {
            return config_err("ptp delays must be non-negative and bound positive");
        }
        Ok(())
    }
}

/// The three-path preset used when a scenario omits the channel.
pub fn default_channel() -> ChannelRealization {
    let p = |ns, gain| Path { delay: Duration::from_ns(ns), gain };
    ChannelRealization { paths: vec![p(0, 1.0), p(60, 0.5), p(150, 0.3)], snr_db: 20.0, doppler_hz: 0.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "duration_s", with = "serde_s")]
    pub duration: Duration,
    pub bs: BsConfig,
    pub ues: Vec<UeSpec>,
    pub channel: ChannelRealization,
    pub attack: Option<AttackConfig>,
    pub baseline: Baseline,
    pub ptp: PtpConfig,
    /// independent flip probability for every SIB9 bit
    pub bit_error_probability: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 0,
            duration: Duration::from_secs(60),
            bs: BsConfig::default(),
            ues: vec![UeSpec::default()],
            channel: default_channel(),
            attack: None,
            baseline: Baseline::None,
            ptp: PtpConfig::default(),
            bit_error_probability: 0.0,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Load a scenario file and apply `path=value` overrides.
    pub fn load(path: impl AsRef<FsPath>, overrides: &[String]) -> Result<Self, SimError> {
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, SimError> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, SimError> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn rnti(&self, index: usize) -> u16 {
        self.ues[index].rnti.unwrap_or(0x4601 + index as u16)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.bs.validate()?;
        self.channel.validate()?;
        self.ptp.validate()?;
        if self.duration < self.bs.sib9_period * 2 {
            return config_err("duration must cover at least two SIB9 periods");
        }
        if self.ues.is_empty() {
            return config_err("scenario needs at least one UE");
        }
        let mut seen = std::collections::HashSet::new();
        for (i, ue) in self.ues.iter().enumerate() {
            ue.config.validate()?;
            ue.mobility.validate()?;
            if !seen.insert(self.rnti(i)) {
                return config_err(format!("duplicate rnti {:#06x}", self.rnti(i)));
            }
            if ue.t0_true.is_negative() || ue.processing_jitter.is_negative() || ue.ta_update.is_negative() {
                return config_err("UE delays must be non-negative");
            }
        }
        if !(0.0..=1.0).contains(&self.bit_error_probability) {
            return config_err("bit_error_probability must be in [0, 1]");
        }
        if let Some(a) = &self.attack {
            if a.per_shot_offset.is_negative() || a.replay_delay.as_ps() <= 0 || a.start.is_negative() {
                return config_err("attack offsets must be non-negative and the replay delay positive");
            }
        }
        Ok(())
    }

    /// The UE configs after applying the baseline.
    fn effective_ue_config(&self, index: usize) -> UeConfig {
        let mut c = self.ues[index].config.clone();
        if self.baseline == Baseline::KAvgTap {
            c.mode = StatisticalMode::KAvg;
        }
        c
    }
}

/// Set one dotted path (`ues.0.config.mode=kalman`) in a JSON tree.
///
/// The value is parsed as JSON and falls back to a bare string. Missing
/// object keys are created; array indices must exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), SimError> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return config_err(format!("override {assignment:?} is not path=value"));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| SimError::Config(format!("{key:?} is not an array index in {path}")))?;
                let len = items.len();
                items.get_mut(i).ok_or_else(|| SimError::Config(format!("index {i} out of range ({len}) in {path}")))?
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap().entry(key).or_insert(Value::Null)
            }
            Value::Object(map) => map.entry(key).or_insert(Value::Null),
            _ => return config_err(format!("cannot descend into {key:?} in {path}")),
        };
    }
    *node = value;
    Ok(())
}

// ---------------------------------------------------------------- trace

/// Error decomposition of one observation; all terms in the UE-lags-positive sense.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub e_src: Duration,
    pub e_node: Duration,
    pub e_gr: Duration,
    pub e_ingr: Duration,
    pub e_air: Duration,
    pub t0_residual: Duration,
    /// true master time minus the UE's timing result
    pub e_total: Duration,
}

impl ErrorBudget {
    pub fn sum(&self) -> Duration {
        self.e_src + self.e_node + self.e_gr + self.e_ingr + self.e_air + self.t0_residual
    }

    pub fn is_exact(&self) -> bool {
        self.sum() == self.e_total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    /// frame the SIB9 was decoded in
    pub frame: u64,
    pub obs: OffsetObservation,
    pub phase: Phase,
    pub action: Action,
    pub filtered_correction: Duration,
    /// output correction after this observation
    pub correction: Duration,
    /// true local-minus-master offset of the UE clock
    pub theta: Duration,
    /// output time error, positive when the UE lags
    pub error: Duration,
    pub method: DelayMethod,
    pub origin: Origin,
    pub extra_delay: Duration,
    pub budget: Option<ErrorBudget>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UeTrace {
    pub rnti: u16,
    pub records: Vec<TraceRecord>,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub name: String,
    pub seed: u64,
    pub baseline: Baseline,
    pub sib9_period: Duration,
    pub ues: Vec<UeTrace>,
    pub bs_diagnostics: Vec<String>,
}

// ---------------------------------------------------------------- event loop

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_BS: u64 = 1;
const STREAM_BS_CLOCK: u64 = 2;

fn ue_stream(seed: u64, index: usize, k: u64) -> ChaCha8Rng {
    stream(seed, 16 + 8 * index as u64 + k)
}

#[derive(Clone, Debug)]
enum Event {
    Srs { ue: usize },
    Prepare { frame: u64 },
    Transmit { msg: Sib9Message },
    Decode { ue: usize, frame: u64 },
    TaUpdate { ue: usize },
}

#[derive(Debug)]
struct Scheduled {
    at: TimePoint,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, at: TimePoint, event: Event) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }
    fn pop(&mut self) -> Option<Scheduled> {
        self.heap.pop().map(|r| r.0)
    }
}

struct UeState {
    rnti: u16,
    spec: UeSpec,
    timing: UeTiming,
    clock: OscillatorClock,
    clock_time: TimePoint,
    traj: Trajectory,
    ta: Duration,
    injector: LinkInjector,
    capture: Capture,
    pending: BTreeMap<u64, Vec<Emission>>,
    proc_rng: ChaCha8Rng,
    chan_rng: ChaCha8Rng,
    bit_rng: ChaCha8Rng,
    trace: UeTrace,
}

impl UeState {
    fn new(sc: &Scenario, index: usize, num: &Numerology) -> Self {
        let spec = sc.ues[index].clone();
        let mut model = spec.clock.clone();
        model.seed = ue_stream(sc.seed, index, 0).next_u64();
        let traj = spec.mobility.trajectory(sc.duration, &mut ue_stream(sc.seed, index, 3));
        let ta = ta_round(traj.delay(TimePoint::EPOCH) * 2, num);
        let cap = num.cp / 2;
        let onset = sc.attack.as_ref().map(|a| a.onset_collision).unwrap_or(false);
        UeState {
            rnti: sc.rnti(index),
            timing: UeTiming::new(sc.effective_ue_config(index)),
            clock: OscillatorClock::with_offset(model, spec.initial_offset),
            clock_time: TimePoint::EPOCH,
            traj,
            ta,
            injector: LinkInjector::new(sc.attack.clone(), cap),
            capture: Capture::new(onset),
            pending: BTreeMap::new(),
            proc_rng: ue_stream(sc.seed, index, 1),
            chan_rng: ue_stream(sc.seed, index, 2),
            bit_rng: ue_stream(sc.seed, index, 4),
            trace: UeTrace { rnti: sc.rnti(index), ..Default::default() },
            spec,
        }
    }

    /// Local clock offset at master time `t`.
    fn theta_at(&mut self, t: TimePoint) -> Duration {
        if t > self.clock_time {
            self.clock.advance(t - self.clock_time);
            self.clock_time = t;
        }
        self.clock.offset()
    }
}

/// Nominal master time of a frame boundary, used for scheduling only.
fn frame_time(frame: u64) -> TimePoint {
    TimePoint::EPOCH + FRAME * frame as i64
}

struct Sim<'a> {
    sc: &'a Scenario,
    num: Numerology,
    end: TimePoint,
    bs: BaseStation,
    ues: Vec<UeState>,
    queue: Queue,
    srs: DelayEstimator,
    prs: DelayEstimator,
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, SimError> {
        let num = Numerology::mu1();
        let mut bs_cfg = sc.bs.clone();
        bs_cfg.reference_clock.seed = stream(sc.seed, STREAM_BS_CLOCK).next_u64();
        let bs = BaseStation::new(bs_cfg, num, stream(sc.seed, STREAM_BS).next_u64())?;
        let srs = DelayEstimator::new(&gen_zc(SRS_ROOT, SEQ_LEN)?, DelayMethod::Srs, num)?;
        let prs = DelayEstimator::new(&gen_prs(PRS_C_INIT, SEQ_LEN), DelayMethod::Prs, num)?;
        let ues = (0..sc.ues.len()).map(|i| UeState::new(sc, i, &num)).collect();
        Ok(Sim { sc, num, end: TimePoint::EPOCH + sc.duration, bs, ues, queue: Queue::default(), srs, prs })
    }

    fn schedule_all(&mut self) {
        let cfg = self.bs.config().clone();
        let fpp = cfg.frames_per_period();
        for k in 1.. {
            let frame = k * fpp;
            let boundary = frame_time(frame) + cfg.t_c;
            if boundary > self.end {
                break;
            }
            let prepare = boundary - cfg.sched_pre;
            for (i, ue) in self.ues.iter().enumerate() {
                if ue.timing.config().features.srs_comp {
                    self.queue.push(prepare - Duration::from_ms(1), Event::Srs { ue: i });
                }
            }
            self.queue.push(prepare, Event::Prepare { frame });
        }
        for (i, ue) in self.ues.iter().enumerate() {
            let step = ue.spec.ta_update;
            if step.as_ps() > 0 {
                let mut t = TimePoint::EPOCH + step;
                while t <= self.end {
                    self.queue.push(t, Event::TaUpdate { ue: i });
                    t += step;
                }
            }
        }
    }

    fn run(mut self) -> Result<Trace, SimError> {
        self.schedule_all();
        while let Some(Scheduled { at, event, .. }) = self.queue.pop() {
            match event {
                Event::Srs { ue } => self.on_srs(at, ue),
                Event::Prepare { frame } => {
                    let msg = self.bs.generate_sib9(frame);
                    self.queue.push(frame_time(frame) + self.bs.config().t_c, Event::Transmit { msg });
                }
                Event::Transmit { msg } => self.on_transmit(at, &msg)?,
                Event::Decode { ue, frame } => self.on_decode(ue, frame),
                Event::TaUpdate { ue } => {
                    let u = &mut self.ues[ue];
                    u.ta = ta_round(u.traj.delay(at) * 2, &self.num);
                }
            }
        }
        Ok(Trace {
            name: self.sc.name.clone(),
            seed: self.sc.seed,
            baseline: self.sc.baseline,
            sib9_period: self.sc.bs.sib9_period,
            bs_diagnostics: std::mem::take(&mut self.bs.diagnostics),
            ues: self.ues.into_iter().map(|u| u.trace).collect(),
        })
    }

    /// Uplink SRS: the BS window opens at the UE's TA minus a guard.
    fn on_srs(&mut self, now: TimePoint, i: usize) {
        let guard = self.num.ts * 16;
        let u = &mut self.ues[i];
        let round_trip = u.traj.delay(now) * 2;
        let window_start = u.ta - guard;
        let rx = apply_channel(self.srs.transmitted(), &self.sc.channel, round_trip - window_start, &self.num, u.chan_rng.next_u64());
        if let Err(e) = self.bs.serve_srs(u.rnti, &rx, window_start, &self.srs) {
            u.trace.diagnostics.push(format!("{now}: srs for {:#06x} failed: {e}", u.rnti));
        }
    }

    fn on_transmit(&mut self, now: TimePoint, msg: &Sib9Message) -> Result<(), SimError> {
        let tx = self.bs.transmit_event(msg)?;
        let src = self.bs.source_offset(now);
        let node = self.bs.node_offset();
        let emission = Emission {
            frame: tx.frame,
            on_air: tx.actual - (src + node),
            bits: tx.bits,
            extra_delay: Duration::ZERO,
            origin: Origin::Bs,
            power_db: 0.0,
            truth: EmissionTruth {
                stamp: tx.intended,
                src_offset: src,
                node_offset: node,
                trigger_error: tx.trigger_error,
                slip: FRAME * tx.slip_frames as i64,
                replay_delay: Duration::ZERO,
            },
        };
        for (i, u) in self.ues.iter_mut().enumerate() {
            for e in u.injector.apply(emission.clone()) {
                let decode_at = frame_time(e.frame) + FRAME / 2;
                if decode_at > self.end {
                    continue;
                }
                let slot = u.pending.entry(e.frame).or_default();
                if slot.is_empty() {
                    self.queue.push(decode_at, Event::Decode { ue: i, frame: e.frame });
                }
                slot.push(e);
            }
        }
        Ok(())
    }

    fn on_decode(&mut self, i: usize, frame: u64) {
        let num = self.num;
        let gr = self.bs.config().gr;
        let ber = self.sc.bit_error_probability;
        let u = &mut self.ues[i];
        let arrivals = u.pending.remove(&frame).unwrap_or_default();
        let Some(rx) = u.capture.resolve(arrivals) else { return };
        let mut e = rx.emission;
        if ber > 0.0 {
            for b in 0..e.bits.len() {
                if u.bit_rng.random::<f64>() < ber {
                    e.bits.flip(b);
                }
            }
        }
        let decoded = match decode_sib9(&e.bits) {
            Ok(d) => d,
            Err(err) => {
                u.trace.diagnostics.push(format!("frame {frame}: undecodable sib9: {err}"));
                return;
            }
        };
        let msg = &decoded.message;
        let cfg = u.timing.config().clone();

        // ground truth
        let d_true = u.traj.delay(e.on_air);
        let p_true = (u.spec.t0_true + gaussian(&mut u.proc_rng, u.spec.processing_jitter)).max(Duration::ZERO);
        let truth_now = e.on_air + d_true + e.extra_delay + p_true;
        let theta = u.theta_at(truth_now);
        let t_ue = truth_now + theta;

        // delay estimates
        let srs = if cfg.features.srs_comp { msg.srs_delay_for(u.rnti) } else { None };
        let t_est = match srs {
            Some(units) => DelayEstimate { method: DelayMethod::Srs, value: num.tc * units as i64, resolution: num.tc },
            None => DelayEstimate { method: DelayMethod::Ta, value: u.ta / 2, resolution: num.ta_step() },
        };
        let d_prs = if cfg.features.prs_sensing {
            let guard = num.ts * 8;
            let shift = d_true - u.ta / 2 + guard;
            let rx = apply_channel(self.prs.transmitted(), &self.sc.channel, shift, &num, u.chan_rng.next_u64());
            self.prs.estimate(&rx).ok().map(|est| u.ta / 2 - guard + est.value)
        } else {
            None
        };
        let d_srs = srs.map(|units| num.tc * (2 * units as i64));

        let mut obs = compute_offset(msg, gr, &t_est, t_ue, cfg.t0, truth_now);
        let checks = mechanism_checks(&decoded, e.frame, d_srs, d_prs, &cfg);
        let out = u.timing.process(&mut obs, &checks);

        let tr = e.truth;
        let budget = ErrorBudget {
            e_src: -tr.src_offset,
            e_node: -tr.node_offset,
            e_gr: (tr.stamp - obs.t_bs_stamp) + tr.slip + tr.replay_delay,
            e_ingr: tr.trigger_error,
            e_air: d_true + e.extra_delay - t_est.value,
            t0_residual: p_true - cfg.t0,
            e_total: truth_now - obs.t_result(),
        };
        debug_assert!(budget.is_exact());
        let correction = u.timing.correction();
        u.trace.records.push(TraceRecord {
            frame: e.frame,
            obs,
            phase: out.phase,
            action: out.action,
            filtered_correction: out.filtered_correction,
            correction,
            theta,
            error: correction - theta,
            method: t_est.method,
            origin: e.origin,
            extra_delay: e.extra_delay,
            budget: Some(budget),
        });
    }
}

/// Run a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    scenario.validate()?;
    if scenario.baseline == Baseline::PtpOverAir {
        return ptp_baseline(scenario);
    }
    Sim::new(scenario)?.run()
}

/// Run the same scenario under several seeds in parallel; order follows `seeds`.
pub fn run_batch(scenario: &Scenario, seeds: &[u64]) -> Vec<Result<Trace, SimError>> {
    seeds
        .par_iter()
        .map(|&seed| run(&Scenario { seed, ..scenario.clone() }))
        .collect()
}

// ---------------------------------------------------------------- PTP

/// Twice the two-way offset estimate, `(t2 - t1) - (t4 - t3)`; exact.
pub fn ptp_offset_x2(t1: TimePoint, t2: TimePoint, t3: TimePoint, t4: TimePoint) -> Duration {
    (t2 - t1) - (t4 - t3)
}

/// `t2 - [t1 + (t2 - t1 + t4 - t3) / 2]`, the mean path truncated to whole ps.
pub fn ptp_offset(t1: TimePoint, t2: TimePoint, t3: TimePoint, t4: TimePoint) -> Duration {
    t2 - (t1 + ptp_mean_path(t1, t2, t3, t4))
}

fn ptp_mean_path(t1: TimePoint, t2: TimePoint, t3: TimePoint, t4: TimePoint) -> Duration {
    ((t2 - t1) + (t4 - t3)) / 2
}

/// Per-exchange asymmetry sampler (downlink minus uplink stack delay).
pub struct AsymmetrySampler {
    fixed: Option<Duration>,
    dist: LogNormal<f64>,
}

impl AsymmetrySampler {
    pub fn new(cfg: &PtpConfig) -> Self {
        AsymmetrySampler {
            fixed: cfg.fixed_asymmetry_ns.map(Duration::from_ns_f64),
            dist: LogNormal::new(cfg.asymmetry_mu(), cfg.asymmetry_sigma).expect("sigma validated"),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Duration {
        if let Some(a) = self.fixed {
            return a;
        }
        let mag = Duration::from_ns_f64(self.dist.sample(rng));
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    }
}

/// PTP over the air: one two-way exchange per SIB9 period, correction
/// applied on every exchange. The master side is ideal.
pub fn ptp_baseline(scenario: &Scenario) -> Result<Trace, SimError> {
    scenario.validate()?;
    let sc = scenario;
    let cfg = &sc.ptp;
    let sampler = AsymmetrySampler::new(cfg);
    let period = sc.bs.sib9_period;
    let fpp = sc.bs.frames_per_period();
    let end = TimePoint::EPOCH + sc.duration;
    let mut ues = Vec::new();
    for i in 0..sc.ues.len() {
        let spec = &sc.ues[i];
        let mut model = spec.clock.clone();
        model.seed = ue_stream(sc.seed, i, 0).next_u64();
        let mut clock = OscillatorClock::with_offset(model, spec.initial_offset);
        let mut clock_time = TimePoint::EPOCH;
        let mut theta_at = |t: TimePoint| {
            if t > clock_time {
                clock.advance(t - clock_time);
                clock_time = t;
            }
            clock.offset()
        };
        let traj = spec.mobility.trajectory(sc.duration, &mut ue_stream(sc.seed, i, 3));
        let mut rng = ue_stream(sc.seed, i, 5);
        let mut trace = UeTrace { rnti: sc.rnti(i), ..Default::default() };
        let mut k = 1u64;
        loop {
            let m1 = TimePoint::EPOCH + period * k as i64;
            if m1 > end {
                break;
            }
            let a = sampler.sample(&mut rng);
            let dl = traj.delay(m1) + cfg.stack_delay + a.max(Duration::ZERO);
            let m2 = m1 + dl;
            let theta = theta_at(m2);
            let t2 = m2 + theta;
            let m3 = m2 + cfg.turnaround;
            let t3 = m3 + theta_at(m3);
            let ul = traj.delay(m3) + cfg.stack_delay + (-a).max(Duration::ZERO);
            let t4 = m3 + ul;
            let t1 = m1;

            let mut obs = OffsetObservation::new(m2, t1, t2, ptp_mean_path(t1, t2, t3, t4), Duration::ZERO);
            obs.accepted = true;
            let correction = obs.t_offset;
            trace.records.push(TraceRecord {
                frame: k * fpp,
                obs,
                phase: Phase::S2,
                action: Action::Step,
                filtered_correction: Duration::ZERO,
                correction,
                theta,
                error: correction - theta,
                method: DelayMethod::Ta,
                origin: Origin::Bs,
                extra_delay: Duration::ZERO,
                budget: None,
            });
            k += 1;
        }
        ues.push(trace);
    }
    Ok(Trace { name: sc.name.clone(), seed: sc.seed, baseline: sc.baseline, sib9_period: period, ues, bs_diagnostics: vec![] })
}

// ---------------------------------------------------------------- statistics

/// Nearest-rank percentile (`p` in percent) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty series");
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    let mut v = values.to_vec();
    let (_, x, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99_9: f64,
    pub p99_99: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPlot {
    /// whisker ends: extreme values inside the 1.5 IQR fences
    pub low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub high: f64,
    pub outliers: Vec<f64>,
}

pub fn boxplot(values: &[f64]) -> BoxPlot {
    let q1 = percentile(values, 25.0);
    let median = percentile(values, 50.0);
    let q3 = percentile(values, 75.0);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = values.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v));
    let low = inside.clone().fold(f64::INFINITY, f64::min);
    let high = inside.fold(f64::NEG_INFINITY, f64::max);
    let outliers = values.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect();
    BoxPlot { low, q1, median, q3, high, outliers }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeSummary {
    pub rnti: u16,
    pub observations: usize,
    pub accepted: usize,
    pub rejects: BTreeMap<String, usize>,
    /// error statistics in ns, from the first accepted observation on
    pub samples: usize,
    pub mean_abs_error_ns: f64,
    pub abs_percentiles_ns: Percentiles,
    pub min_error_ns: f64,
    pub max_error_ns: f64,
    pub boxplot_ns: BoxPlot,
    pub allan: Vec<AllanPoint>,
    pub allan_argmin_tau_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub baseline: Baseline,
    pub ues: Vec<UeSummary>,
}

/// Output errors (ns) from the first accepted observation on.
pub fn settled_errors(ue: &UeTrace) -> Vec<f64> {
    let start = ue.records.iter().position(|r| r.obs.accepted).unwrap_or(ue.records.len());
    ue.records[start..].iter().map(|r| r.error.as_ns_f64()).collect()
}

/// Raw offsets on the nominal SIB9 grid, longest gap-free run of observations
/// that passed the mechanism checks.
pub fn allan_series(ue: &UeTrace, period: Duration) -> Vec<(TimePoint, Duration)> {
    let fpp = (period / FRAME) as u64;
    let start = ue.records.iter().position(|r| r.obs.accepted).unwrap_or(ue.records.len());
    let usable = ue.records[start..].iter().filter(|r| {
        !matches!(r.obs.reject_reason, RejectReason::CrcFail | RejectReason::SfnMismatch | RejectReason::PrsSenseFail)
    });
    let mut best: Vec<(TimePoint, Duration)> = Vec::new();
    let mut cur: Vec<(TimePoint, Duration)> = Vec::new();
    let mut last_frame = None;
    for r in usable {
        let contiguous = last_frame.is_some_and(|f| r.frame == f + fpp);
        if !contiguous {
            if cur.len() > best.len() {
                best = std::mem::take(&mut cur);
            }
            cur.clear();
        }
        cur.push((frame_time(r.frame), r.obs.t_offset));
        last_frame = Some(r.frame);
    }
    if cur.len() > best.len() {
        best = cur;
    }
    best
}

pub fn summarize_ue(ue: &UeTrace, period: Duration) -> UeSummary {
    let mut rejects = BTreeMap::new();
    for r in &ue.records {
        if r.obs.reject_reason != RejectReason::None {
            *rejects.entry(r.obs.reject_reason.as_str().to_string()).or_insert(0) += 1;
        }
    }
    let errors = settled_errors(ue);
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let (mean, pct, min, max, bp) = if errors.is_empty() {
        let nan = f64::NAN;
        (nan, Percentiles { p50: nan, p90: nan, p99_9: nan, p99_99: nan }, nan, nan, BoxPlot {
            low: nan,
            q1: nan,
            median: nan,
            q3: nan,
            high: nan,
            outliers: vec![],
        })
    } else {
        (
            abs.iter().sum::<f64>() / abs.len() as f64,
            Percentiles {
                p50: percentile(&abs, 50.0),
                p90: percentile(&abs, 90.0),
                p99_9: percentile(&abs, 99.9),
                p99_99: percentile(&abs, 99.99),
            },
            errors.iter().copied().fold(f64::INFINITY, f64::min),
            errors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            boxplot(&errors),
        )
    };
    let series = allan_series(ue, period);
    let curve = allan_curve(&series, &octave_tau_grid(period, series.len()));
    UeSummary {
        rnti: ue.rnti,
        observations: ue.records.len(),
        accepted: ue.records.iter().filter(|r| r.obs.accepted).count(),
        rejects,
        samples: errors.len(),
        mean_abs_error_ns: mean,
        abs_percentiles_ns: pct,
        min_error_ns: min,
        max_error_ns: max,
        boxplot_ns: bp,
        allan_argmin_tau_s: curve.argmin().map(|p| p.tau.as_secs_f64()),
        allan: curve.points,
    }
}

pub fn summarize(trace: &Trace) -> Summary {
    Summary {
        name: trace.name.clone(),
        seed: trace.seed,
        baseline: trace.baseline,
        ues: trace.ues.iter().map(|u| summarize_ue(u, trace.sib9_period)).collect(),
    }
}

// ---------------------------------------------------------------- output

fn phase_str(p: Phase) -> &'static str {
    match p {
        Phase::S0 => "S0",
        Phase::S1 => "S1",
        Phase::S2 => "S2",
    }
}

/// Per-UE output log: one row per decoded SIB9.
pub fn write_ue_log<W: Write>(out: W, ue: &UeTrace) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_master_ps", "phase", "t_offset_ps", "accepted", "reject_reason", "filtered_correction_ps", "error_ps"])?;
    for r in &ue.records {
        w.write_record([
            r.obs.t_master.as_ps().to_string(),
            phase_str(r.phase).to_string(),
            r.obs.t_offset.as_ps().to_string(),
            r.obs.accepted.to_string(),
            r.obs.reject_reason.as_str().to_string(),
            r.filtered_correction.as_ps().to_string(),
            r.error.as_ps().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_budget_csv<W: Write>(out: W, ue: &UeTrace) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_master_ps", "e_src_ps", "e_node_ps", "e_gr_ps", "e_ingr_ps", "e_air_ps", "t0_residual_ps", "e_total_ps"])?;
    for r in &ue.records {
        let Some(b) = r.budget else { continue };
        let cells = [b.e_src, b.e_node, b.e_gr, b.e_ingr, b.e_air, b.t0_residual, b.e_total];
        let mut row = vec![r.obs.t_master.as_ps().to_string()];
        row.extend(cells.iter().map(|c| c.as_ps().to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn offset_records(ue: &UeTrace) -> Vec<OffsetRecord> {
    ue.records
        .iter()
        .map(|r| OffsetRecord {
            t_master_ps: r.obs.t_master.as_ps(),
            offset_ps: r.obs.t_offset.as_ps(),
            accepted: r.obs.accepted,
            reject_reason: r.obs.reject_reason,
        })
        .collect()
}

/// Write `ue_<rnti>_{log,offsets,budget,allan}.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: impl AsRef<FsPath>, trace: &Trace, summary: &Summary) -> Result<(), SimError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let create = |name: String| -> Result<BufWriter<File>, SimError> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    for (ue, s) in trace.ues.iter().zip(&summary.ues) {
        let tag = format!("ue_{:04x}", ue.rnti);
        write_ue_log(create(format!("{tag}_log.csv"))?, ue)?;
        write_offset_csv(create(format!("{tag}_offsets.csv"))?, &offset_records(ue))?;
        if ue.records.iter().any(|r| r.budget.is_some()) {
            write_budget_csv(create(format!("{tag}_budget.csv"))?, ue)?;
        }
        write_allan_csv(create(format!("{tag}_allan.csv"))?, &s.allan)?;
    }
    let mut f = create("summary.json".into())?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ue::Features;

    fn quiet() -> Scenario {
        let ue = UeSpec {
            config: UeConfig { mode: StatisticalMode::None, ..Default::default() },
            mobility: Mobility::Static { distance_m: 300.0 },
            ..Default::default()
        };
        Scenario { duration: Duration::from_secs(10), ues: vec![ue], ..Default::default() }
    }

    #[test]
    fn budget_is_exact_and_deterministic() {
        let sc = quiet();
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a, b);
        let recs = &a.ues[0].records;
        assert!(recs.len() >= 29, "{}", recs.len());
        for r in recs {
            let bud = r.budget.unwrap();
            assert!(bud.is_exact());
            assert_eq!(bud.e_total, r.obs.t_offset - r.theta);
        }
    }

    #[test]
    fn noiseless_world_has_zero_error() {
        let mut sc = quiet();
        sc.bs.trigger_delay = Duration::ZERO;
        sc.bs.t_p = Duration::from_secs(1);
        sc.channel = ChannelRealization::single_path(f64::INFINITY);
        // a distance that is a whole number of Tc
        let tc = Numerology::mu1().tc;
        sc.ues[0].mobility = Mobility::Static { distance_m: (tc * 1000).as_secs_f64() * SPEED_OF_LIGHT };
        sc.ues[0].config.features = Features::ta_only();
        sc.ues[0].config.features.srs_comp = true;
        let t = run(&sc).unwrap();
        let recs = &t.ues[0].records;
        assert!(!recs.is_empty());
        // the first SIB9 carries no SRS pair yet
        for r in recs.iter().skip(1) {
            assert_eq!(r.method, DelayMethod::Srs);
            assert_eq!(r.budget.unwrap().e_total, Duration::ZERO, "{:?}", r.budget);
            assert_eq!(r.error, Duration::ZERO);
        }
    }

    #[test]
    fn ptp_fixed_asymmetry_gives_half() {
        let mut sc = quiet();
        sc.baseline = Baseline::PtpOverAir;
        sc.ptp.fixed_asymmetry_ns = Some(-700.0);
        let t = run(&sc).unwrap();
        for r in &t.ues[0].records {
            assert_eq!(r.error, Duration::from_ns(-350));
        }
    }

    #[test]
    fn ptp_calibration_hits_target() {
        let cfg = PtpConfig::default();
        let s = AsymmetrySampler::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let hits = (0..n).filter(|_| s.sample(&mut rng).abs() < cfg.bound * 2).count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.978).abs() < 0.002, "{frac}");
    }

    #[test]
    fn override_paths() {
        let mut v = serde_json::to_value(quiet()).unwrap();
        apply_override(&mut v, "ues.0.config.mode=kalman").unwrap();
        apply_override(&mut v, "seed=7").unwrap();
        apply_override(&mut v, "attack.kind=replay").unwrap();
        let sc: Scenario = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.ues[0].config.mode, StatisticalMode::Kalman);
        assert_eq!(sc.attack.unwrap().kind, crate::attack::AttackKind::Replay);
        assert!(apply_override(&mut v, "ues.3.config.k=5").is_err());
        assert!(apply_override(&mut v, "nonsense").is_err());
    }

    #[test]
    fn invalid_scenarios_fail_early() {
        let mut sc = quiet();
        sc.duration = Duration::from_ms(500);
        assert!(matches!(run(&sc), Err(SimError::Config(_))));
        let mut sc = quiet();
        sc.ues[0].mobility = Mobility::Static { distance_m: 12_000.0 };
        assert!(matches!(run(&sc), Err(SimError::Config(_))));
        let mut sc = quiet();
        sc.ues.push(UeSpec { rnti: Some(0x4601), ..Default::default() });
        assert!(sc.validate().is_err());
    }

    #[test]
    fn trajectory_interpolates() {
        let m = Mobility::Piecewise { points: vec![(0.0, 100.0), (10.0, 200.0)] };
        let t = m.trajectory(Duration::from_secs(20), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.distance(TimePoint::EPOCH + Duration::from_secs(5)), 150.0);
        assert_eq!(t.distance(TimePoint::EPOCH + Duration::from_secs(15)), 200.0);
        let rw = Mobility::RandomWaypoint { min_m: 0.0, max_m: 100.0, speed_mps: 1.0, pause_s: 1.0 };
        let t = rw.trajectory(Duration::from_secs(600), &mut ChaCha8Rng::seed_from_u64(1));
        for s in 0..600 {
            let d = t.distance(TimePoint::EPOCH + Duration::from_secs(s));
            assert!((0.0..=100.0).contains(&d));
        }
    }

    #[test]
    fn constant_errors_give_constant_percentiles() {
        let v = vec![-4.5; 37];
        let abs: Vec<f64> = v.iter().map(|x: &f64| x.abs()).collect();
        for p in [50.0, 90.0, 99.9, 99.99] {
            assert_eq!(percentile(&abs, p), 4.5);
        }
        let b = boxplot(&v);
        assert!(b.outliers.is_empty());
        assert_eq!(b.median, -4.5);
    }
}
