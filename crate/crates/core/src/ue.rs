//! UE timing module: per-message checks, the three-phase state machine,
//! statistical smoothing, the gated output timer and t0 calibration.
//!
//! Offsets are taken against the UE's free-running clock. The module keeps
//! an output `correction`; the corrected time is `raw - correction`, so the
//! residual `t_offset - correction` is what the thresholds look at.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{OffsetObservation, RejectReason};
use crate::phy::{DelayEstimate, Numerology};
use crate::signaling::{Decoded, Sib9Message};
use crate::time::{serde_ns, Duration, TimePoint};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum UeError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("processing took {elapsed}, budget is {budget}")]
    Overrun { elapsed: Duration, budget: Duration },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticalMode {
    None,
    #[default]
    Kalman,
    KAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Features {
    /// use the SRS delay carried in SIB9 instead of TA/2
    pub srs_comp: bool,
    pub prs_sensing: bool,
    pub sfn_check: bool,
    pub crc_check: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features { srs_comp: true, prs_sensing: true, sfn_check: true, crc_check: true }
    }
}

impl Features {
    pub fn ta_only() -> Self {
        Features { srs_comp: false, prs_sensing: false, sfn_check: false, crc_check: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UeConfig {
    #[serde(rename = "th0_ns", with = "serde_ns")]
    pub th0: Duration,
    #[serde(rename = "th1_ns", with = "serde_ns")]
    pub th1: Duration,
    pub epsilon: f64,
    /// sensing unit dt of the PRS consistency check
    #[serde(rename = "prs_dt_ns", with = "serde_ns")]
    pub prs_dt: Duration,
    #[serde(rename = "t0_ns", with = "serde_ns")]
    pub t0: Duration,
    pub lock_count: u32,
    pub mode: StatisticalMode,
    /// seconds^2
    pub kalman_q: f64,
    /// seconds^2
    pub kalman_r: f64,
    pub k: usize,
    pub features: Features,
}

impl Default for UeConfig {
    fn default() -> Self {
        UeConfig {
            th0: Duration::from_ns(2340),
            th1: Duration::from_ns(260),
            epsilon: 1.0,
            prs_dt: Numerology::mu1().ts,
            t0: Duration::ZERO,
            lock_count: 3,
            mode: StatisticalMode::Kalman,
            kalman_q: 1e-18,
            kalman_r: 1e-14,
            k: 50,
            features: Features::default(),
        }
    }
}

impl UeConfig {
    pub fn validate(&self) -> Result<(), UeError> {
        let bad = |m: &str| Err(UeError::Param(m.to_string()));
        if self.th1 >= self.th0 || self.th1.is_negative() {
            return bad("need 0 <= th1 < th0");
        }
        if self.lock_count < 1 {
            return bad("lock_count must be >= 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.kalman_q >= 0.0 && self.kalman_r > 0.0) {
            return bad("kalman_q must be >= 0 and kalman_r > 0");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if self.t0.is_negative() || self.t0 >= Duration::from_secs(1) {
            return bad("t0 must lie in [0, 1 s)");
        }
        Ok(())
    }

    fn prs_bound(&self) -> Duration {
        Duration::from_ps((self.epsilon * self.prs_dt.as_ps() as f64).round() as i64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[default]
    S0,
    S1,
    S2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// first result taken in S0
    Accept,
    /// S0 result failed a check
    Reject,
    /// S1 correction applied
    Step,
    /// S1 residual beyond th0, back to S0
    Reset,
    /// S1 result failed a check
    Interrupt,
    /// S2 result failed a check, back to S1
    Demote,
    /// S2 result passed; no mechanism correction
    Hold,
}

impl Action {
    pub fn applies_correction(self) -> bool {
        matches!(self, Action::Accept | Action::Step)
    }
}

/// Outcome of the per-message checks; `None` fields were not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checks {
    pub crc_ok: Option<bool>,
    pub sfn_ok: Option<bool>,
    pub prs_ok: Option<bool>,
}

impl Checks {
    pub fn pass() -> Self {
        Checks::default()
    }

    pub fn first_failure(&self) -> Option<RejectReason> {
        if self.crc_ok == Some(false) {
            Some(RejectReason::CrcFail)
        } else if self.sfn_ok == Some(false) {
            Some(RejectReason::SfnMismatch)
        } else if self.prs_ok == Some(false) {
            Some(RejectReason::PrsSenseFail)
        } else {
            None
        }
    }

    pub fn passed(&self) -> bool {
        self.first_failure().is_none()
    }
}

/// Absolute timing result and raw offset for one decoded SIB9.
///
/// `t_master` only tags the observation for later analysis.
pub fn compute_offset(
    msg: &Sib9Message,
    gr: Duration,
    t_est: &DelayEstimate,
    t_ue_local: TimePoint,
    t0: Duration,
    t_master: TimePoint,
) -> OffsetObservation {
    OffsetObservation::new(t_master, msg.timestamp(gr), t_ue_local, t_est.value, t0)
}

/// Reference-SFN, CRC and PRS consistency checks.
///
/// `d_srs` is the SRS round trip, `d_prs` the PRS one-way estimate (`None`
/// when nothing was detected). Disabled features are left unevaluated.
pub fn mechanism_checks(
    decoded: &Decoded,
    current_sfn: u64,
    d_srs: Option<Duration>,
    d_prs: Option<Duration>,
    config: &UeConfig,
) -> Checks {
    let f = config.features;
    let mut c = Checks::default();
    if f.crc_check {
        c.crc_ok = Some(decoded.crc_ok);
    }
    if f.sfn_check {
        c.sfn_ok = Some(decoded.message.ref_sfn as u64 == current_sfn % 1024);
    }
    if f.prs_sensing {
        if let Some(srs) = d_srs {
            c.prs_ok = Some(match d_prs {
                Some(prs) => (srs / 2 - prs).abs() < config.prs_bound(),
                None => false,
            });
        }
    }
    c
}

/// Phase and lock counter only; corrections are applied by [`UeTiming`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub phase: Phase,
    pub consecutive_ok: u32,
}

/// One transition of the three-phase control.
///
/// `residual` is the new offset relative to the current output.
pub fn step_state_machine(state: MachineState, residual: Duration, checks: &Checks, config: &UeConfig) -> (MachineState, Action) {
    let ok = checks.passed();
    let r = residual.abs();
    match state.phase {
        Phase::S0 if ok => (MachineState { phase: Phase::S1, consecutive_ok: 0 }, Action::Accept),
        Phase::S0 => (state, Action::Reject),
        Phase::S1 if !ok => (state, Action::Interrupt),
        Phase::S1 if r > config.th0 => (MachineState { phase: Phase::S0, consecutive_ok: 0 }, Action::Reset),
        Phase::S1 if r <= config.th1 => {
            let n = state.consecutive_ok + 1;
            let phase = if n >= config.lock_count { Phase::S2 } else { Phase::S1 };
            (MachineState { phase, consecutive_ok: n }, Action::Step)
        }
        Phase::S1 => (MachineState { phase: Phase::S1, consecutive_ok: 0 }, Action::Step),
        Phase::S2 if ok => (state, Action::Hold),
        Phase::S2 => (MachineState { phase: Phase::S1, consecutive_ok: 0 }, Action::Demote),
    }
}

/// Scalar random-walk Kalman filter on the cumulative offset, in ps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KalmanState {
    pub estimate: f64,
    pub covariance: f64,
    /// sum of all dtheta fed so far
    pub cumulative: i64,
    /// estimate already handed out, rounded
    pub applied: i64,
}

impl KalmanState {
    pub fn new(config: &UeConfig) -> Self {
        KalmanState { covariance: config.kalman_r * 1e24, ..Default::default() }
    }
}

/// Feed one dtheta; returns the correction increment (a whole number of ps).
pub fn kalman_update(state: &mut KalmanState, dtheta: Duration, config: &UeConfig) -> Duration {
    let q = config.kalman_q * 1e24;
    let r = config.kalman_r * 1e24;
    state.cumulative += dtheta.as_ps();
    let prior = state.covariance + q;
    let gain = prior / (prior + r);
    state.estimate += gain * (state.cumulative as f64 - state.estimate);
    state.covariance = (1.0 - gain) * prior;
    let rounded = state.estimate.round() as i64;
    let inc = rounded - state.applied;
    state.applied = rounded;
    Duration::from_ps(inc)
}

/// Steady-state prior covariance and gain for process/measurement variances.
pub fn kalman_steady_state(q: f64, r: f64) -> (f64, f64) {
    let prior = (q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
    (prior, prior / (prior + r))
}

/// True when the trace spans `window` and every correction in its last
/// `window` stays within `bound`.
pub fn converged(corrections: &[(TimePoint, Duration)], window: Duration, bound: Duration) -> bool {
    let Some(&(last, _)) = corrections.last() else { return false };
    if last - corrections[0].0 < window {
        return false;
    }
    corrections.iter().rev().take_while(|(t, _)| last - *t <= window).all(|(_, c)| c.abs() <= bound)
}

/// Median-based t0 estimate (the L1 minimiser; lower median for even sizes).
pub fn calibrate_t0(errors: &[Duration]) -> Result<Duration, UeError> {
    if errors.is_empty() {
        return Err(UeError::Param("no calibration samples".into()));
    }
    let mut v = errors.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable(k);
    Ok(*m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatedOutput {
    /// local time at which the output edge is released
    pub release: TimePoint,
    /// time value announced at that edge
    pub value: TimePoint,
}

/// Hold a transcoded time for `1 s - t0` so the edge lands on `t + 1 s`.
pub fn gated_output(transcode_result: TimePoint, processing_elapsed: Duration, t0: Duration) -> Result<GatedOutput, UeError> {
    let second = Duration::from_secs(1);
    if t0.is_negative() || t0 >= second {
        return Err(UeError::Param(format!("t0 {t0} outside [0, 1 s)")));
    }
    let budget = second - t0;
    if processing_elapsed > budget {
        return Err(UeError::Overrun { elapsed: processing_elapsed, budget });
    }
    Ok(GatedOutput { release: transcode_result + budget, value: transcode_result + second })
}

/// Result of feeding one observation to [`UeTiming`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub phase: Phase,
    pub action: Action,
    /// change of the output correction caused by this observation
    pub filtered_correction: Duration,
}

/// Full UE timing state: control phase, filters and the output correction.
#[derive(Clone, Debug)]
pub struct UeTiming {
    config: UeConfig,
    machine: MachineState,
    correction: Duration,
    base: Duration,
    last_fed: Option<Duration>,
    kalman: KalmanState,
    window: VecDeque<Duration>,
    window_sum: i64,
}

impl UeTiming {
    pub fn new(config: UeConfig) -> Self {
        let kalman = KalmanState::new(&config);
        UeTiming {
            config,
            machine: MachineState::default(),
            correction: Duration::ZERO,
            base: Duration::ZERO,
            last_fed: None,
            kalman,
            window: VecDeque::new(),
            window_sum: 0,
        }
    }

    pub fn config(&self) -> &UeConfig {
        &self.config
    }
    pub fn phase(&self) -> Phase {
        self.machine.phase
    }
    pub fn machine(&self) -> MachineState {
        self.machine
    }
    /// Current output correction: corrected time is raw local time minus this.
    pub fn correction(&self) -> Duration {
        self.correction
    }
    pub fn last_accepted_offset(&self) -> Option<Duration> {
        self.last_fed
    }
    pub fn kalman(&self) -> &KalmanState {
        &self.kalman
    }

    fn restart(&mut self, raw: Duration) {
        self.base = raw;
        self.kalman = KalmanState::new(&self.config);
        self.window.clear();
        self.window.push_back(raw);
        self.window_sum = raw.as_ps();
        self.last_fed = Some(raw);
        self.correction = raw;
    }

    /// Feed the statistical stage; returns the new correction.
    fn feed(&mut self, raw: Duration) -> Duration {
        let prev = self.last_fed.unwrap_or(raw);
        self.last_fed = Some(raw);
        match self.config.mode {
            StatisticalMode::None => raw,
            StatisticalMode::Kalman => {
                kalman_update(&mut self.kalman, raw - prev, &self.config);
                self.base + Duration::from_ps(self.kalman.applied)
            }
            StatisticalMode::KAvg => {
                self.window.push_back(raw);
                self.window_sum += raw.as_ps();
                while self.window.len() > self.config.k {
                    self.window_sum -= self.window.pop_front().unwrap().as_ps();
                }
                let n = self.window.len() as f64;
                Duration::from_ps((self.window_sum as f64 / n).round() as i64)
            }
        }
    }

    /// Run the checks' verdict and thresholds over `obs`, update the output
    /// and mark the observation accepted or rejected.
    pub fn process(&mut self, obs: &mut OffsetObservation, checks: &Checks) -> StepOutcome {
        obs.dtheta = match self.last_fed {
            Some(p) => obs.t_offset - p,
            None => Duration::ZERO,
        };
        let residual = obs.t_offset - self.correction;
        let (next, action) = step_state_machine(self.machine, residual, checks, &self.config);
        self.machine = next;
        let before = self.correction;
        obs.accepted = false;
        obs.reject_reason = RejectReason::None;
        match action {
            Action::Accept => {
                self.restart(obs.t_offset);
                obs.accepted = true;
            }
            Action::Step => {
                self.correction = self.feed(obs.t_offset);
                obs.accepted = true;
            }
            Action::Hold => {
                // statistical compensation keeps running while locked, gated by th1
                if self.config.mode != StatisticalMode::None {
                    if obs.dtheta.abs() <= self.config.th1 {
                        self.correction = self.feed(obs.t_offset);
                        obs.accepted = true;
                    } else {
                        obs.reject_reason = RejectReason::ThresholdExceeded;
                    }
                }
            }
            Action::Reset => obs.reject_reason = RejectReason::ThresholdExceeded,
            Action::Reject | Action::Interrupt | Action::Demote => {
                obs.reject_reason = checks.first_failure().unwrap_or_default();
            }
        }
        StepOutcome { phase: self.machine.phase, action, filtered_correction: self.correction - before }
    }
}
