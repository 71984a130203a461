//! Adversarial link transformers: a relay that adds a growing delay to each
//! forwarded SIB9 and a recorder that re-broadcasts SIB9 after a fixed delay.
//!
//! Both work on the stream of [`Emission`]s heading to one UE. A
//! [`Capture`] resolver then picks, per frame, the emission the UE decodes.

use serde::{Deserialize, Serialize};

use crate::signaling::BitString;
use crate::time::{serde_ns, serde_s, Duration, TimePoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Forwarding,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(rename = "per_shot_offset_ns", with = "serde_ns")]
    pub per_shot_offset: Duration,
    #[serde(rename = "replay_delay_s", with = "serde_s")]
    pub replay_delay: Duration,
    pub power_advantage_db: f64,
    pub main_path_blocked: bool,
    /// master time at which the attacker starts relaying or recording
    #[serde(rename = "start_s", with = "serde_s")]
    pub start: Duration,
    /// the first frame where the attacker overpowers the BS is lost to the collision
    pub onset_collision: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Forwarding,
            per_shot_offset: Duration::from_ns(130),
            replay_delay: Duration::from_ms(10_240),
            power_advantage_db: 6.0,
            main_path_blocked: true,
            start: Duration::from_secs(30),
            onset_collision: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Bs,
    Attacker,
}

/// Ground truth attached to an emission for error accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmissionTruth {
    /// BS-time boundary the message was stamped for
    pub stamp: TimePoint,
    /// BS reference offset vs master when triggered
    pub src_offset: Duration,
    pub node_offset: Duration,
    pub trigger_error: Duration,
    /// scheduler slip
    pub slip: Duration,
    /// time the recording was held back before re-broadcast
    pub replay_delay: Duration,
}

/// One SIB9 on its way to a UE.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    /// BS frame number during which the emission is on air
    pub frame: u64,
    /// true master time of the radio boundary leaving the emitter
    pub on_air: TimePoint,
    pub bits: BitString,
    /// delay added on top of the propagation path
    pub extra_delay: Duration,
    pub origin: Origin,
    /// received power relative to the genuine BS
    pub power_db: f64,
    pub truth: EmissionTruth,
}

/// Per-UE link transformer; a pass-through when no attack is configured.
#[derive(Clone, Debug)]
pub struct LinkInjector {
    config: Option<AttackConfig>,
    cap: Duration,
    shots: u64,
}

impl LinkInjector {
    /// `cap` bounds the relay's cumulative delay (half the cyclic prefix).
    pub fn new(config: Option<AttackConfig>, cap: Duration) -> Self {
        LinkInjector { config, cap, shots: 0 }
    }

    pub fn passthrough() -> Self {
        Self::new(None, Duration::ZERO)
    }

    pub fn config(&self) -> Option<&AttackConfig> {
        self.config.as_ref()
    }

    /// Transform one genuine emission into what reaches the UE.
    pub fn apply(&mut self, e: Emission) -> Vec<Emission> {
        let Some(cfg) = &self.config else { return vec![e] };
        if e.on_air < TimePoint::EPOCH + cfg.start {
            return vec![e];
        }
        match cfg.kind {
            AttackKind::Forwarding => {
                if !cfg.main_path_blocked {
                    return vec![e];
                }
                self.shots += 1;
                let extra = (cfg.per_shot_offset * self.shots as i64).min(self.cap);
                vec![Emission { extra_delay: e.extra_delay + extra, origin: Origin::Attacker, ..e }]
            }
            AttackKind::Replay => {
                let frames = cfg.replay_delay.count_of(crate::bs::FRAME);
                let copy = Emission {
                    frame: (e.frame as i64 + frames) as u64,
                    on_air: e.on_air + cfg.replay_delay,
                    origin: Origin::Attacker,
                    power_db: e.power_db + cfg.power_advantage_db,
                    truth: EmissionTruth { replay_delay: cfg.replay_delay, ..e.truth },
                    ..e.clone()
                };
                vec![e, copy]
            }
        }
    }
}

/// Apply an injector to a whole link, sorted by on-air time.
pub fn inject(link: &[Emission], injector: &mut LinkInjector) -> Vec<Emission> {
    let mut out: Vec<Emission> = link.iter().cloned().flat_map(|e| injector.apply(e)).collect();
    out.sort_by_key(|e| (e.on_air, e.origin == Origin::Attacker));
    out
}

pub fn inject_forwarding(link: &[Emission], config: &AttackConfig, cap: Duration) -> Vec<Emission> {
    let cfg = AttackConfig { kind: AttackKind::Forwarding, ..config.clone() };
    inject(link, &mut LinkInjector::new(Some(cfg), cap))
}

pub fn inject_replay(link: &[Emission], config: &AttackConfig) -> Vec<Emission> {
    let cfg = AttackConfig { kind: AttackKind::Replay, ..config.clone() };
    inject(link, &mut LinkInjector::new(Some(cfg), Duration::ZERO))
}

/// What the UE decodes in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Reception {
    pub emission: Emission,
    /// lost to a collision; bits are corrupted
    pub garbled: bool,
}

/// Capture-effect resolver: the strongest emitter in a frame wins, ties go
/// to the BS.
#[derive(Clone, Debug, Default)]
pub struct Capture {
    onset_collision: bool,
    attacker_has_won: bool,
}

impl Capture {
    pub fn new(onset_collision: bool) -> Self {
        Capture { onset_collision, attacker_has_won: false }
    }

    pub fn resolve(&mut self, arrivals: Vec<Emission>) -> Option<Reception> {
        let contested = arrivals.iter().any(|e| e.origin == Origin::Bs) && arrivals.iter().any(|e| e.origin == Origin::Attacker);
        let winner = arrivals.into_iter().reduce(|best, e| {
            let better = e.power_db > best.power_db || (e.power_db == best.power_db && e.origin == Origin::Bs && best.origin != Origin::Bs);
            if better { e } else { best }
        })?;
        let mut garbled = false;
        let mut emission = winner;
        if contested && emission.origin == Origin::Attacker && !self.attacker_has_won {
            self.attacker_has_won = true;
            if self.onset_collision {
                garbled = true;
                let n = emission.bits.len();
                for i in [n / 3, n / 2, n - 40] {
                    emission.bits.flip(i);
                }
            }
        }
        Some(Reception { emission, garbled })
    }
}
