//! Gateway clock interface addressing and best-clock selection.

use std::collections::HashSet;
use std::net::Ipv4Addr;

use crc::{Crc, CRC_16_ARC, CRC_32_ISO_HDLC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{serde_s, Duration, TimePoint};
use crate::ue::{Features, StatisticalMode};

static CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_ARC);
static CRC32: Crc<u32> = Crc::<u32>::new(&CRC_32_ISO_HDLC);

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum BtcaError {
    #[error("invalid parameter: {0}")]
    Param(String),
}

fn host_bits(mask: u8) -> Result<u32, BtcaError> {
    if mask >= 32 {
        return Err(BtcaError::Param(format!("mask /{mask} leaves no host bits")));
    }
    Ok(32 - mask as u32)
}

fn net_part(seg: u32, w: u32) -> u32 {
    if w == 32 {
        0
    } else {
        seg & (u32::MAX << w)
    }
}

/// Clock interface address: a `32 - mask` bit checksum of the UE id in the
/// host part of `seg`.
///
/// Host widths up to 16 bits use CRC-16/ARC truncated to the width, wider
/// ones CRC-32.
pub fn clk_addr(ue_id: &[u8], seg: u32, mask: u8) -> Result<u32, BtcaError> {
    let w = host_bits(mask)?;
    let host_mask = if w == 32 { u32::MAX } else { (1u32 << w) - 1 };
    let sum = if w <= 16 { CRC16.checksum(ue_id) as u32 } else { CRC32.checksum(ue_id) };
    Ok(net_part(seg, w) | (sum & host_mask))
}

/// Parse `a.b.c.d/m`.
pub fn parse_cidr(s: &str) -> Result<(u32, u8), BtcaError> {
    let (addr, mask) = s.split_once('/').ok_or_else(|| BtcaError::Param(format!("{s}: expected a.b.c.d/mask")))?;
    let addr: Ipv4Addr = addr.parse().map_err(|_| BtcaError::Param(format!("{addr}: bad address")))?;
    let mask: u8 = mask.parse().ok().filter(|m| *m <= 32).ok_or_else(|| BtcaError::Param(format!("{mask}: bad mask")))?;
    Ok((u32::from(addr), mask))
}

pub fn format_addr(a: u32) -> String {
    Ipv4Addr::from(a).to_string()
}

/// Address assignment within subnets, resolving collisions by +1 probing
/// on the host part.
#[derive(Clone, Debug, Default)]
pub struct AddressBook {
    used: HashSet<u32>,
}

impl AddressBook {
    pub fn assign(&mut self, ue_id: &[u8], seg: u32, mask: u8) -> Result<u32, BtcaError> {
        let w = host_bits(mask)?;
        let first = clk_addr(ue_id, seg, mask)?;
        let net = net_part(seg, w);
        let size = 1u64 << w;
        let start = (first - net) as u64;
        for k in 0..size {
            let a = net | ((start + k) % size) as u32;
            if self.used.insert(a) {
                return Ok(a);
            }
        }
        Err(BtcaError::Param(format!("subnet {}/{mask} is full", format_addr(net))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockDataset {
    pub id: String,
    pub tap_level: u32,
    pub priority: u32,
    /// dB
    pub avg_rsrq: f64,
    #[serde(rename = "tau_star_s", with = "serde_s")]
    pub tau_star: Duration,
    pub allan_min: f64,
    pub hops_to_mc: u32,
    pub offset_scale_variance: f64,
    #[serde(default)]
    pub address: u32,
}

/// Level = number of enabled features among TA compensation (always on),
/// SRS compensation, PRS sensing, SFN check, CRC check and statistical
/// compensation.
pub fn tap_level(features: &Features, mode: StatisticalMode) -> u32 {
    1 + features.srs_comp as u32
        + features.prs_sensing as u32
        + features.sfn_check as u32
        + features.crc_check as u32
        + (mode != StatisticalMode::None) as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// largest level gap that still goes to further comparison
    pub level_gap: u32,
    /// relative tolerance for variances and RSRQ
    pub relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { level_gap: 2, relative: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Winner(String),
    TieSet(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    #[serde(flatten)]
    pub selection: Selection,
    /// factors that narrowed the field, in order
    pub rationale: Vec<String>,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<&str> {
        match &self.selection {
            Selection::Winner(w) => vec![w.as_str()],
            Selection::TieSet(t) => t.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Clone, Copy)]
enum Better {
    Lower,
    Higher,
}

struct Factor {
    name: &'static str,
    better: Better,
    relative: bool,
    get: fn(&ClockDataset) -> f64,
}

const EQUAL_LEVEL: [Factor; 5] = [
    Factor { name: "priority", better: Better::Lower, relative: false, get: |c| c.priority as f64 },
    Factor { name: "avg_rsrq", better: Better::Higher, relative: true, get: |c| c.avg_rsrq },
    Factor { name: "tau_star", better: Better::Lower, relative: false, get: |c| c.tau_star.as_ps() as f64 },
    Factor { name: "hops_to_mc", better: Better::Lower, relative: false, get: |c| c.hops_to_mc as f64 },
    Factor { name: "offset_scale_variance", better: Better::Lower, relative: true, get: |c| c.offset_scale_variance },
];

const MIXED_LEVEL: [Factor; 3] = [
    Factor { name: "hops_to_mc", better: Better::Lower, relative: false, get: |c| c.hops_to_mc as f64 },
    Factor { name: "allan_min", better: Better::Lower, relative: true, get: |c| c.allan_min },
    Factor { name: "tap_level", better: Better::Higher, relative: false, get: |c| c.tap_level as f64 },
];

fn narrow<'a>(set: Vec<&'a ClockDataset>, f: &Factor, tol: f64, rationale: &mut Vec<String>) -> Vec<&'a ClockDataset> {
    let vals = set.iter().map(|c| (f.get)(c));
    let best = match f.better {
        Better::Lower => vals.fold(f64::INFINITY, f64::min),
        Better::Higher => vals.fold(f64::NEG_INFINITY, f64::max),
    };
    let slack = if f.relative { tol * best.abs() } else { 0.0 };
    let keep: Vec<_> = set
        .iter()
        .copied()
        .filter(|c| {
            let v = (f.get)(c);
            match f.better {
                Better::Lower => v <= best + slack,
                Better::Higher => v >= best - slack,
            }
        })
        .collect();
    if keep.len() < set.len() {
        rationale.push(f.name.to_string());
    }
    keep
}

/// Dataset comparison over the candidate gateways.
pub fn best_clock(candidates: &[ClockDataset], tol: &Tolerances) -> Result<SelectionResult, BtcaError> {
    if candidates.is_empty() {
        return Err(BtcaError::Param("no candidate clocks".into()));
    }
    let mut rationale = Vec::new();
    let top = candidates.iter().map(|c| c.tap_level).max().unwrap();
    let mut set: Vec<&ClockDataset> = candidates.iter().filter(|c| top - c.tap_level <= tol.level_gap).collect();
    if set.len() < candidates.len() {
        rationale.push("tap_level_gap".to_string());
    }
    let same_level = set.iter().all(|c| c.tap_level == set[0].tap_level);
    if !same_level {
        for f in &MIXED_LEVEL {
            if set.len() == 1 {
                break;
            }
            set = narrow(set, f, tol.relative, &mut rationale);
        }
    }
    for f in &EQUAL_LEVEL {
        if set.len() == 1 {
            break;
        }
        set = narrow(set, f, tol.relative, &mut rationale);
    }
    let selection = if set.len() == 1 {
        Selection::Winner(set[0].id.clone())
    } else {
        let mut ids: Vec<String> = set.iter().map(|c| c.id.clone()).collect();
        ids.sort();
        Selection::TieSet(ids)
    };
    Ok(SelectionResult { selection, rationale })
}

/// Mean of the selected clocks' outputs, rounded half to even.
pub fn coordinate(outputs: &[TimePoint]) -> Result<TimePoint, BtcaError> {
    if outputs.is_empty() {
        return Err(BtcaError::Param("nothing to coordinate".into()));
    }
    let n = outputs.len() as i128;
    let sum: i128 = outputs.iter().map(|t| t.as_ps() as i128).sum();
    let q = sum.div_euclid(n);
    let r = sum.rem_euclid(n);
    let q = match (2 * r).cmp(&n) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q % 2 != 0 => q + 1,
        _ => q,
    };
    Ok(TimePoint::from_ps(q as i64))
}
