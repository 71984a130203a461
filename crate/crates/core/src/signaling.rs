//! SIB9 timing signaling codec.
//!
//! Layout, MSB first:
//!
//! | field         | bits | notes                                  |
//! |---------------|------|----------------------------------------|
//! | time_info_utc | 48   | count of Gr units                      |
//! | ref_sfn       | 10   | 0..=1023                               |
//! | sched_pre     | 8    | units of 10 ms                         |
//! | t_c           | 30   | signed nanoseconds, two's complement   |
//! | pairs         | 32 n | rnti u16, srs_delay u16 (units of Tc)  |
//! | crc           | 32   | CRC-32 (0xEDB88320 reflected) of above |
//!
//! The header is 96 bits, so an empty message is 128 bits and 88 pairs
//! take 2944 bits.

use crc::{Crc, CRC_32_ISO_HDLC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Duration, TimePoint};

pub const HEADER_BITS: usize = 96;
pub const PAIR_BITS: usize = 32;
pub const CRC_BITS: usize = 32;
pub const MIN_BITS: usize = HEADER_BITS + CRC_BITS;
/// Length limit of one system-information message.
pub const SI_MAX_BITS: usize = 2976;
/// RNTI/SRS pairs carried per message. 89 would still fit the bit budget;
/// the remaining word is kept free for the extension container.
pub const MAX_SRS_PAIRS: usize = 88;

const _: () = assert!(MIN_BITS + MAX_SRS_PAIRS * PAIR_BITS <= SI_MAX_BITS);

pub const GR_R15: Duration = Duration::from_ms(10);
pub const GR_R16: Duration = Duration::from_ns(10);
pub const SCHED_PRE_UNIT: Duration = Duration::from_ms(10);

const TIU_BITS: u32 = 48;
const SFN_BITS: u32 = 10;
const SCHED_BITS: u32 = 8;
const TC_BITS: u32 = 30;
const TC_MAX_NS: i64 = (1 << (TC_BITS - 1)) - 1;
const TC_MIN_NS: i64 = -(1 << (TC_BITS - 1));

static CRC32: Crc<u32> = Crc::<u32>::new(&CRC_32_ISO_HDLC);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SrsPair {
    pub rnti: u16,
    /// one-way downlink delay in units of Tc
    pub srs_delay: u16,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sib9Message {
    pub time_info_utc: u64,
    pub ref_sfn: u16,
    pub sched_pre: Duration,
    pub t_c: Duration,
    pub ext_pairs: Vec<SrsPair>,
}

impl Sib9Message {
    /// The broadcast timestamp `time_info_utc * gr + t_c`.
    pub fn timestamp(&self, gr: Duration) -> TimePoint {
        TimePoint::EPOCH + gr * self.time_info_utc as i64 + self.t_c
    }

    pub fn srs_delay_for(&self, rnti: u16) -> Option<u16> {
        self.ext_pairs.iter().find(|p| p.rnti == rnti).map(|p| p.srs_delay)
    }

    pub fn encoded_bits(&self) -> usize {
        MIN_BITS + PAIR_BITS * self.ext_pairs.len()
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SignalingError {
    #[error("{0} srs pairs exceed the capacity of {MAX_SRS_PAIRS}")]
    Capacity(usize),
    #[error("field {field} out of range: {detail}")]
    Encode { field: &'static str, detail: String },
    #[error("malformed bit string of {0} bits")]
    Decode(usize),
    #[error("invalid hex: {0}")]
    Hex(String),
}

/// A bit string stored MSB first in whole bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let len = bytes.len() * 8;
        BitString { bytes, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bytes[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len);
        self.bytes[i / 8] ^= 0x80 >> (i % 8);
    }

    /// Keep only the first `n` bits.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len {
            return;
        }
        self.len = n;
        self.bytes.truncate(n.div_ceil(8));
        if !n.is_multiple_of(8) {
            let keep = 0xFFu8 << (8 - n % 8);
            *self.bytes.last_mut().unwrap() &= keep;
        }
    }

    pub fn to_hex(&self) -> String {
        hex::encode_upper(&self.bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, SignalingError> {
        hex::decode(s.trim()).map(Self::from_bytes).map_err(|e| SignalingError::Hex(e.to_string()))
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    fn with_capacity(bits: usize) -> Self {
        BitWriter { bytes: Vec::with_capacity(bits.div_ceil(8)), len: 0 }
    }

    fn put(&mut self, value: u64, width: u32) {
        for k in (0..width).rev() {
            if self.len.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if value >> k & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.len % 8);
            }
            self.len += 1;
        }
    }
}

struct BitReader<'a> {
    bits: &'a BitString,
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u64 {
        let mut v = 0u64;
        for _ in 0..width {
            v = v << 1 | self.bits.bit(self.pos) as u64;
            self.pos += 1;
        }
        v
    }
}

fn out_of_range(field: &'static str, detail: String) -> SignalingError {
    SignalingError::Encode { field, detail }
}

pub fn encode_sib9(msg: &Sib9Message) -> Result<BitString, SignalingError> {
    if msg.ext_pairs.len() > MAX_SRS_PAIRS {
        return Err(SignalingError::Capacity(msg.ext_pairs.len()));
    }
    if msg.time_info_utc >= 1 << TIU_BITS {
        return Err(out_of_range("time_info_utc", msg.time_info_utc.to_string()));
    }
    if msg.ref_sfn >= 1 << SFN_BITS {
        return Err(out_of_range("ref_sfn", msg.ref_sfn.to_string()));
    }
    let sp = msg.sched_pre;
    if sp.is_negative() || sp % SCHED_PRE_UNIT != Duration::ZERO || sp / SCHED_PRE_UNIT >= 1 << SCHED_BITS {
        return Err(out_of_range("sched_pre", sp.to_string()));
    }
    let tc = msg.t_c;
    if tc % Duration::from_ns(1) != Duration::ZERO {
        return Err(out_of_range("t_c", format!("{tc} is not a whole nanosecond")));
    }
    let tc_ns = tc.as_ps() / 1000;
    if !(TC_MIN_NS..=TC_MAX_NS).contains(&tc_ns) {
        return Err(out_of_range("t_c", tc.to_string()));
    }

    let mut w = BitWriter::with_capacity(msg.encoded_bits());
    w.put(msg.time_info_utc, TIU_BITS);
    w.put(msg.ref_sfn as u64, SFN_BITS);
    w.put((sp / SCHED_PRE_UNIT) as u64, SCHED_BITS);
    w.put((tc_ns as u64) & ((1 << TC_BITS) - 1), TC_BITS);
    for p in &msg.ext_pairs {
        w.put(p.rnti as u64, 16);
        w.put(p.srs_delay as u64, 16);
    }
    let crc = CRC32.checksum(&w.bytes);
    w.put(crc as u64, 32);
    Ok(BitString { bytes: w.bytes, len: w.len })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub message: Sib9Message,
    pub crc: u32,
    pub crc_ok: bool,
}

/// Decode positionally. A bad CRC is reported, not treated as an error.
pub fn decode_sib9(bits: &BitString) -> Result<Decoded, SignalingError> {
    let n = bits.len();
    if n < MIN_BITS || !(n - MIN_BITS).is_multiple_of(PAIR_BITS) {
        return Err(SignalingError::Decode(n));
    }
    let pairs = (n - MIN_BITS) / PAIR_BITS;
    let mut r = BitReader { bits, pos: 0 };
    let time_info_utc = r.take(TIU_BITS);
    let ref_sfn = r.take(SFN_BITS) as u16;
    let sched_pre = SCHED_PRE_UNIT * r.take(SCHED_BITS) as i64;
    let raw_tc = r.take(TC_BITS) as i64;
    // sign-extend
    let tc_ns = (raw_tc << (64 - TC_BITS)) >> (64 - TC_BITS);
    let ext_pairs = (0..pairs)
        .map(|_| SrsPair { rnti: r.take(16) as u16, srs_delay: r.take(16) as u16 })
        .collect();
    let crc = r.take(32) as u32;
    let payload = &bits.as_bytes()[..(n - CRC_BITS) / 8];
    let crc_ok = CRC32.checksum(payload) == crc;
    Ok(Decoded {
        message: Sib9Message { time_info_utc, ref_sfn, sched_pre, t_c: Duration::from_ns(tc_ns), ext_pairs },
        crc,
        crc_ok,
    })
}

/// Encoded length of `msg` over the broadcast period, in bits per second.
pub fn signaling_overhead(period: Duration, msg: &Sib9Message) -> f64 {
    assert!(period.as_ps() > 0, "period must be positive");
    msg.encoded_bits() as f64 / period.as_secs_f64()
}

/// Worst-case cell load: one full SI message every period.
pub fn cell_overhead_bps(period: Duration) -> f64 {
    assert!(period.as_ps() > 0, "period must be positive");
    SI_MAX_BITS as f64 / period.as_secs_f64()
}

/// Cell load shared across a full complement of served UEs.
pub fn per_ue_overhead_bps(period: Duration) -> f64 {
    cell_overhead_bps(period) / MAX_SRS_PAIRS as f64
}

/// One entry of the JSON test-vector format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sib9Vector {
    pub time_info_utc: u64,
    pub ref_sfn: u16,
    pub sched_pre_ms: i64,
    pub t_c_ns: i64,
    pub ext_pairs: Vec<SrsPair>,
    pub expected_hex: String,
}

impl Sib9Vector {
    pub fn message(&self) -> Sib9Message {
        Sib9Message {
            time_info_utc: self.time_info_utc,
            ref_sfn: self.ref_sfn,
            sched_pre: Duration::from_ms(self.sched_pre_ms),
            t_c: Duration::from_ns(self.t_c_ns),
            ext_pairs: self.ext_pairs.clone(),
        }
    }
}
