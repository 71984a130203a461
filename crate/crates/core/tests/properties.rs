//! Property tests for the cross-module invariants.

use proptest::prelude::*;

use tap_core::attack::{inject_forwarding, inject_replay, AttackConfig, AttackKind, Capture, Emission, EmissionTruth, Origin};
use tap_core::bs::{BaseStation, BsConfig, FRAME};
use tap_core::btca::{best_clock, clk_addr, ClockDataset, Tolerances};
use tap_core::clock::{allan_variance, assign_dtheta, dtheta_series, OffsetObservation, OscillatorClock, OscillatorModel};
use tap_core::phy::{
    apply_channel, gen_zc, quantize_ta, ChannelRealization, DelayEstimate, DelayEstimator, DelayMethod, Numerology,
};
use tap_core::signaling::{decode_sib9, encode_sib9, BitString, Sib9Message, SrsPair, GR_R16, MAX_SRS_PAIRS};
use tap_core::ue::{calibrate_t0, compute_offset, Action, Checks, Phase, StatisticalMode, UeConfig, UeTiming};
use tap_core::{Duration, TimePoint};

// ------------------------------------------------------------------ clock

fn series_from(offsets: &[i64]) -> Vec<(TimePoint, Duration)> {
    offsets
        .iter()
        .enumerate()
        .map(|(i, &x)| (TimePoint::from_ps(i as i64 * 320_000_000_000), Duration::from_ps(x)))
        .collect()
}

proptest! {
    #[test]
    fn clock_noise_is_seed_deterministic(seed in any::<u64>(), steps in prop::collection::vec(1i64..5_000_000_000, 1..40)) {
        let model = OscillatorModel { random_walk_sigma: 1e-10, white_noise_sigma: 1e-9, fractional_offset: 1e-7, seed, ..Default::default() };
        let mut a = OscillatorClock::new(model.clone());
        let mut b = OscillatorClock::new(model);
        for s in steps {
            prop_assert_eq!(a.advance(Duration::from_ps(s)), b.advance(Duration::from_ps(s)));
        }
    }

    #[test]
    fn ideal_clock_tracks_master(steps in prop::collection::vec(1i64..5_000_000_000, 1..40), init in -1_000_000i64..1_000_000) {
        let mut c = OscillatorClock::with_offset(OscillatorModel::ideal(), Duration::from_ps(init));
        for s in steps {
            c.advance(Duration::from_ps(s));
            prop_assert_eq!(c.offset(), Duration::from_ps(init));
        }
    }

    #[test]
    fn allan_ignores_constant_drift(offsets in prop::collection::vec(-1_000_000i64..1_000_000, 5..200), drift in -100_000i64..100_000, m in 1usize..4) {
        prop_assume!(offsets.len() > 2 * m);
        let ramp: Vec<i64> = offsets.iter().enumerate().map(|(i, x)| x + drift * i as i64).collect();
        let tau = Duration::from_ps(320_000_000_000 * m as i64);
        let a = allan_variance(&series_from(&offsets), tau).unwrap();
        let b = allan_variance(&series_from(&ramp), tau).unwrap();
        prop_assert_eq!(a.variance, b.variance);
        prop_assert!(a.variance >= 0.0);
        prop_assert!(a.sample_count >= 1);
    }

    #[test]
    fn dtheta_cumsum_round_trips(offsets in prop::collection::vec(-1_000_000_000i64..1_000_000_000, 1..100)) {
        let mut obs: Vec<OffsetObservation> = offsets
            .iter()
            .map(|&x| OffsetObservation::new(TimePoint::EPOCH, TimePoint::EPOCH, TimePoint::from_ps(x), Duration::ZERO, Duration::ZERO))
            .collect();
        assign_dtheta(&mut obs);
        prop_assert_eq!(obs[0].dtheta, Duration::ZERO);
        let mut acc = obs[0].t_offset;
        for o in &obs[1..] {
            acc += o.dtheta;
            prop_assert_eq!(acc, o.t_offset);
        }
        let d = dtheta_series(&obs);
        prop_assert_eq!(d.len(), obs.len() - 1);
    }
}

// ------------------------------------------------------------------ signaling

fn message() -> impl Strategy<Value = Sib9Message> {
    (
        0u64..1 << 48,
        0u16..1024,
        0i64..256,
        -(1i64 << 29)..(1 << 29),
        prop::collection::vec((any::<u16>(), any::<u16>()), 0..=MAX_SRS_PAIRS),
    )
        .prop_map(|(tiu, sfn, sp, tc, pairs)| Sib9Message {
            time_info_utc: tiu,
            ref_sfn: sfn,
            sched_pre: Duration::from_ms(10 * sp),
            t_c: Duration::from_ns(tc),
            ext_pairs: pairs.into_iter().map(|(rnti, srs_delay)| SrsPair { rnti, srs_delay }).collect(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn sib9_round_trip(m in message()) {
        let bits = encode_sib9(&m).unwrap();
        prop_assert!(bits.len() <= 2976);
        let d = decode_sib9(&bits).unwrap();
        prop_assert!(d.crc_ok);
        prop_assert_eq!(d.message, m);
    }

    #[test]
    fn crc_catches_bursts(m in message(), start in any::<prop::sample::Index>(), len in 1usize..=32, pattern in any::<u32>()) {
        let mut bits = encode_sib9(&m).unwrap();
        let n = bits.len();
        let s = start.index(n - len + 1);
        // a burst starts and ends with a flipped bit
        let mask = pattern | 1 | (1u32 << (len - 1));
        for k in 0..len {
            if mask >> k & 1 == 1 {
                bits.flip(s + k);
            }
        }
        prop_assert!(!decode_sib9(&bits).unwrap().crc_ok);
    }
}

#[test]
fn crc_catches_every_single_flip() {
    let m = Sib9Message {
        time_info_utc: 17_300_000,
        ref_sfn: 321,
        sched_pre: Duration::from_ms(20),
        t_c: Duration::from_ns(4),
        ext_pairs: vec![SrsPair { rnti: 0x4601, srs_delay: 131 }],
    };
    let bits = encode_sib9(&m).unwrap();
    for i in 0..bits.len() {
        let mut b: BitString = bits.clone();
        b.flip(i);
        assert!(!decode_sib9(&b).unwrap().crc_ok, "flip {i}");
    }
}

// ------------------------------------------------------------------ phy

proptest! {
    #[test]
    fn ta_error_within_half_step(rt in 0i64..=4_680_000) {
        let num = Numerology::mu1();
        let rt = Duration::from_ps(rt);
        let est = quantize_ta(rt, &num).unwrap();
        prop_assert!((est.value - rt / 2).abs() <= num.ts * 8);
        prop_assert_eq!((est.value * 2) % num.ta_step(), Duration::ZERO);
    }

    #[test]
    fn noiseless_srs_within_half_sample(delay in 0i64..=2_340_000) {
        let num = Numerology::mu1();
        let zc = gen_zc(25, 293).unwrap();
        let est = DelayEstimator::new(&zc, DelayMethod::Srs, num).unwrap();
        let d = Duration::from_ps(delay);
        let rx = apply_channel(est.transmitted(), &ChannelRealization::single_path(f64::INFINITY), d, &num, 0);
        match est.estimate(&rx) {
            Ok(e) => {
                prop_assert!((e.value - d).abs() <= num.ts / 2, "{} vs {}", e.value, d);
                prop_assert_eq!(e.value % num.tc, Duration::ZERO);
                prop_assert!(e.value >= Duration::ZERO && e.value <= num.cp);
            }
            // only a delay rounding past the prefix may be refused
            Err(_) => prop_assert!(d.round_to(num.ts) > num.cp),
        }
    }

    #[test]
    fn zc_has_unit_modulus(u in 1usize..293) {
        for x in gen_zc(u, 293).unwrap() {
            prop_assert!((x.norm() - 1.0).abs() < 1e-12);
        }
    }
}

// ------------------------------------------------------------------ bs

proptest! {
    #[test]
    fn stamps_hit_the_boundary(frame in 0u64..1 << 27, t_c in 0i64..10_000_000, gr in prop::sample::select(vec![10_000i64, 1_000_000, 10_000_000_000])) {
        let cfg = BsConfig { t_c: Duration::from_ps(t_c * 1000), gr: Duration::from_ps(gr), ..Default::default() };
        let bs = BaseStation::new(cfg.clone(), Numerology::mu1(), 0).unwrap();
        let m = bs.generate_sib9(frame);
        prop_assert_eq!(m.timestamp(cfg.gr), bs.frame_boundary(frame));
        prop_assert_eq!(m.ref_sfn as u64, frame % 1024);
    }
}

#[test]
fn gr16_stamp_is_exact() {
    let cfg = BsConfig { gr: GR_R16, t_c: Duration::from_ns(4), ..Default::default() };
    let bs = BaseStation::new(cfg, Numerology::mu1(), 0).unwrap();
    let m = bs.generate_sib9(3200);
    assert_eq!(m.t_c, Duration::from_ns(4));
    assert_eq!(m.time_info_utc, 3_200_000_000);
}

// ------------------------------------------------------------------ ue

fn checks(ok: bool) -> Checks {
    Checks { crc_ok: Some(ok), sfn_ok: Some(true), prs_ok: None }
}

fn observe(offset_ns: i64) -> OffsetObservation {
    OffsetObservation::new(TimePoint::EPOCH, TimePoint::EPOCH, TimePoint::from_ps(offset_ns * 1000), Duration::ZERO, Duration::ZERO)
}

proptest! {
    #[test]
    fn locked_ue_never_corrects_until_demoted(events in prop::collection::vec((any::<bool>(), -3000i64..3000), 1..60)) {
        let mut ue = UeTiming::new(UeConfig { mode: StatisticalMode::None, ..Default::default() });
        for (ok, off) in events {
            let before = (ue.phase(), ue.correction());
            let mut o = observe(off);
            let out = ue.process(&mut o, &checks(ok));
            if before.0 == Phase::S2 {
                prop_assert_eq!(ue.correction(), before.1);
                prop_assert!(!out.action.applies_correction());
                if !ok {
                    prop_assert_eq!(out.action, Action::Demote);
                    prop_assert_eq!(ue.phase(), Phase::S1);
                }
            }
        }
    }

    #[test]
    fn lock_needs_unbroken_streak(offsets in prop::collection::vec(-600i64..600, 1..40)) {
        let cfg = UeConfig { mode: StatisticalMode::None, ..Default::default() };
        let mut ue = UeTiming::new(cfg.clone());
        let mut o = observe(0);
        ue.process(&mut o, &checks(true));
        let mut streak = 0u32;
        for off in offsets {
            let was = ue.phase();
            let residual = Duration::from_ns(off) - ue.correction();
            let mut o = observe(off);
            ue.process(&mut o, &checks(true));
            if was == Phase::S0 {
                streak = 0;
            }
            if was == Phase::S1 {
                streak = if residual.abs() <= cfg.th1 { streak + 1 } else { 0 };
                prop_assert_eq!(ue.phase() == Phase::S2, streak >= cfg.lock_count);
            }
            if ue.phase() == Phase::S2 {
                prop_assert!(ue.machine().consecutive_ok >= cfg.lock_count);
            }
        }
    }

    #[test]
    fn offset_reconstructs_local_time(stamp in 0i64..1 << 60, est in 0i64..2_340_000, t0 in 0i64..1_000_000_000, local in 0i64..1 << 60) {
        let m = Sib9Message { time_info_utc: (stamp / 10_000) as u64, ..Default::default() };
        let e = DelayEstimate { method: DelayMethod::Srs, value: Duration::from_ps(est), resolution: Duration::from_ps(509) };
        let o = compute_offset(&m, GR_R16, &e, TimePoint::from_ps(local), Duration::from_ps(t0), TimePoint::EPOCH);
        prop_assert_eq!(o.t_result() + o.t_offset, TimePoint::from_ps(local));
        prop_assert_eq!(o.t_offset, TimePoint::from_ps(local) - (m.timestamp(GR_R16) + e.value + Duration::from_ps(t0)));
    }

    #[test]
    fn calibration_is_idempotent(errs in prop::collection::vec(-2_000_000i64..2_000_000, 1..200)) {
        let e: Vec<Duration> = errs.iter().map(|&x| Duration::from_ps(x)).collect();
        let t0 = calibrate_t0(&e).unwrap();
        let resid: Vec<Duration> = e.iter().map(|&x| x - t0).collect();
        prop_assert!(calibrate_t0(&resid).unwrap().abs() < Duration::from_ns(1));
    }

    #[test]
    fn unfiltered_output_is_raw_offset(offsets in prop::collection::vec(-300i64..300, 1..40)) {
        let mut ue = UeTiming::new(UeConfig { mode: StatisticalMode::None, ..Default::default() });
        for off in offsets {
            let mut o = observe(off);
            let out = ue.process(&mut o, &checks(true));
            if out.action.applies_correction() {
                prop_assert_eq!(ue.correction(), o.t_offset);
            }
        }
    }
}

// ------------------------------------------------------------------ attack

fn link(n: u64) -> Vec<Emission> {
    let bs = BaseStation::new(BsConfig::default(), Numerology::mu1(), 0).unwrap();
    (1..=n)
        .map(|k| {
            let frame = 32 * k;
            let m = bs.generate_sib9(frame);
            Emission {
                frame,
                on_air: bs.frame_boundary(frame),
                bits: encode_sib9(&m).unwrap(),
                extra_delay: Duration::ZERO,
                origin: Origin::Bs,
                power_db: 0.0,
                truth: EmissionTruth::default(),
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn forwarding_never_exceeds_cap(per_shot in 1i64..2000, n in 1u64..60) {
        let cap = Numerology::mu1().cp / 2;
        let cfg = AttackConfig { start: Duration::ZERO, per_shot_offset: Duration::from_ns(per_shot), ..Default::default() };
        for e in inject_forwarding(&link(n), &cfg, cap) {
            prop_assert!(e.extra_delay <= cap);
        }
    }
}

/// True when the UE ends up decoding a replayed copy that passes the SFN check.
fn replay_succeeds(delay_frames: i64, advantage_db: f64) -> bool {
    let cfg = AttackConfig {
        kind: AttackKind::Replay,
        start: Duration::ZERO,
        replay_delay: FRAME * delay_frames,
        power_advantage_db: advantage_db,
        onset_collision: false,
        ..Default::default()
    };
    let mut by_frame = std::collections::BTreeMap::<u64, Vec<Emission>>::new();
    let genuine = link(200);
    let last = genuine.last().unwrap().frame;
    // the BS keeps transmitting, so only frames inside the link are contested
    for e in inject_replay(&genuine, &cfg).into_iter().filter(|e| e.frame <= last) {
        by_frame.entry(e.frame).or_default().push(e);
    }
    let mut cap = Capture::new(false);
    by_frame.into_values().any(|arrivals| {
        let Some(rx) = cap.resolve(arrivals) else { return false };
        let m = decode_sib9(&rx.emission.bits).unwrap().message;
        rx.emission.origin == Origin::Attacker && m.ref_sfn as u64 == rx.emission.frame % 1024
    })
}

#[test]
fn replay_success_needs_full_cycle_and_power() {
    for delay_frames in (1020..=1028).chain([2048, 2047, 3072]) {
        for adv in [-3.0, 0.0, 3.0, 6.0] {
            let want = delay_frames % 1024 == 0 && adv > 0.0;
            assert_eq!(replay_succeeds(delay_frames, adv), want, "delay {delay_frames} frames, {adv} dB");
        }
    }
}

// ------------------------------------------------------------------ btca

fn dataset() -> impl Strategy<Value = ClockDataset> {
    (1u32..=6, 0u32..4, -20.0f64..-3.0, 1i64..100, 1e-20f64..1e-16, 0u32..5, 1e-18f64..1e-14).prop_map(
        |(lvl, pri, rsrq, tau, allan, hops, var)| ClockDataset {
            id: String::new(),
            tap_level: lvl,
            priority: pri,
            avg_rsrq: rsrq,
            tau_star: Duration::from_secs(tau),
            allan_min: allan,
            hops_to_mc: hops,
            offset_scale_variance: var,
            address: 0,
        },
    )
}

fn named(mut sets: Vec<ClockDataset>) -> Vec<ClockDataset> {
    for (i, s) in sets.iter_mut().enumerate() {
        s.id = format!("clk{i}");
    }
    sets
}

proptest! {
    #[test]
    fn selection_ignores_order(sets in prop::collection::vec(dataset(), 1..8), seed in any::<u64>()) {
        let sets = named(sets);
        let tol = Tolerances::default();
        let a = best_clock(&sets, &tol).unwrap();
        let mut shuffled = sets.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % n);
        }
        let b = best_clock(&shuffled, &tol).unwrap();
        prop_assert_eq!(a.selection, b.selection);
    }

    /// Improving one non-level field of a winner keeps it selected.
    #[test]
    fn improving_the_winner_keeps_it(sets in prop::collection::vec(dataset(), 1..8), field in 0usize..6) {
        let mut sets = named(sets);
        let tol = Tolerances::default();
        let r = best_clock(&sets, &tol).unwrap();
        let ids = r.ids();
        prop_assume!(ids.len() == 1);
        let w: usize = ids[0][3..].parse().unwrap();
        let c = &mut sets[w];
        match field {
            0 => c.priority = c.priority.saturating_sub(1),
            1 => c.avg_rsrq += 1.0,
            2 => c.tau_star = (c.tau_star - Duration::from_secs(1)).max(Duration::ZERO),
            3 => c.hops_to_mc = c.hops_to_mc.saturating_sub(1),
            4 => c.offset_scale_variance *= 0.5,
            _ => c.allan_min *= 0.5,
        }
        let after = best_clock(&sets, &tol).unwrap();
        prop_assert!(after.ids().contains(&sets[w].id.as_str()), "{:?}", after);
    }

    #[test]
    fn clk_addr_is_deterministic(id in prop::collection::vec(any::<u8>(), 1..16), seg in any::<u32>(), mask in 0u8..32) {
        let a = clk_addr(&id, seg, mask).unwrap();
        prop_assert_eq!(a, clk_addr(&id, seg, mask).unwrap());
        if mask > 0 {
            prop_assert_eq!(a >> (32 - mask), seg >> (32 - mask));
        }
    }
}
