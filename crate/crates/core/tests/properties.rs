use oscmac::energy::{
    crossover_distance, rx_energy, tx_energy, Activity, Battery, RadioEnergyParams,
};
use oscmac::engine::channel::{ct_reach, in_reach};
use oscmac::selection::{
    elect_helpers, filter_candidates, leader_helper, selection_threshold, CandidateRecord,
    CtRequest,
};
use oscmac::{NodeId, Position};
use proptest::prelude::*;

fn params() -> RadioEnergyParams {
    RadioEnergyParams::default()
}

fn request(bytes: u32, packets: u32, d: f64) -> CtRequest {
    CtRequest {
        requester: NodeId(0),
        packet_size_bytes: bytes,
        packet_count: packets,
        next_hop_distance: d,
        neighbor_ids: vec![],
    }
}

fn sorted_candidates(raw: Vec<(f64, f64)>) -> Vec<CandidateRecord> {
    let mut v: Vec<CandidateRecord> = raw
        .into_iter()
        .enumerate()
        .map(|(i, (energy, cost))| CandidateRecord {
            node: NodeId(i as u32 + 1),
            energy,
            per_packet_tx_energy: cost,
            distance_to_requester: 10.0,
        })
        .collect();
    v.sort_by(|a, b| b.energy.total_cmp(&a.energy));
    v
}

fn candidate_strategy() -> impl Strategy<Value = Vec<CandidateRecord>> {
    prop::collection::vec((0.0f64..2.0, 1e-6f64..1e-3), 0..20).prop_map(sorted_candidates)
}

#[test]
fn amplifier_terms_meet_at_the_crossover() {
    let p = params();
    let d0 = crossover_distance(&p);
    assert!((d0 - 87.705_801_930_702_9).abs() < 1e-9);
    let near = p.e_fs * d0 * d0;
    let far = p.e_mp * d0.powi(4);
    assert!((near - far).abs() <= 1e-12 * near);
    let below = tx_energy(1000, d0 * (1.0 - 1e-12), &p);
    let at = tx_energy(1000, d0, &p);
    assert!((at - below).abs() / at < 1e-9);
}

proptest! {
    #[test]
    fn tx_grows_with_distance(bits in 1u64..100_000, a in 0.0f64..500.0, b in 0.0f64..500.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p = params();
        prop_assert!(tx_energy(bits, lo, &p) <= tx_energy(bits, hi, &p));
    }

    #[test]
    fn costs_are_linear_in_bits(bits in 1u64..50_000, k in 1u64..20, d in 0.0f64..400.0) {
        let p = params();
        let one = tx_energy(bits, d, &p);
        let many = tx_energy(bits * k, d, &p);
        prop_assert!((many - k as f64 * one).abs() <= 1e-12 * many.max(1e-30));
        let rx1 = rx_energy(bits, &p);
        prop_assert!((rx_energy(bits * k, &p) - k as f64 * rx1).abs() <= 1e-12 * rx1 * k as f64);
    }

    #[test]
    fn battery_books_every_joule(initial in 0.0f64..5.0, draws in prop::collection::vec((0.0f64..0.5, 0usize..5), 0..60)) {
        let kinds = [Activity::Transmit, Activity::Receive, Activity::Overhear, Activity::IdleListen, Activity::Sleep];
        let mut b = Battery::new(initial);
        let mut was_alive = b.alive();
        let mut last = b.residual();
        for (amount, k) in draws {
            let d = b.drain(amount, kinds[k]);
            prop_assert!(d.amount <= amount);
            prop_assert!(b.residual() >= 0.0 && b.residual() <= last);
            prop_assert!(!b.alive() || was_alive, "a dead battery came back");
            prop_assert!((b.initial() - b.residual() - b.consumed().total()).abs() <= 1e-12 * initial.max(1.0));
            was_alive = b.alive();
            last = b.residual();
        }
    }

    #[test]
    fn filter_is_the_brute_force_subsequence(cands in candidate_strategy(), bytes in 1u32..200, d in 0.0f64..200.0) {
        let p = params();
        let req = request(bytes, 5, d);
        let kept = filter_candidates(&cands, &req, &p).unwrap();
        let s = f64::from(bytes) * 8.0;
        let threshold = 50e-9 * s + 10e-12 * s * d * d;
        let expected: Vec<_> = cands.iter().filter(|c| c.energy >= threshold).copied().collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn raising_a_threshold_never_adds_helpers(cands in candidate_strategy(), d1 in 0.0f64..200.0, d2 in 0.0f64..200.0) {
        let p = params();
        let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = filter_candidates(&cands, &request(100, 5, near), &p).unwrap();
        let b = filter_candidates(&cands, &request(100, 5, far), &p).unwrap();
        prop_assert!(b.iter().all(|c| a.contains(c)));
        prop_assert!(selection_threshold(&request(100, 5, near), &p) <= selection_threshold(&request(100, 5, far), &p));
    }

    #[test]
    fn election_is_scale_invariant(cands in candidate_strategy(), n in 1u32..50, k in -8i32..8) {
        let base = elect_helpers(&cands, n).unwrap();
        let scale = 2f64.powi(k);
        let scaled: Vec<_> = cands
            .iter()
            .map(|c| CandidateRecord { energy: c.energy * scale, per_packet_tx_energy: c.per_packet_tx_energy * scale, ..*c })
            .collect();
        prop_assert_eq!(elect_helpers(&scaled, n).unwrap(), base);
    }

    #[test]
    fn more_packets_never_add_helpers(cands in candidate_strategy(), n in 1u32..50, extra in 0u32..50) {
        let few = elect_helpers(&cands, n).unwrap();
        let many = elect_helpers(&cands, n + extra).unwrap();
        prop_assert!(many.helpers.iter().all(|h| few.helpers.contains(h)));
    }

    #[test]
    fn leader_is_the_richest_lowest_id(cands in candidate_strategy(), n in 1u32..10) {
        let elected = elect_helpers(&cands, n).unwrap();
        let members: Vec<_> = cands.iter().filter(|c| elected.helpers.contains(&c.node)).copied().collect();
        match elected.leader {
            None => prop_assert!(members.is_empty()),
            Some(l) => {
                let best = members.iter().map(|c| c.energy).fold(f64::NEG_INFINITY, f64::max);
                let expected = members.iter().filter(|c| c.energy == best).map(|c| c.node).min().unwrap();
                prop_assert_eq!(l, expected);
                prop_assert_eq!(leader_helper(&members).unwrap(), expected);
            }
        }
    }

    #[test]
    fn filter_then_elect_keeps_order(cands in candidate_strategy(), n in 1u32..10, d in 0.0f64..150.0) {
        let p = params();
        let kept = filter_candidates(&cands, &request(100, n, d), &p).unwrap();
        let elected = elect_helpers(&kept, n).unwrap();
        let order: Vec<_> = kept.iter().map(|c| c.node).filter(|id| elected.helpers.contains(id)).collect();
        prop_assert_eq!(&elected.helpers, &order);
        let direct: Vec<_> = cands
            .iter()
            .filter(|c| c.energy >= selection_threshold(&request(100, n, d), &p))
            .filter(|c| c.energy / (f64::from(n) * c.per_packet_tx_energy) >= 1.0)
            .map(|c| c.node)
            .collect();
        prop_assert_eq!(elected.helpers, direct);
    }

    #[test]
    fn single_sender_reach_is_the_unit_disk(sx in -300.0f64..300.0, sy in -300.0f64..300.0, range in 1.0f64..200.0, alpha in 2i32..5) {
        let s = Position::new(sx, sy);
        let r = Position::new(0.0, 0.0);
        prop_assert_eq!(ct_reach(&[s], r, range, alpha), in_reach(s, r, range));
    }

    #[test]
    fn adding_senders_never_loses_reach(pts in prop::collection::vec((-300.0f64..300.0, -300.0f64..300.0), 1..6), extra in (-300.0f64..300.0, -300.0f64..300.0)) {
        let r = Position::new(0.0, 0.0);
        let mut senders: Vec<_> = pts.iter().map(|&(x, y)| Position::new(x, y)).collect();
        let before = ct_reach(&senders, r, 90.0, 2);
        senders.push(Position::new(extra.0, extra.1));
        prop_assert!(!before || ct_reach(&senders, r, 90.0, 2));
    }
}

#[test]
fn unsorted_input_is_rejected() {
    let mut cands = sorted_candidates(vec![(1.0, 1e-4), (0.5, 1e-4)]);
    cands.reverse();
    assert!(filter_candidates(&cands, &request(100, 1, 50.0), &params()).is_err());
}
