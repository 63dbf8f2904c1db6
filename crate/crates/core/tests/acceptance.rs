//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::io::BufWriter;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use oscmac::energy::{crossover_distance, tx_energy, RadioEnergyParams};
use oscmac::engine::channel::{group_reach, resolve_slot, Reception, Transmission};
use oscmac::mac::{Packet, PacketKind, RdvId};
use oscmac::selection::{elect_helpers, filter_candidates, CandidateRecord, CtRequest};
use oscmac::{run, run_in_memory, NodeId, Position};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let t = Instant::now();
    let note = f()?;
    let spent = t.elapsed();
    ensure(spent < limit, || format!("took {spent:?}, limit {limit:?}"))?;
    Ok(format!("{note} in {spent:.2?}"))
}

/// Closed-form first-order radio cost, coded separately from the library.
fn oracle_tx(bits: f64, d: f64) -> f64 {
    let (elec, fs, mp) = (50e-9, 10e-12, 0.0013e-12);
    if d * d >= fs / mp {
        bits * elec + bits * mp * d * d * d * d
    } else {
        bits * elec + bits * fs * d * d
    }
}

fn energy_oracle() -> Check {
    timed(Duration::from_secs(1), || {
        let p = RadioEnergyParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let bits = rng.random_range(1..=10_000u64);
            let d = rng.random_range(0.0..=300.0);
            let expect = oracle_tx(bits as f64, d);
            let rel = (tx_energy(bits, d, &p) - expect).abs() / expect;
            worst = worst.max(rel);
            ensure(rel <= 1e-12, || {
                format!("tx_energy({bits}, {d}) off by {rel:e}")
            })?;
        }
        let d0 = crossover_distance(&p);
        let mut step = 0.0f64;
        for bits in [1u64, 800, 10_000] {
            let at = tx_energy(bits, d0, &p);
            let free_space = bits as f64 * p.e_elec + bits as f64 * p.e_fs * d0 * d0;
            let rel = (at - free_space).abs() / at;
            step = step.max(rel);
            ensure(rel <= 1e-15, || {
                format!("branches differ by {rel:e} at d0 for {bits} bits")
            })?;
        }
        Ok(format!(
            "worst relative error {worst:.1e}, branch step at d0 {step:.1e}"
        ))
    })
}

fn worked_numbers() -> Check {
    let p = RadioEnergyParams::default();
    let mut notes = Vec::new();
    for (d, expect) in [(50.0, 6.0e-5), (100.0, 1.44e-4)] {
        let got = tx_energy(800, d, &p);
        let rel = (got - expect).abs() / expect;
        ensure(rel <= 1e-12, || {
            format!("tx_energy(800, {d}) = {got:e}, expected {expect:e}")
        })?;
        notes.push(format!("tx(800,{d}) = {got:e}"));
    }
    Ok(notes.join(", "))
}

fn random_candidates(rng: &mut ChaCha8Rng) -> Vec<CandidateRecord> {
    let n = rng.random_range(0..=20usize);
    let mut v: Vec<CandidateRecord> = (0..n)
        .map(|i| CandidateRecord {
            node: NodeId(i as u32 + 1),
            energy: rng.random_range(0.0..1e-3),
            per_packet_tx_energy: rng.random_range(1e-6..1e-4),
            distance_to_requester: rng.random_range(1.0..90.0),
        })
        .collect();
    v.sort_by(|a, b| b.energy.total_cmp(&a.energy));
    v
}

fn selection_oracle() -> Check {
    timed(Duration::from_secs(1), || {
        let p = RadioEnergyParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut elected_total = 0;
        for trial in 0..500 {
            let cands = random_candidates(&mut rng);
            let req = CtRequest {
                requester: NodeId(0),
                packet_size_bytes: rng.random_range(1..=200),
                packet_count: rng.random_range(1..=10),
                next_hop_distance: rng.random_range(0.0..150.0),
                neighbor_ids: cands.iter().map(|c| c.node).collect(),
            };
            let bits = f64::from(req.packet_size_bytes) * 8.0;
            let d = req.next_hop_distance;
            let n = f64::from(req.packet_count);
            let mut filtered = Vec::new();
            let mut elected = Vec::new();
            for c in &cands {
                if c.energy >= 50e-9 * bits + 10e-12 * bits * d * d {
                    filtered.push(c.node);
                    if c.energy / (n * c.per_packet_tx_energy) >= 1.0 {
                        elected.push(c.node);
                    }
                }
            }
            let kept = filter_candidates(&cands, &req, &p).map_err(|e| e.to_string())?;
            let got: Vec<NodeId> = kept.iter().map(|c| c.node).collect();
            ensure(got == filtered, || {
                format!("trial {trial}: filter kept {got:?}, expected {filtered:?}")
            })?;
            let list = elect_helpers(&kept, req.packet_count).map_err(|e| e.to_string())?;
            ensure(list.helpers == elected, || {
                format!(
                    "trial {trial}: elected {:?}, expected {elected:?}",
                    list.helpers
                )
            })?;
            elected_total += elected.len();
        }
        let boundary = CandidateRecord {
            node: NodeId(7),
            energy: 1.0,
            per_packet_tx_energy: 0.25,
            distance_to_requester: 5.0,
        };
        let list = elect_helpers(&[boundary], 4).map_err(|e| e.to_string())?;
        ensure(list.helpers == vec![NodeId(7)], || {
            "energy = N*E_T was not elected".into()
        })?;
        Ok(format!(
            "500 lists agree ({elected_total} elections), boundary elected"
        ))
    })
}

fn scale_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..100 {
        let cands = random_candidates(&mut rng);
        let n = rng.random_range(1..=10u32);
        let c: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let base = elect_helpers(&cands, n).map_err(|e| e.to_string())?;
        let scaled: Vec<CandidateRecord> = cands
            .iter()
            .map(|x| CandidateRecord {
                energy: x.energy * c,
                per_packet_tx_energy: x.per_packet_tx_energy * c,
                ..*x
            })
            .collect();
        let got = elect_helpers(&scaled, n).map_err(|e| e.to_string())?;
        ensure(got == base, || {
            format!("trial {trial}: scaling by {c} changed {base:?} to {got:?}")
        })?;
    }
    Ok("100 random scalings leave set and leader unchanged".into())
}

fn range_extension_check() -> Check {
    timed(Duration::from_secs(1), || {
        let p = RadioEnergyParams::default();
        let helpers = [
            Position::new(0.0, 0.0),
            Position::new(8.0, 6.0),
            Position::new(8.0, -6.0),
        ];
        let fr = Position::new(120.0, 0.0);
        ensure(
            !group_reach(&helpers[..1], fr, 90.0, crossover_distance(&p)),
            || "TRN alone reaches".into(),
        )?;
        ensure(
            group_reach(&helpers, fr, 90.0, crossover_distance(&p)),
            || "3 senders do not reach".into(),
        )?;
        let (noct, _) = run_in_memory(&range_extension("noct", 5), 0).map_err(|e| e.to_string())?;
        let (ct, _) = run_in_memory(&range_extension("ct", 5), 0).map_err(|e| e.to_string())?;
        ensure(noct.packets_delivered == 0, || {
            format!("noct delivered {}", noct.packets_delivered)
        })?;
        ensure(
            ct.packets_delivered == ct.packets_offered && ct.packets_offered == 5,
            || {
                format!(
                    "ct delivered {}/{}",
                    ct.packets_delivered, ct.packets_offered
                )
            },
        )?;
        Ok(format!(
            "noct 0/{}, ct {}/{}",
            noct.packets_offered, ct.packets_delivered, ct.packets_offered
        ))
    })
}

fn trn_relief() -> Check {
    let p = RadioEnergyParams::default();
    let bits = 800;
    let (m, trace) = run_in_memory(&range_extension("ct", 5), 0).map_err(|e| e.to_string())?;
    let trn_data_tx: f64 = records(&trace)
        .iter()
        .filter(|r| {
            r.event == "transmit"
                && r.node == Some(NodeId(1))
                && r.detail_value("kind") == Some("data")
        })
        .map(|r| r.charged_j)
        .sum();
    let per_packet = trn_data_tx / m.packets_delivered.max(1) as f64;
    let broadcast = tx_energy(bits, 10.0, &p);
    let direct = tx_energy(bits, 120.0, &p);
    let note = format!(
        "tx(800,10) = {broadcast:e} J, tx(800,120) = {direct:e} J, ratio {:.4}; simulated TRN data cost per packet {per_packet:e} J",
        broadcast / direct
    );
    ensure(broadcast < 0.01 * direct, || {
        format!("{note}; required ratio < 0.01")
    })?;
    Ok(note)
}

fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("net.json");
    std::fs::write(&cfg, generated(20, 220.0, 300.0, "auto").to_json_pretty())
        .map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_oscmac");
    let cfg_s = cfg.to_str().unwrap();
    let mut hashes = Vec::new();
    for k in 0..2 {
        let trace = dir.path().join(format!("run{k}.csv"));
        let metrics = dir.path().join(format!("run{k}.json"));
        let st = Command::new(bin)
            .args([
                "run",
                "--config",
                cfg_s,
                "--seed",
                "9",
                "--trace",
                trace.to_str().unwrap(),
                "--metrics",
                metrics.to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(st.status.success(), || {
            String::from_utf8_lossy(&st.stderr).into_owned()
        })?;
        hashes.push(sha256_file(&trace));
    }
    ensure(hashes[0] == hashes[1], || "run traces differ".into())?;
    let mut compared = 0;
    for k in 0..2 {
        let out = dir.path().join(format!("cmp{k}"));
        let st = Command::new(bin)
            .args([
                "compare",
                "--config",
                cfg_s,
                "--seeds",
                "2",
                "--trace-dir",
                out.to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(st.status.success(), || {
            String::from_utf8_lossy(&st.stderr).into_owned()
        })?;
    }
    for seed in 0..2 {
        for mode in ["ct", "noct"] {
            let name = format!("net.seed{seed}.{mode}.trace.csv");
            let a = sha256_file(&dir.path().join("cmp0").join(&name));
            let b = sha256_file(&dir.path().join("cmp1").join(&name));
            ensure(a == b, || format!("compare trace {name} differs"))?;
            compared += 1;
        }
    }
    Ok(format!(
        "run trace sha256 {}..., {compared} compare traces identical",
        &hashes[0][..12]
    ))
}

fn conservation() -> Check {
    let mut depleting = generated(15, 160.0, 900.0, "auto");
    depleting.topology.initial_energy_j = 0.01;
    let scenarios = vec![
        ("range_extension/ct", range_extension("ct", 5), 0),
        ("range_extension/noct", range_extension("noct", 5), 0),
        ("two_node/noct", two_node("noct", 2), 0),
        ("two_node/ct", two_node("ct", 2), 0),
        ("hidden_pair", hidden_pair(), 0),
        ("generated/auto", generated(50, 300.0, 1000.0, "auto"), 1),
        ("generated/ct", generated(30, 250.0, 600.0, "ct"), 2),
        ("depleting", depleting, 5),
    ];
    let mut deaths = 0;
    for (name, c, seed) in &scenarios {
        let (m, trace) = run_in_memory(c, *seed).map_err(|e| format!("{name}: {e}"))?;
        let problems = audit(&trace, &m);
        ensure(problems.is_empty(), || {
            format!("{name}: {}", problems.join("; "))
        })?;
        deaths += m
            .energy_by_node
            .iter()
            .filter(|n| n.death_time_s.is_some())
            .count();
    }
    ensure(deaths > 0, || "no scenario exercised a node death".into())?;
    Ok(format!(
        "{} scenarios balance to 1e-9 J, {deaths} deaths, no dead or sleeping activity",
        scenarios.len()
    ))
}

fn collision_semantics() -> Check {
    let p = RadioEnergyParams::default();
    let d0 = crossover_distance(&p);
    let packet = Packet {
        seq: 0,
        size_bits: 800,
        source: NodeId(0),
        destination: NodeId(1),
        kind: PacketKind::Data,
    };
    let tx = |owner: u32, sender: u32| Transmission {
        rdv: RdvId {
            owner: NodeId(owner),
            n: 0,
        },
        sender: NodeId(sender),
        packet: packet.clone(),
        addressees: vec![NodeId(1)],
    };
    let pos = |id: NodeId| match id.0 {
        0 => Position::new(-50.0, 0.0),
        1 => Position::new(0.0, 0.0),
        2 => Position::new(50.0, 0.0),
        3 => Position::new(8.0, 6.0),
        4 => Position::new(8.0, -6.0),
        5 => Position::new(120.0, 0.0),
        _ => unreachable!(),
    };
    let out = resolve_slot(&[tx(0, 0), tx(2, 2)], &[NodeId(1)], pos, 90.0, d0);
    let collided = matches!(
        out.as_slice(),
        [(NodeId(1), Reception::Collision { audible: 2, .. })]
    );
    ensure(collided, || format!("independent senders gave {out:?}"))?;

    let (m, trace) = run_in_memory(&hidden_pair(), 0).map_err(|e| e.to_string())?;
    ensure(m.collisions == 1, || {
        format!("hidden pair counted {} collisions", m.collisions)
    })?;
    let recs = records(&trace);
    let hit = recs.iter().find(|r| r.event == "collision").unwrap();
    let start = hit.detail_value("start").unwrap();
    let sent = recs
        .iter()
        .filter(|r| r.event == "transmit" && r.detail_value("start") == Some(start))
        .count();
    let heard = recs
        .iter()
        .filter(|r| r.event == "receive" && r.detail_value("start") == Some(start))
        .count();
    ensure(sent == 2 && heard == 0, || {
        format!("collided slot: {sent} sent, {heard} received")
    })?;

    // helpers at 10 m cooperating with the sender toward a receiver 120 m out
    let group = [tx(1, 1), tx(1, 3), tx(1, 4)];
    let out = resolve_slot(
        &group,
        &[NodeId(5)],
        |id| {
            if id.0 == 1 {
                Position::new(0.0, 0.0)
            } else {
                pos(id)
            }
        },
        90.0,
        d0,
    );
    let decoded = matches!(out.as_slice(), [(NodeId(5), Reception::Decoded { .. })]);
    ensure(decoded, || format!("cooperative group gave {out:?}"))?;
    let (ct, _) = run_in_memory(&range_extension("ct", 5), 0).map_err(|e| e.to_string())?;
    ensure(ct.collisions == 0, || {
        format!("cooperative run counted {} collisions", ct.collisions)
    })?;
    Ok("2 packets lost in 1 collision event; 3-sender group decoded with 0 collisions".into())
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn scale_runtime() -> Check {
    let c = generated(50, 300.0, 10_000.0, "auto");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file =
        std::fs::File::create(dir.path().join("big.trace.csv")).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let (m, _) = run(&c, 0, BufWriter::new(file)).map_err(|e| e.to_string())?;
    let spent = t.elapsed();
    let peak = peak_rss_mb();
    ensure(spent < Duration::from_secs(5), || {
        format!("took {spent:.2?}")
    })?;
    if let Some(mb) = peak {
        ensure(mb < 200.0, || format!("peak resident memory {mb:.1} MB"))?;
    }
    Ok(format!(
        "{} events, {}/{} delivered, {spent:.2?}, peak RSS {}",
        m.events_processed,
        m.packets_delivered,
        m.packets_offered,
        peak.map(|mb| format!("{mb:.1} MB"))
            .unwrap_or_else(|| "unavailable".into())
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "energy model matches closed form", energy_oracle),
        (2, "worked transmit costs", worked_numbers),
        (3, "selection matches brute force", selection_oracle),
        (4, "selection is scale invariant", scale_invariance),
        (5, "cooperation extends range", range_extension_check),
        (6, "broadcast phase below 1% of direct cost", trn_relief),
        (7, "byte-identical traces", determinism),
        (8, "energy conservation and liveness", conservation),
        (9, "collision semantics", collision_semantics),
        (
            10,
            "50 nodes, 10000 frames under 5 s and 200 MB",
            scale_runtime,
        ),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(note)) => println!("criterion {n}: PASS  {name}: {note}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
