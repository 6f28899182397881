//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mobsim::address::{make_mask, masked_compare, AddressSpace, BitMask, BitPool, PhysAddr, VirtAddr, PA_BITS};
use mobsim::harness::{gen_spoiler_trace, gen_stress_trace, SpoilerParams};
use mobsim::metrics::{classify_aliased, misspec_rate, per_page_latency, sab_overhead_bits, SAB_ENTRY_OVERHEAD_BITS};
use mobsim::mob::{run_trace, run_trace_in, Model, SimConfig, SimStats};
use mobsim::oracle::{expected_violations_oracle, oracle_replay};
use mobsim::trace::{OpKind, Trace, TraceMeta, TraceOp};

const SEED: u64 = 7;
const DESK_PLANTED: usize = 8;
const BALANCED_PLANTED: usize = 64;
const STRESS_BENIGN_PER_ROUND: usize = 64;

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Verdict + 'a>);

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn desk_trace(planted: usize) -> Trace {
    let params = SpoilerParams::desk(planted, SEED).unwrap();
    gen_spoiler_trace(&params, &mut AddressSpace::new(SEED)).unwrap()
}

fn run(trace: &Trace, model: Model) -> SimStats {
    run_trace(trace, &SimConfig::new(model, SEED)).unwrap()
}

fn within_sigma(hits: u64, n: u64, p: f64, k: f64) -> (bool, f64) {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let z = (hits as f64 - mean) / sigma;
    (z.abs() <= k, z)
}

fn random_pa(rng: &mut ChaCha8Rng) -> PhysAddr {
    PhysAddr::new(rng.gen::<u64>() & ((1u64 << PA_BITS) - 1)).unwrap()
}

fn c1_alias_probability() -> Verdict {
    const PAIRS: u64 = 10_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let fixed = BitMask::fixed8();
    let mut hits8 = 0u64;
    for _ in 0..PAIRS {
        hits8 += u64::from(masked_compare(random_pa(&mut rng), random_pa(&mut rng), &fixed));
    }
    let mut hits12 = 0u64;
    for _ in 0..PAIRS {
        let mask = make_mask(&mut rng, 12, BitPool::DEFAULT).unwrap();
        hits12 += u64::from(masked_compare(random_pa(&mut rng), random_pa(&mut rng), &mask));
    }
    let (ok8, z8) = within_sigma(hits8, PAIRS, 1.0 / 256.0, 3.0);
    let (ok12, z12) = within_sigma(hits12, PAIRS, 1.0 / 4096.0, 3.0);
    verdict(
        ok8 && ok12,
        format!("w8 {hits8}/{PAIRS} (z={z8:+.2}), w12 {hits12}/{PAIRS} (z={z12:+.2}), bound |z|<=3"),
    )
}

fn c2_oracle_equivalence(trace: &Trace, m2: &SimStats) -> Verdict {
    let cfg = SimConfig::new(Model::M2, SEED);
    let space = trace.meta.address_space().unwrap();
    let expected = expected_violations_oracle(trace, &space, &cfg).unwrap();
    let replay = oracle_replay(trace, &space, &cfg).unwrap();
    let lat: Vec<u64> = m2.per_load_latency.iter().map(|r| r.latency_cycles).collect();
    let pass = m2.spoiler_violations == expected && lat == replay.load_latencies && m2.total_cycles == replay.total_cycles;
    verdict(
        pass,
        format!(
            "simulator {} vs oracle {} violations; cycles {} vs {}; per-load latencies {}",
            m2.spoiler_violations,
            expected,
            m2.total_cycles,
            replay.total_cycles,
            if lat == replay.load_latencies { "equal" } else { "differ" }
        ),
    )
}

fn c3_leakage_collapse() -> Verdict {
    let trace = desk_trace(BALANCED_PLANTED);
    let acc = |m| {
        let s = run(&trace, m);
        classify_aliased(&per_page_latency(&s, &trace.meta).unwrap()).unwrap().accuracy
    };
    let (a1, a2, a3) = (acc(Model::M1), acc(Model::M2), acc(Model::M3));
    verdict(
        a2 >= 0.99 && a3 <= 0.55,
        format!("{BALANCED_PLANTED}/128 planted: accuracy m2={a2:.4} (>=0.99), m3={a3:.4} (<=0.55), m1={a1:.4}"),
    )
}

fn c4_misspec_rate(m2: &SimStats, m3: &SimStats) -> Verdict {
    let r2 = misspec_rate(m2).unwrap();
    let r3 = misspec_rate(m3).unwrap();
    let pass = r3 <= 1e-5 && r2 > 0.0 && r2 >= 1e3 * r3;
    verdict(
        pass,
        format!(
            "m3 {:.5}% ({} of {} loads, bound 0.001%), m2 {:.3}% ({} events)",
            r3 * 100.0,
            m3.misspeculations,
            m3.total_loads,
            r2 * 100.0,
            m2.misspeculations
        ),
    )
}

/// Small trace over a handful of pages. Load pages are planted on every pool
/// bit against a store page so that any mask speculates on them.
fn small_trace(seed: u64, ops: &[(bool, u8, u8, u8)]) -> Trace {
    const STORE_VPN: u64 = 0x100;
    const LOAD_VPN: u64 = 0x200;
    let mut space = AddressSpace::new(seed);
    let pool = BitMask::range(12, 31).unwrap();
    for i in 0..4u64 {
        let donor = space.translate(VirtAddr::from_parts(STORE_VPN + i, 0).unwrap()).unwrap();
        space.plant_alias(VirtAddr::from_parts(LOAD_VPN + i, 0).unwrap(), donor, &pool).unwrap();
    }
    let ops = ops
        .iter()
        .enumerate()
        .map(|(seq, &(is_store, page, off, pc))| {
            let vpn = if is_store { STORE_VPN } else { LOAD_VPN } + u64::from(page % 4);
            TraceOp {
                seq: seq as u64,
                kind: if is_store { OpKind::Store } else { OpKind::Load },
                va: VirtAddr::from_parts(vpn, u64::from(off % 2) * 0x40).unwrap(),
                pc: 0x40_0000 + u64::from(pc % 3) * 4,
                is_probe: !is_store,
            }
        })
        .collect();
    Trace::new(TraceMeta { page_map: space.mapping(), space_seed: seed, ..TraceMeta::empty() }, ops)
}

fn max_per_pair(s: &SimStats) -> u64 {
    let mut counts: HashMap<(u64, u64), u64> = HashMap::new();
    for e in &s.misspec_log {
        *counts.entry((e.load_pc, e.store_seq)).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

fn c5_single_replay() -> Verdict {
    let mut runner = TestRunner::new_with_rng(
        PtConfig { cases: 256, failure_persistence: None, ..PtConfig::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let strategy = (
        any::<u64>(),
        prop::collection::vec((any::<bool>(), 0u8..4, 0u8..2, 0u8..3), 1..80),
        prop::sample::select(vec![0u64, 32, 256, 4096]),
    );
    let total_m3 = std::cell::Cell::new(0u64);
    let result = runner.run(&strategy, |(seed, ops, drain_delay)| {
        let trace = small_trace(seed, &ops);
        let cfg = SimConfig { drain_delay, ..SimConfig::new(Model::M3, seed) };
        let s = run_trace(&trace, &cfg).unwrap();
        total_m3.set(total_m3.get() + s.misspeculations);
        prop_assert!(max_per_pair(&s) <= 1, "repeated (pc, entry) misspeculation: {:?}", s.misspec_log);
        Ok(())
    });

    // pinned M2 case: one store, the same probe twice against it
    let pinned = small_trace(SEED, &[(true, 0, 0, 0), (false, 0, 0, 0), (false, 0, 0, 0)]);
    let m2 = run_trace(&pinned, &SimConfig::new(Model::M2, SEED)).unwrap();
    let m3 = run_trace(&pinned, &SimConfig::new(Model::M3, SEED)).unwrap();
    let m2_max = max_per_pair(&m2);
    let pass = result.is_ok() && m2_max >= 2 && max_per_pair(&m3) <= 1;
    let prop = match &result {
        Ok(()) => format!("256 random traces hold (m3 events seen {})", total_m3.get()),
        Err(e) => format!("property failed: {e}"),
    };
    verdict(pass, format!("{prop}; pinned store: m2 {m2_max} repeats, m3 {}", max_per_pair(&m3)))
}

fn c6_remask_independence() -> Verdict {
    const PAIRS: u64 = 200_000;
    const S_VPN: u64 = 0x10_0000;
    const L_VPN: u64 = 0x20_0000;
    const F_VPN: u64 = 0x30_0000;
    const P_VPN: u64 = 0x40_0000;
    let mut space = AddressSpace::new(SEED);
    let pool = BitMask::range(12, 31).unwrap();
    let mut ops = Vec::with_capacity(4 * PAIRS as usize);
    let mut probe_seqs = Vec::with_capacity(PAIRS as usize);
    for i in 0..PAIRS {
        let donor = space.translate(VirtAddr::from_parts(S_VPN + i, 0).unwrap()).unwrap();
        space.plant_alias(VirtAddr::from_parts(L_VPN + i, 0).unwrap(), donor, &pool).unwrap();
        let base = 4 * i;
        let op = |k: u64, kind, vpn: u64, off, pc, is_probe| TraceOp {
            seq: base + k,
            kind,
            va: VirtAddr::from_parts(vpn + i, off).unwrap(),
            pc,
            is_probe,
        };
        // forced misspeculation, then a fresh probe under the new mask
        ops.push(op(0, OpKind::Store, S_VPN, 0x100, 0x40_1000, false));
        ops.push(op(1, OpKind::Load, L_VPN, 0x100, 0x40_1004, false));
        ops.push(op(2, OpKind::Store, F_VPN, 0x200, 0x40_1008, false));
        ops.push(op(3, OpKind::Load, P_VPN, 0x200, 0x40_100c, true));
        probe_seqs.push(base + 3);
    }
    let trace = Trace::new(TraceMeta::empty(), ops);
    let s = run_trace_in(&trace, &SimConfig::new(Model::M3, SEED), &mut space).unwrap();
    let forced = s.misspec_log.iter().filter(|e| (e.load_seq & 3) == 1).count() as u64;
    let mut hit: Vec<u64> = s.misspec_log.iter().filter(|e| (e.load_seq & 3) == 3).map(|e| e.load_seq).collect();
    hit.dedup();
    let hits = hit.len() as u64;
    let (ok, z) = within_sigma(hits, PAIRS, 1.0 / 4096.0, 3.0);
    let pass = ok && forced == PAIRS && s.remask_events >= PAIRS;
    verdict(
        pass,
        format!(
            "{hits}/{PAIRS} post-remask probes misspeculated (expected {:.1}, z={z:+.2}); {forced} forced remasks",
            PAIRS as f64 / 4096.0
        ),
    )
}

fn c7_storage() -> Verdict {
    let total = sab_overhead_bits(56);
    verdict(
        total == 2968 && SAB_ENTRY_OVERHEAD_BITS == 53,
        format!("56 entries -> {total} bits, {SAB_ENTRY_OVERHEAD_BITS} per entry"),
    )
}

fn c8_performance(spoiler: [&SimStats; 3]) -> Verdict {
    let params = SpoilerParams::desk(DESK_PLANTED, SEED).unwrap();
    let stress = gen_stress_trace(&params, STRESS_BENIGN_PER_ROUND, &mut AddressSpace::new(SEED)).unwrap();
    let stress: Vec<SimStats> = Model::ALL.iter().map(|&m| run(&stress, m)).collect();
    let check = |c: [u64; 3]| {
        let [m1, m2, m3] = c;
        let gap = (m3 as f64 - m1 as f64).abs() / m1 as f64;
        (m3 < m2 && gap <= 0.01, format!("m1={m1} m2={m2} m3={m3} (|m3-m1|/m1={:.3}%)", gap * 100.0))
    };
    let (ok_a, a) = check(spoiler.map(|s| s.total_cycles));
    let (ok_b, b) = check([stress[0].total_cycles, stress[1].total_cycles, stress[2].total_cycles]);
    verdict(ok_a && ok_b, format!("spoiler {a}; stress {b}"))
}

fn mobsim(args: &[&str], dir: &Path) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_mobsim")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "mobsim {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut outputs = Vec::new();
    let mut record = |name: &str, bytes: Vec<u8>| outputs.push((name.to_string(), bytes));
    record("gen spoiler", mobsim(&["gen", "spoiler", "--seed", "7", "--out", "spoiler.trace"], dir));
    record(
        "gen stress",
        mobsim(&["gen", "stress", "--pages", "32", "--rounds", "4", "--seed", "7", "--out", "stress.trace"], dir),
    );
    record(
        "gen benign",
        mobsim(&["gen", "benign", "--kind", "random", "--ops", "5000", "--seed", "7", "--out", "benign.trace"], dir),
    );
    let mut summaries = Vec::new();
    for m in ["m1", "m2", "m3"] {
        let out = format!("run_{m}");
        record(&format!("run {m}"), mobsim(&["run", "--trace", "spoiler.trace", "--model", m, "--seed", "7", "--out", &out], dir));
        summaries.push(format!("{out}/{m}_summary.json"));
        let bout = format!("benign_{m}");
        record(
            &format!("run benign {m}"),
            mobsim(&["run", "--trace", "benign.trace", "--model", m, "--seed", "7", "--out", &bout], dir),
        );
    }
    let mut args = vec!["compare"];
    args.extend(summaries.iter().map(String::as_str));
    args.extend(["--out", "compare.json"]);
    record("compare", mobsim(&args, dir));

    let mut files = Vec::new();
    collect_files(dir, dir, &mut files);
    files.sort();
    for f in files {
        let bytes = std::fs::read(dir.join(&f)).unwrap();
        outputs.push((f, bytes));
    }
    outputs
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().display().to_string());
        }
    }
}

fn c9_determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty();
    verdict(
        pass,
        if pass {
            format!("{} outputs (files and stdout) byte-identical across two runs", first.len())
        } else {
            format!("differing outputs: {differing:?}")
        },
    )
}

fn main() {
    let desk = desk_trace(DESK_PLANTED);
    let m1 = run(&desk, Model::M1);
    let m2 = run(&desk, Model::M2);
    let m3 = run(&desk, Model::M3);

    let criteria: Vec<Criterion> = vec![
        ("aliasing probability", Box::new(c1_alias_probability)),
        ("oracle equivalence", Box::new(|| c2_oracle_equivalence(&desk, &m2))),
        ("leakage collapse", Box::new(c3_leakage_collapse)),
        ("misspeculation rate", Box::new(|| c4_misspec_rate(&m2, &m3))),
        ("single replay", Box::new(c5_single_replay)),
        ("remask independence", Box::new(c6_remask_independence)),
        ("storage arithmetic", Box::new(c7_storage)),
        ("performance ordering", Box::new(|| c8_performance([&m1, &m2, &m3]))),
        ("determinism", Box::new(c9_determinism)),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let v = check();
        failed += usize::from(!v.pass);
        println!("[{}] {}. {}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, name, v.detail);
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
