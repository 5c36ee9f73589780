//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use edgespec_core::analytics::{self, PerfParams};
use edgespec_core::models::{make_aligned_pair, make_constant_alpha_pair, AlignedPair};
use edgespec_core::pipeline::{serve_cloud, serve_edge, TICK_MS};
use edgespec_core::rejection::{accept_test, reference_transcript, residual_resample, residual_weights, topk_compress};
use edgespec_core::scenario::{self, SweepDim};
use edgespec_core::transport::FramedStream;
use edgespec_core::wire::{encode, frame_size_model};
use edgespec_core::{
    run, ChannelConfig, DenseDistribution, DraftBatch, FrameKind, PipelineMode, PipelineSetup, RandomStream,
    RunOutcome, ScenarioConfig, SequenceModel, SessionConfig, StreamLabel, TokenId, Verdict, VerdictKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn preset(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"));
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn setup(
    pair: AlignedPair,
    gamma: usize,
    t_d: f64,
    t_v: f64,
    channel: ChannelConfig,
    mode: PipelineMode,
) -> PipelineSetup {
    let vocab = pair.target.vocab_size();
    PipelineSetup {
        draft: Arc::new(pair.draft.with_token_cost(t_d)),
        target: Arc::new(pair.target.with_token_cost(t_v)),
        session: SessionConfig { vocab_size: vocab, gamma, top_k: vocab.min(10), seed: 1 },
        channel,
        mode,
        max_tokens: 2000,
        prompt: vec![TokenId(0)],
        prefill_ms: 10.0,
        truncation: None,
        cost_spikes: Vec::new(),
    }
}

fn const_alpha(alpha: f64, gamma: usize, t_d: f64, t_v: f64, one_way: f64, mode: PipelineMode) -> PipelineSetup {
    setup(make_constant_alpha_pair(16, alpha).unwrap(), gamma, t_d, t_v, ChannelConfig::ideal(one_way), mode)
}

fn full_hit(t_d: f64, t_v: f64, channel: ChannelConfig, mode: PipelineMode) -> PipelineSetup {
    setup(make_aligned_pair(16, 1, 1.0, 3).unwrap(), 4, t_d, t_v, channel, mode)
}

fn run_ok(s: &PipelineSetup) -> Result<RunOutcome, String> {
    run(s).map_err(|e| format!("{} run failed: {e}", s.mode))
}

/// Drops warm-up and wind-down cycles.
fn steady<T: Clone>(xs: &[T]) -> Vec<T> {
    xs[3..xs.len() - 2].to_vec()
}

fn max_dev(xs: &[f64], want: impl Fn(usize) -> f64) -> f64 {
    xs.iter().enumerate().map(|(i, &x)| (x - want(i)).abs()).fold(0.0, f64::max)
}

fn lossless() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut total = 0;
    for i in 0..10 {
        let vocab = rng.random_range(4..=64);
        let order = if vocab <= 32 { rng.random_range(1..=2) } else { 1 };
        let lambda = rng.random_range(0.2..0.95);
        let gamma = rng.random_range(2..=6);
        let seed = rng.random::<u64>();
        let pair = make_aligned_pair(vocab, order, lambda, seed).map_err(|e| e.to_string())?;
        let channel = ChannelConfig {
            one_way_latency_ms: rng.random_range(1.0..50.0),
            bandwidth_bytes_per_ms: Some(rng.random_range(5.0..500.0)),
            jitter_std_ms: rng.random_range(0.0..20.0),
        };
        let mut s = setup(
            pair.clone(),
            gamma,
            rng.random_range(1.0..20.0),
            rng.random_range(0.5..10.0),
            channel,
            PipelineMode::Async,
        );
        s.session.top_k = vocab;
        s.session.seed = seed;
        s.max_tokens = 10_000;
        s.prompt = vec![TokenId(rng.random_range(0..vocab as u32)); order];
        let out = run_ok(&s)?;
        let want = reference_transcript(&pair.draft, &pair.target, &s.prompt, gamma, seed, s.max_tokens);
        let n = out.transcript.len().min(want.len());
        ensure(n >= 10_000, || format!("scenario {i}: only {n} tokens"))?;
        if let Some(p) = (0..n).find(|&p| out.transcript[p] != want[p]) {
            return Err(format!("scenario {i} (V={vocab}): first mismatch at token {p}"));
        }
        total += n;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("10 scenarios, {total} tokens identical to the dense reference in {secs:.1} s"))
}

/// Committed-token distribution of one step, enumerated: draft `x ~ Q`,
/// accept with `min(1, P/Q)`, otherwise resample from the normalized
/// residual the implementation computes.
fn enumerate_step(p: &DenseDistribution, q: &DenseDistribution) -> Vec<f64> {
    let vocab = p.vocab_size();
    let mut out = vec![0.0; vocab];
    let residual = residual_weights(&topk_compress(p, vocab), q);
    let total: f64 = residual.iter().map(|e| e.1).sum();
    for x in 0..vocab {
        let qx = q.probs()[x] as f64;
        if qx == 0.0 {
            continue;
        }
        let accept = (p.probs()[x] as f64 / qx).min(1.0);
        out[x] += qx * accept;
        for &(id, w) in &residual {
            out[id.index()] += qx * (1.0 - accept) * w / total;
        }
    }
    out
}

fn dyadic_row(rng: &mut ChaCha8Rng, vocab: usize) -> DenseDistribution {
    // Probabilities k/256 are exact in f32, so the oracle is exact.
    let mut counts = vec![0u32; vocab];
    for _ in 0..256 {
        counts[rng.random_range(0..vocab)] += 1;
    }
    if rng.random_bool(0.3) {
        let z = rng.random_range(0..vocab);
        let moved = counts[z];
        counts[z] = 0;
        counts[(z + 1) % vocab] += moved;
    }
    DenseDistribution::new(counts.iter().map(|&c| c as f32 / 256.0).collect()).unwrap()
}

fn distribution() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for vocab in 2..=8 {
        for _ in 0..200 {
            let p = dyadic_row(&mut rng, vocab);
            let q = dyadic_row(&mut rng, vocab);
            let got = enumerate_step(&p, &q);
            for (g, &want) in got.iter().zip(p.probs()) {
                worst = worst.max((g - want as f64).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("enumerated deviation {worst:e} > 1e-9"))?;

    // V = 64: sample through the accept test and residual resampler.
    let pair = make_aligned_pair(64, 1, 0.5, 9).map_err(|e| e.to_string())?;
    let ctx = [TokenId(5)];
    let p = pair.target.next_distribution(&ctx).clone();
    let q = pair.draft.next_distribution(&ctx).clone();
    let sparse = topk_compress(&p, 64);
    let mut draft = RandomStream::new(3, StreamLabel::EdgeDraft);
    let mut accept = RandomStream::new(3, StreamLabel::CloudAccept);
    let mut resample = RandomStream::new(3, StreamLabel::EdgeResample);
    let n = 200_000;
    let mut counts = vec![0usize; 64];
    for _ in 0..n {
        let x = q.sample(draft.draw_uniform());
        let y = if accept_test(p.prob(x), q.prob(x), accept.draw_uniform()).map_err(|e| e.to_string())? {
            x
        } else {
            residual_resample(&sparse, &q, &mut resample)
        };
        counts[y.index()] += 1;
    }
    let tv: f64 =
        0.5 * counts.iter().zip(p.probs()).map(|(&c, &px)| (c as f64 / n as f64 - px as f64).abs()).sum::<f64>();
    ensure(tv < 0.01, || format!("V=64 empirical TV {tv:.4} >= 0.01"))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("V<=8 max deviation {worst:.1e}; V=64 TV {tv:.4} over {n} samples"))
}

fn accept_length() -> Check {
    let mut parts = Vec::new();
    for alpha in [0.3, 0.6, 0.9] {
        let want = analytics::expected_accept_length(alpha, 4);
        let mut s = const_alpha(alpha, 4, 2.0, 1.0, 5.0, PipelineMode::Async);
        s.max_tokens = (12_000.0 * want) as usize;
        let out = run_ok(&s)?;
        let m = &out.metrics;
        ensure(m.cycles >= 10_000, || format!("alpha {alpha}: only {} cycles", m.cycles))?;
        let err = (m.mean_accept_len - want).abs() / want;
        ensure(err <= 0.02, || format!("alpha {alpha}: {:.4} vs {want:.4}", m.mean_accept_len))?;
        parts.push(format!("a={alpha}: {:.4}/{want:.4}", m.mean_accept_len));
    }
    Ok(parts.join(", "))
}

fn timing_laws() -> Check {
    let mut worst: f64 = 0.0;
    // Sync: D + R + V, on an ideal link at mixed acceptance and on a
    // bandwidth-limited link at full acceptance.
    for alpha in [1.0, 0.6] {
        let out = run_ok(&const_alpha(alpha, 4, 25.0, 7.5, 30.0, PipelineMode::SyncBaseline))?;
        let c = steady(&out.trace.cycle_times());
        worst = worst.max(max_dev(&c, |_| 100.0 + 60.0 + 30.0));
    }
    let channel = ChannelConfig { one_way_latency_ms: 30.0, bandwidth_bytes_per_ms: Some(2.0), jitter_std_ms: 0.0 };
    let out = run_ok(&full_hit(25.0, 7.5, channel, PipelineMode::SyncBaseline))?;
    let rtt = 60.0 + (frame_size_model(FrameKind::Draft, 4) + frame_size_model(FrameKind::Verdict, 0)) as f64 / 2.0;
    worst = worst.max(max_dev(&steady(&out.trace.cycle_times()), |_| 100.0 + rtt + 30.0));
    ensure(worst <= TICK_MS, || format!("sync cycle off by {worst:e} ms"))?;

    // Pipelined full hit: compute bound gives D in both pipelined modes.
    for mode in [PipelineMode::Async, PipelineMode::AsyncNoFastVerify] {
        let out = run_ok(&full_hit(25.0, 7.5, ChannelConfig::ideal(30.0), mode))?;
        let want = analytics::full_hit_latency(100.0, 60.0, 30.0);
        worst = worst.max(max_dev(&steady(&out.trace.cycle_times()), |_| want));
    }
    // Latency bound: R + V without pre-verification; with it, R + V less
    // the pre-verified share of that batch.
    let out = run_ok(&full_hit(10.0, 10.0, ChannelConfig::ideal(40.0), PipelineMode::AsyncNoFastVerify))?;
    let want = analytics::full_hit_latency(40.0, 80.0, 40.0);
    worst = worst.max(max_dev(&steady(&out.trace.cycle_times()), |_| want));
    let out = run_ok(&full_hit(10.0, 10.0, ChannelConfig::ideal(40.0), PipelineMode::Async))?;
    let cycles = steady(&out.trace.cycles);
    let times = steady(&out.trace.cycle_times());
    for (c, t) in cycles.iter().zip(&times) {
        let v = out.trace.verifies.iter().find(|v| v.batch_id == c.batch_id).ok_or("no verify record")?;
        let want = analytics::full_hit_latency(40.0, 80.0, v.end - v.start);
        worst = worst.max((t - want).abs());
    }
    ensure(worst <= TICK_MS, || format!("cycle off by {worst:e} ms"))?;
    Ok(format!("sync and full-hit cycles within {worst:.1e} ms of the closed form"))
}

fn expected_latency() -> Check {
    let mut worst: f64 = 0.0;
    let mut min_cycles = usize::MAX;
    for alpha in [0.5, 0.8, 0.95] {
        for rtt in [30.0, 60.0, 90.0] {
            let el = analytics::expected_accept_length(alpha, 4);
            let mut s = const_alpha(alpha, 4, 25.0, 1.0, rtt / 2.0, PipelineMode::Async);
            s.max_tokens = (2500.0 * el) as usize;
            let out = run_ok(&s)?;
            let p = PerfParams { alpha, gamma: 4, t_draft: 100.0, t_verify: 4.0, t_rtt: rtt, t_pre: 0.0 };
            let want = analytics::async_expected_latency(&p);
            let err = (out.metrics.mean_cycle_ms - want).abs() / want;
            ensure(err <= 0.03, || format!("a={alpha} rtt={rtt}: {:.2} vs {want:.2}", out.metrics.mean_cycle_ms))?;
            worst = worst.max(err);
            min_cycles = min_cycles.min(out.metrics.cycles);
        }
    }
    ensure(min_cycles >= 2000, || format!("only {min_cycles} cycles"))?;
    Ok(format!("3x3 grid, max relative error {:.2}%, >= {min_cycles} cycles each", worst * 100.0))
}

fn bubble() -> Check {
    let cases = [
        ("clamped", 25.0, 7.5, 30.0, PipelineMode::Async),
        ("pre-verified", 10.0, 15.0, 20.0, PipelineMode::Async),
        ("unclamped", 25.0, 12.5, 50.0, PipelineMode::AsyncNoFastVerify),
    ];
    let mut parts = Vec::new();
    for (name, t_d, t_v, one_way, mode) in cases {
        let out = run_ok(&full_hit(t_d, t_v, ChannelConfig::ideal(one_way), mode))?;
        let mut seen = Vec::new();
        for c in steady(&out.trace.cycles) {
            let v = out.trace.verifies.iter().find(|v| v.batch_id == c.batch_id).ok_or("no verify record")?;
            let want = analytics::bubble_time(2.0 * one_way, 4.0 * t_v, 4.0 * t_d, v.t_pre_ms);
            ensure((c.bubble_ms - want).abs() <= TICK_MS, || {
                format!("{name}: batch {} bubble {} vs {want}", c.batch_id, c.bubble_ms)
            })?;
            seen.push(want);
        }
        parts.push(format!("{name} {:.1} ms", seen.iter().sum::<f64>() / seen.len() as f64));
    }
    ensure(parts[0].ends_with(" 0.0 ms") && !parts[2].ends_with(" 0.0 ms"), || parts.join(", "))?;
    Ok(parts.join(", "))
}

fn speedup() -> Check {
    let mut lo = f64::INFINITY;
    let mut excess = f64::NEG_INFINITY;
    for alpha in [0.2, 0.5, 0.8, 1.0] {
        for gamma in [2, 4, 6] {
            for (t_d, t_v, one_way) in [(25.0, 7.5, 15.0), (10.0, 10.0, 20.0)] {
                let mut a = const_alpha(alpha, gamma, t_d, t_v, one_way, PipelineMode::Async);
                a.max_tokens = 4000;
                let mut s = a.clone();
                s.mode = PipelineMode::SyncBaseline;
                let sp = run_ok(&a)?.metrics.throughput_tps / run_ok(&s)?.metrics.throughput_tps;
                let p = PerfParams {
                    alpha,
                    gamma,
                    t_draft: gamma as f64 * t_d,
                    t_verify: gamma as f64 * t_v,
                    t_rtt: 2.0 * one_way,
                    t_pre: 0.0,
                };
                let limit = analytics::speedup_limit(&p);
                ensure(sp >= 0.95 && sp <= limit + 0.02, || {
                    format!("a={alpha} g={gamma} d={t_d}: S={sp:.3}, limit {limit:.3}")
                })?;
                lo = lo.min(sp);
                excess = excess.max(sp - limit);
            }
        }
    }
    // Full acceptance, compute bound: S reaches the limit.
    let mut a = full_hit(25.0, 7.5, ChannelConfig::ideal(30.0), PipelineMode::Async);
    a.max_tokens = 4000;
    let mut s = a.clone();
    s.mode = PipelineMode::SyncBaseline;
    let sp = run_ok(&a)?.metrics.throughput_tps / run_ok(&s)?.metrics.throughput_tps;
    let limit = 1.0 + (60.0 + 30.0) / 100.0;
    ensure((sp - limit).abs() / limit <= 0.02, || format!("full hit S={sp:.4} vs limit {limit:.4}"))?;
    // Latency immunity.
    let mut thr = Vec::new();
    for rtt in [0.0, 50.0, 100.0, 200.0] {
        let mut a = full_hit(60.0, 5.0, ChannelConfig::ideal(rtt / 2.0), PipelineMode::Async);
        a.max_tokens = 4000;
        thr.push(run_ok(&a)?.metrics.throughput_tps);
    }
    let mean = thr.iter().sum::<f64>() / thr.len() as f64;
    let spread = thr.iter().map(|t| (t - mean).abs() / mean).fold(0.0, f64::max);
    ensure(spread <= 0.02, || format!("throughput across RTT {thr:?}"))?;
    Ok(format!(
        "grid min S {lo:.3}, max S-limit {excess:+.3}; full hit S {sp:.3}/{limit:.3}; RTT spread {:.2}%",
        spread * 100.0
    ))
}

fn wire_budgets() -> Check {
    let batch =
        DraftBatch::new(1, 100, (0..4).map(TokenId).collect(), vec![0.5; 4], false).map_err(|e| e.to_string())?;
    let draft =
        encode(&edgespec_core::Frame::from_batch(&batch).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let p = DenseDistribution::from_weights(&(1..=32).map(f64::from).collect::<Vec<_>>()).unwrap();
    let verdict = Verdict {
        batch_id: 1,
        accepted_count: 2,
        kind: VerdictKind::Rejected { position: 2, sparse_target: topk_compress(&p, 10) },
    };
    let verdict =
        encode(&edgespec_core::Frame::from_verdict(&verdict).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(draft.len() == 37 && draft.len() <= 50, || format!("draft frame {} bytes", draft.len()))?;
    ensure(verdict.len() == 71 && verdict.len() <= 100, || format!("verdict frame {} bytes", verdict.len()))?;
    let dense = frame_size_model(FrameKind::Verdict, 128_256);
    let sparse = frame_size_model(FrameKind::Verdict, 10);
    let ratio = dense as f64 / sparse as f64;
    ensure(ratio > 1000.0, || format!("reduction {ratio:.0}x"))?;
    Ok(format!("draft 37 B, verdict 71 B, dense/sparse {ratio:.0}x at V=128256"))
}

fn ablation() -> Check {
    let rows = scenario::compare(&preset("ablation")).map_err(|e| e.to_string())?;
    let thr = |mode: &str| rows.iter().find(|r| r.mode == mode).map(|r| r.throughput_tps).unwrap();
    let (full, nofv, sync, dense) = (thr("async"), thr("no-fastverify"), thr("sync"), thr("no-splitrej"));
    ensure(full >= 1.05 * nofv, || format!("async {full:.2} vs no-fastverify {nofv:.2}"))?;
    ensure(nofv >= 1.05 * sync, || format!("no-fastverify {nofv:.2} vs sync {sync:.2}"))?;
    ensure(nofv > dense, || format!("no-fastverify {nofv:.2} vs no-splitrej {dense:.2}"))?;
    Ok(format!("async {full:.2} > no-fastverify {nofv:.2} > sync {sync:.2}, no-splitrej {dense:.2} tok/s"))
}

fn gamma_sweep() -> Check {
    let values = [2.0, 3.0, 4.0, 5.0, 6.0];
    let cfg = preset("gamma-sweep");
    let rows = scenario::sweep(&cfg, SweepDim::Gamma, &values).map_err(|e| e.to_string())?;
    let el: Vec<f64> = rows.iter().map(|r| r.mean_accept_len).collect();
    let thr: Vec<f64> = rows.iter().map(|r| r.throughput_tps).collect();
    ensure(el.windows(2).all(|w| w[1] > w[0]), || format!("acceptance length {el:?}"))?;
    let peak = (0..thr.len()).max_by(|&a, &b| thr[a].total_cmp(&thr[b])).unwrap();
    ensure(peak > 0 && peak < thr.len() - 1, || format!("throughput {thr:?} peaks at the edge"))?;
    let rtt = cfg.predicted_rtt_ms();
    let crosses = values.windows(2).any(|w| {
        (w[0] * cfg.costs.draft_token_ms - rtt - w[0] * cfg.costs.verify_token_ms) < 0.0
            && (w[1] * cfg.costs.draft_token_ms - rtt - w[1] * cfg.costs.verify_token_ms) >= 0.0
    });
    ensure(crosses, || "draft time does not cross RTT + verify inside the sweep".into())?;
    Ok(format!(
        "peak at gamma={}; throughput {}",
        values[peak],
        thr.iter().map(|t| format!("{t:.2}")).collect::<Vec<_>>().join(" ")
    ))
}

fn socket_loopback() -> Check {
    let mut cfg = preset("lossless-check");
    cfg.max_tokens = 3000;
    let s = cfg.setup().map_err(|e| e.to_string())?;
    let sim = run_ok(&s)?;
    let digest = cfg.digest();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let cloud_setup = s.clone();
    let cloud = std::thread::spawn(move || {
        let stream = FramedStream::accept(&listener)?;
        serve_cloud(&cloud_setup, stream, &digest)
    });
    let stream = FramedStream::connect(addr).map_err(|e| e.to_string())?;
    let edge = serve_edge(&s, stream, &digest).map_err(|e| e.to_string())?;
    let cloud = cloud.join().map_err(|_| "cloud thread panicked")?.map_err(|e| e.to_string())?;
    ensure(edge.committed == cloud.committed, || "edge and cloud disagree".into())?;
    ensure(edge.transcript(s.prompt.len()) == &sim.transcript[..], || "socket transcript differs".into())?;
    Ok(format!("{} tokens identical over TCP loopback", sim.transcript.len()))
}

fn consistency() -> Check {
    let mut runs = 0;
    for name in ["fullhit", "lossless-check", "alpha-grid", "gamma-sweep", "jitter-stress", "ablation"] {
        let base = preset(name);
        for mode in PipelineMode::ALL {
            for seed in [1, 2, 3] {
                let mut cfg = base.clone();
                cfg.mode = mode;
                cfg.session.seed = seed;
                cfg.max_tokens = cfg.max_tokens.min(3000);
                cfg.run().map_err(|e| format!("{name} {mode} seed {seed}: {e}"))?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs, edge and cloud sequences equal in all"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("lossless against dense reference", lossless),
        ("single-step distribution exactness", distribution),
        ("mean acceptance length", accept_length),
        ("sync and full-hit cycle times", timing_laws),
        ("expected pipelined cycle time", expected_latency),
        ("edge bubble per cycle", bubble),
        ("speedup bounds and latency immunity", speedup),
        ("wire frame budgets", wire_budgets),
        ("ablation ordering", ablation),
        ("draft length sweep shape", gamma_sweep),
        ("socket transcript equals simulation", socket_loopback),
        ("edge/cloud consistency", consistency),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
