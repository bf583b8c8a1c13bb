//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use confroute::evalkit::{run_ablation, AblationConfig, Signal};
use confroute::gateway::{app, AppState, GatewayConfig};
use confroute::ingest::{
    decode_bundle, decode_trace, encode_bundle, encode_trace, load_record, read_trace, synth_pool,
    write_corpus, CorpusSpec, IngestError,
};
use confroute::numkit::Vector;
use confroute::router::{
    calibrate_thresholds, learn_fusion_weights, route, Action, CalibrationObjective,
    CalibrationSample, CostModel, RoutingDecision, Thresholds, WeightSample,
};
use confroute::signals::{
    internal_convergence_raw, score, ConfidencePredictor, ConvergenceConfig, HiddenStateTrace,
    ProjectionModel, SignalValues,
};
use confroute::training::{
    build_dataset, combined_loss, split, train, LossWeights, Tier, TierCounts, TrainConfig,
    TrainingExample,
};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(
        elapsed < limit,
        format!("took {elapsed:.2?}, limit {limit:?}"),
    )
}

// ---------------------------------------------------------------------------

/// Central differences on a sample of coordinates per parameter group.
/// Groups with at most `PER_GROUP` entries are checked exhaustively.
fn gradient_check() -> Outcome {
    const H: usize = 64;
    const PER_GROUP: usize = 24;
    const STEP: f64 = 1e-5;
    let t0 = Instant::now();
    let lw = LossWeights {
        lambda_l2: 1e-3,
        ..LossWeights::default()
    };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut groups = 0usize;
    for seed in 0..5u64 {
        let examples = synth_pool(&CorpusSpec {
            seed: 100 + seed,
            hidden_dim: H,
            num_layers: 6,
            counts: TierCounts {
                high: 3,
                medium: 2,
                low: 3,
            },
        })
        .map_err(|e| e.to_string())?;
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = ProjectionModel::new(H, &mut rng);
        let pred = ConfidencePredictor::new(H, &mut rng);
        let loss_at = |p: &ProjectionModel, q: &ConfidencePredictor| {
            combined_loss(
                &batch,
                p,
                q,
                &lw,
                &mut ChaCha8Rng::seed_from_u64(1000 + seed),
            )
            .expect("valid batch")
        };
        let analytic = loss_at(&proj, &pred).grads;
        let n_proj = proj.group_count();
        groups = analytic.len();
        for (g, grad) in analytic.iter().enumerate() {
            let coords: Vec<usize> = if grad.len() <= PER_GROUP {
                (0..grad.len()).collect()
            } else {
                (0..PER_GROUP)
                    .map(|_| rng.random_range(0..grad.len()))
                    .collect()
            };
            for i in coords {
                let eval = |delta: f64| {
                    let (mut p, mut q) = (proj.clone(), pred.clone());
                    if g < n_proj {
                        p.params_mut()[g][i] += delta;
                    } else {
                        q.params_mut()[g - n_proj][i] += delta;
                    }
                    loss_at(&p, &q).parts.total
                };
                let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
                let a = grad[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = t0.elapsed();
    check(worst <= 1e-4, format!("worst relative error {worst:.3e}"))?;
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "H=64 batch 8, 5 seeds, {groups} groups, {checked} coordinates, worst rel {worst:.2e}, {elapsed:.2?}"
    ))
}

/// Population variance per dimension by the pairwise-difference identity,
/// averaged over dimensions; no means are formed.
fn naive_ratio(rows: &[Vec<f64>], eps: f64) -> f64 {
    let l = rows.len();
    let m = l.div_ceil(2);
    let h = rows[0].len();
    let var = |from: usize, to: usize| {
        let n = (to - from + 1) as f64;
        let mut total = 0.0;
        for d in 0..h {
            let mut s = 0.0;
            for i in from..=to {
                for j in from..=to {
                    let diff = rows[i][d] - rows[j][d];
                    s += diff * diff;
                }
            }
            total += s / (2.0 * n * n);
        }
        total / h as f64
    };
    var(0, m - 1) / (var(m - 1, l - 1) + eps)
}

fn convergence_oracle() -> Outcome {
    let t0 = Instant::now();
    let cfg = ConvergenceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let l = rng.random_range(2..=6);
        let h = rng.random_range(1..=4);
        let rows: Vec<Vec<f64>> = if case == 0 {
            vec![vec![0.7; h]; l]
        } else {
            (0..l)
                .map(|_| (0..h).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect()
        };
        let trace = HiddenStateTrace::new("q", rows.iter().cloned().map(Vector::new).collect())
            .map_err(|e| e.to_string())?;
        let got = internal_convergence_raw(&trace, &cfg).map_err(|e| e.to_string())?;
        let want = naive_ratio(&rows, cfg.epsilon);
        if case == 0 {
            check(got == 0.0, format!("identical layers gave {got}"))?;
        }
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-9, format!("max abs deviation {worst:.3e}"))?;
    let elapsed = t0.elapsed();
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "100 traces, max abs deviation {worst:.1e}, identical layers -> 0, {elapsed:.2?}"
    ))
}

fn routing_function() -> Outcome {
    let t0 = Instant::now();
    let th = Thresholds::new(0.75, 0.55, 0.35).map_err(|e| e.to_string())?;
    let piecewise = |c: f64| {
        if c >= 0.75 {
            Action::Local
        } else if c >= 0.55 {
            Action::Rag
        } else if c >= 0.35 {
            Action::Large
        } else {
            Action::Human
        }
    };
    let mut n = 0;
    for k in 0..=1000u32 {
        let c = f64::from(k) / 1000.0;
        let got = route(c, &th).map_err(|e| e.to_string())?;
        check(
            got == piecewise(c),
            format!("route({c}) = {got}, expected {}", piecewise(c)),
        )?;
        n += 1;
    }
    for (c, want) in [
        (0.75, Action::Local),
        (0.55, Action::Rag),
        (0.35, Action::Large),
    ] {
        check(route(c, &th).ok() == Some(want), format!("boundary {c}"))?;
    }
    for (c, want) in [
        (0.80, Action::Local),
        (0.579, Action::Rag),
        (0.10, Action::Human),
    ] {
        check(
            route(c, &th).ok() == Some(want),
            format!("reference point {c}"),
        )?;
    }
    let elapsed = t0.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!(
        "{n} grid points, boundaries and 0.80/0.579/0.10 reference points, {elapsed:.2?}"
    ))
}

fn end_to_end_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, manifest) =
        write_corpus(dir.path(), &CorpusSpec::default()).map_err(|e| e.to_string())?;
    let set = build_dataset(&manifest, TierCounts::STANDARD).map_err(|e| e.to_string())?;
    check(
        set.len() == 72,
        format!("dataset has {} examples", set.len()),
    )?;
    let cfg = TrainConfig::default();
    let t0 = Instant::now();
    let (bundle, history) = train(&set, &cfg).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    within(elapsed, Duration::from_secs(300))?;
    check(
        history.epochs.len() == 30,
        format!("{} epochs recorded", history.epochs.len()),
    )?;
    let first = history.epochs[0].total;
    let last = history.epochs[29].total;
    check(last < 0.30, format!("final total loss {last:.4}"))?;
    check(
        last < first,
        format!("final {last:.4} not below epoch-1 {first:.4}"),
    )?;

    let (_, val) = split(&set, cfg.train_fraction, cfg.seed).map_err(|e| e.to_string())?;
    let mut means = Vec::new();
    for tier in Tier::ALL {
        let xs: Vec<f64> = val
            .examples
            .iter()
            .filter(|e| e.tier == tier)
            .map(|e| score(&e.trace, &e.reference, &bundle).map(|b| b.c_overall))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        check(!xs.is_empty(), format!("no {tier} examples in validation"))?;
        means.push(xs.iter().sum::<f64>() / xs.len() as f64);
    }
    check(
        means[0] > means[1] && means[1] > means[2],
        format!("tier means not ordered: {means:.3?}"),
    )?;
    let gap = means[0] - means[2];
    check(gap >= 0.3, format!("high-low gap {gap:.3}"))?;

    let (_, again) = train(&set, &cfg).map_err(|e| e.to_string())?;
    let bits = |h: &confroute::training::TrainingHistory| -> Vec<[u64; 6]> {
        h.epochs
            .iter()
            .map(|r| {
                [
                    r.total.to_bits(),
                    r.align.to_bits(),
                    r.conf.to_bits(),
                    r.l2.to_bits(),
                    r.lr.to_bits(),
                    r.val_total.unwrap_or(f64::NAN).to_bits(),
                ]
            })
            .collect()
    };
    check(
        bits(&history) == bits(&again),
        "histories differ across identical runs",
    )?;
    Ok(format!(
        "loss {first:.3} -> {last:.3}, val means high/medium/low {:.3}/{:.3}/{:.3}, gap {gap:.3}, bit-identical rerun, {elapsed:.2?}",
        means[0], means[1], means[2]
    ))
}

fn calibration_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t0 = Instant::now();
    let samples: Vec<CalibrationSample> = (0..500)
        .map(|i| {
            let h = i % 2 == 0;
            let s = if h {
                rng.random_range(0.0..0.4)
            } else {
                rng.random_range(0.6..1.0)
            };
            CalibrationSample::new(s, h)
        })
        .collect();
    let th = calibrate_thresholds(
        &samples,
        &CostModel::default(),
        CalibrationObjective::F1,
        0.01,
    )
    .map_err(|e| e.to_string())?;
    let max_h = samples
        .iter()
        .filter(|s| s.hallucinated)
        .map(|s| s.score)
        .fold(f64::MIN, f64::max);
    let min_c = samples
        .iter()
        .filter(|s| !s.hallucinated)
        .map(|s| s.score)
        .fold(f64::MAX, f64::min);
    check(
        th.high > max_h && th.high <= min_c,
        format!("θ_high {} outside gap ({max_h:.3}, {min_c:.3}]", th.high),
    )?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in &samples {
        let flagged = route(s.score, &th).map_err(|e| e.to_string())? != Action::Local;
        match (flagged, s.hallucinated) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    check(f1 == 1.0, format!("F1 {f1}"))?;
    let t_thresholds = t0.elapsed();
    within(t_thresholds, Duration::from_secs(10))?;

    let t1 = Instant::now();
    let ws: Vec<WeightSample> = (0..500)
        .map(|i| {
            let h = i % 2 == 0;
            WeightSample {
                signals: SignalValues {
                    sem: if h {
                        rng.random_range(0.0..0.4)
                    } else {
                        rng.random_range(0.6..1.0)
                    },
                    conv: rng.random_range(0.0..1.0),
                    learned: rng.random_range(0.0..1.0),
                },
                hallucinated: h,
            }
        })
        .collect();
    let w = learn_fusion_weights(&ws, 0.75, 0.05).map_err(|e| e.to_string())?;
    check(
        w.sem >= w.conv && w.sem >= w.learned,
        format!("weights {w:?}"),
    )?;
    let t_weights = t1.elapsed();
    within(t_weights, Duration::from_secs(10))?;
    Ok(format!(
        "θ = {}/{}/{} in gap ({max_h:.3}, {min_c:.3}], F1 1.0 ({t_thresholds:.2?}); weights sem/conv/learned {:.2}/{:.2}/{:.2} ({t_weights:.2?})",
        th.high, th.med, th.low, w.sem, w.conv, w.learned
    ))
}

fn cost_accounting() -> Outcome {
    let cost = CostModel {
        local: 1.0,
        rag: 2.8,
        large: 5.0,
        human: 10.0,
    };
    let decisions: Vec<RoutingDecision> = [
        (Action::Local, 70),
        (Action::Rag, 20),
        (Action::Large, 8),
        (Action::Human, 2),
    ]
    .into_iter()
    .flat_map(|(a, n)| std::iter::repeat_n(a, n))
    .map(|action| RoutingDecision {
        query_id: "q".into(),
        action,
        breakdown: confroute::signals::ConfidenceBreakdown {
            c_sem: 0.0,
            c_conv_raw: 0.0,
            c_conv: 0.0,
            c_learned: 0.0,
            c_overall: 0.0,
        },
        thresholds_version: String::new(),
        timestamp: 0,
    })
    .collect();
    let m = confroute::router::expected_cost(&decisions, &cost).map_err(|e| e.to_string())?;
    check(m == 1.86, format!("expected_cost = {m:?}"))?;
    Ok(format!("70/20/8/2 mixture -> {m}"))
}

fn format_round_trips() -> Outcome {
    let t0 = Instant::now();
    let examples = synth_pool(&CorpusSpec {
        counts: TierCounts {
            high: 2,
            medium: 2,
            low: 2,
        },
        ..CorpusSpec::default()
    })
    .map_err(|e| e.to_string())?;
    for e in &examples {
        let bytes = encode_trace(&e.trace);
        let back = decode_trace(&bytes, e.query_id()).map_err(|e| e.to_string())?;
        check(
            encode_trace(&back) == bytes,
            "trace bytes differ after round trip",
        )?;
        let same = back.layers().iter().zip(e.trace.layers()).all(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        check(same, "trace values differ after round trip")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bundle = confroute::ModelBundle::new(
        ProjectionModel::new(16, &mut rng),
        ConfidencePredictor::new(16, &mut rng),
        confroute::signals::FusionWeights::new(0.5, 0.3, 0.2).map_err(|e| e.to_string())?,
        Thresholds::default(),
    )
    .map_err(|e| e.to_string())?;
    let bytes = encode_bundle(&bundle).map_err(|e| e.to_string())?;
    let back = decode_bundle(&bytes).map_err(|e| e.to_string())?;
    check(back == bundle, "bundle differs after round trip")?;
    check(
        encode_bundle(&back).map_err(|e| e.to_string())? == bytes,
        "bundle bytes differ after round trip",
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seed_bytes = encode_trace(&examples[0].trace);
    let (mut ok, mut errs, mut panics) = (0usize, 0usize, 0usize);
    for case in 0..10_000u32 {
        let mut b = seed_bytes.clone();
        match case % 6 {
            0 => b.truncate(rng.random_range(0..b.len())),
            1 => {
                for _ in 0..rng.random_range(1..9) {
                    let i = rng.random_range(0..b.len());
                    b[i] ^= 1 << rng.random_range(0..8);
                }
            }
            2 => {
                let at = 4 * rng.random_range(1..4);
                b[at..at + 4].copy_from_slice(&rng.random::<u32>().to_le_bytes());
            }
            3 => b = (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
            4 => b.extend((0..rng.random_range(1..16)).map(|_| rng.random::<u8>())),
            _ => {
                let i = 16 + 4 * rng.random_range(0..(b.len() - 16) / 4);
                b[i..i + 4].copy_from_slice(&[0xff, 0xff, 0xff, 0x7f]);
            }
        }
        let path = dir.path().join(format!("f{case}.hst"));
        std::fs::write(&path, &b).map_err(|e| e.to_string())?;
        match catch_unwind(AssertUnwindSafe(|| read_trace(&path))) {
            Ok(Ok(_)) => ok += 1,
            Ok(Err(IngestError::Format { .. } | IngestError::Signal(_))) => errs += 1,
            Ok(Err(other)) => return Err(format!("unexpected error kind: {other}")),
            Err(_) => panics += 1,
        }
    }
    check(panics == 0, format!("{panics} panics"))?;
    Ok(format!(
        "trace and bundle bit-exact; fuzz 10000 cases: {errs} structured errors, {ok} valid, 0 panics, {:.2?}",
        t0.elapsed()
    ))
}

async fn call(
    router: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .expect("request");
    let resp = router.clone().oneshot(req).await.expect("infallible");
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .expect("body")
            .to_bytes()
            .to_vec(),
    )
}

fn path_request(id: &str) -> Value {
    json!({
        "query_id": id,
        "trace": {"path": format!("traces/{id}.hst")},
        "ref_embedding": {"path": format!("refs/{id}.hst")},
    })
}

async fn gateway_checks() -> Outcome {
    let fx = common::fixture();
    let cfg = |queue: &str| GatewayConfig {
        bundle: fx.bundle_path.clone(),
        queue: fx.dir.path().join(queue),
        data_root: Some(fx.corpus_dir()),
        ..GatewayConfig::default()
    };
    let start = |queue: &str| -> Result<(AppState, Router), String> {
        let state = AppState::from_config(&cfg(queue)).map_err(|e| e.to_string())?;
        Ok((state.clone(), app(state, 16 << 20)))
    };

    // parity over the full corpus
    let (_, router) = start("parity.jsonl")?;
    let mut lowest: Option<(String, f64)> = None;
    let mut n = 0;
    for rec in fx.manifest.records() {
        let (t, r) = load_record(&fx.manifest, rec).map_err(|e| e.to_string())?;
        let b = score(&t, &r, &fx.bundle).map_err(|e| e.to_string())?;
        let want = route(b.c_overall, &fx.bundle.thresholds).map_err(|e| e.to_string())?;
        let (s, body) = call(
            &router,
            "POST",
            "/v1/route",
            Some(path_request(&rec.query_id)),
        )
        .await;
        check(s == StatusCode::OK, format!("{}: status {s}", rec.query_id))?;
        let v: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let got: Action =
            serde_json::from_value(v["decision"]["action"].clone()).map_err(|e| e.to_string())?;
        check(
            got == want,
            format!("{}: gateway {got}, in-process {want}", rec.query_id),
        )?;
        if lowest.as_ref().is_none_or(|(_, c)| b.c_overall < *c) {
            lowest = Some((rec.query_id.clone(), b.c_overall));
        }
        n += 1;
    }
    let (low_id, _) = lowest.ok_or("empty corpus")?;

    // 256 concurrent identical requests vs 256 sequential ones
    let (seq_state, seq_router) = start("seq.jsonl")?;
    let mut seq_actions = Vec::new();
    for _ in 0..256 {
        let (_, body) = call(
            &seq_router,
            "POST",
            "/v1/route",
            Some(path_request(&low_id)),
        )
        .await;
        let v: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        seq_actions.push((
            v["decision"]["action"].clone(),
            v["decision"]["breakdown"].clone(),
        ));
    }
    let (con_state, con_router) = start("con.jsonl")?;
    let handles: Vec<_> = (0..256)
        .map(|_| {
            let r = con_router.clone();
            let body = path_request(&low_id);
            tokio::spawn(async move { call(&r, "POST", "/v1/route", Some(body)).await })
        })
        .collect();
    let mut con_actions = Vec::new();
    for h in handles {
        let (s, body) = h.await.map_err(|e| e.to_string())?;
        check(s == StatusCode::OK, format!("concurrent status {s}"))?;
        let v: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        con_actions.push((
            v["decision"]["action"].clone(),
            v["decision"]["breakdown"].clone(),
        ));
    }
    check(
        con_actions
            .iter()
            .chain(&seq_actions)
            .all(|a| *a == seq_actions[0]),
        "decisions differ across identical requests",
    )?;
    let (ms, mc) = (seq_state.metrics(), con_state.metrics());
    check(ms == mc, format!("metrics differ: {ms:?} vs {mc:?}"))?;
    let ids = |s: &AppState| {
        s.pending()
            .into_iter()
            .map(|i| i.item_id)
            .collect::<Vec<_>>()
    };
    let con_ids = ids(&con_state);
    check(ids(&seq_state) == con_ids, "review queues differ")?;

    // restart on the same queue file
    drop(con_router);
    drop(con_state);
    let (restarted, _) = start("con.jsonl")?;
    check(ids(&restarted) == con_ids, "pending items lost on restart")?;

    Ok(format!(
        "{n}/{n} corpus decisions match in-process; 256 concurrent = sequential ({} decisions, {} pending); {} pending items survive restart; no secondary component built",
        mc.decisions,
        mc.pending_reviews,
        con_ids.len()
    ))
}

fn ablation_shape() -> Outcome {
    let fx = common::fixture();
    let standard = AblationConfig::standard();
    let fixture_set =
        build_dataset(&fx.manifest, TierCounts::STANDARD).map_err(|e| e.to_string())?;
    let heldout = synth_pool(&CorpusSpec {
        seed: 1,
        ..CorpusSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for (label, examples) in [
        ("training corpus", &fixture_set.examples),
        ("held-out corpus", &heldout),
    ] {
        let rows = run_ablation(&fx.bundle, examples, &standard).map_err(|e| e.to_string())?;
        check(rows.len() == 4, format!("{} rows", rows.len()))?;
        let names: Vec<&str> = rows.iter().map(|r| r.config.as_str()).collect();
        check(
            names
                == [
                    "Semantic alignment only",
                    "Internal convergence only",
                    "Learned confidence only",
                    "All combined",
                ],
            format!("row names {names:?}"),
        )?;
        check(
            standard[3].signals == Signal::ALL,
            "last row is not the full signal set",
        )?;
        let f1 = |i: usize| rows[i].report.f1.unwrap_or(0.0);
        for i in 0..3 {
            check(
                f1(3) >= f1(i) - 0.02,
                format!(
                    "{label}: combined F1 {:.3} < {} F1 {:.3} - 0.02",
                    f1(3),
                    rows[i].config,
                    f1(i)
                ),
            )?;
        }
        summary.push(format!(
            "{label} F1 sem/conv/learned/all {:.2}/{:.2}/{:.2}/{:.2}",
            f1(0),
            f1(1),
            f1(2),
            f1(3)
        ));
    }
    Ok(summary.join("; "))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(8)
        .enable_all()
        .build()
        .expect("runtime");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(gradient_check)),
        (
            "convergence oracle equivalence",
            Box::new(convergence_oracle),
        ),
        ("routing function", Box::new(routing_function)),
        ("end-to-end training", Box::new(end_to_end_training)),
        ("calibration recovery", Box::new(calibration_recovery)),
        ("cost accounting", Box::new(cost_accounting)),
        ("format round-trips", Box::new(format_round_trips)),
        (
            "gateway parity and soak",
            Box::new(|| rt.block_on(gateway_checks())),
        ),
        ("ablation shape", Box::new(ablation_shape)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
