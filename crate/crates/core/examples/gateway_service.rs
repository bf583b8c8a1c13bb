//! Start the gateway on an ephemeral port and route a few queries over HTTP.
//!
//! Uses a plain TCP client so the example needs no HTTP client crate.

use std::io::{Read, Write};
use std::net::TcpStream;

use confroute::gateway::{app, AppState, GatewayConfig};
use confroute::ingest::{write_corpus, CorpusSpec};
use confroute::prelude::*;
use confroute::training::build_dataset;

fn request(addr: &str, method: &str, path: &str, body: &str) -> std::io::Result<String> {
    let mut s = TcpStream::connect(addr)?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out.split("\r\n\r\n").nth(1).unwrap_or_default().to_string())
}

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    let (_, manifest) = write_corpus(&corpus, &CorpusSpec::default())?;
    let (bundle, _) = train(
        &build_dataset(&manifest, TierCounts::STANDARD)?,
        &TrainConfig::default(),
    )?;
    let bundle_path = dir.path().join("model.crb");
    save_bundle(&bundle, &bundle_path)?;

    let cfg = GatewayConfig {
        bundle: bundle_path,
        queue: dir.path().join("queue.jsonl"),
        data_root: Some(corpus),
        ..GatewayConfig::default()
    };
    let state = AppState::from_config(&cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?.to_string();
    rt.spawn(async move { axum::serve(listener, app(state, cfg.max_body_bytes)).await });

    println!("health: {}", request(&addr, "GET", "/v1/health", "")?);
    for rec in manifest.records().step_by(18) {
        let body = serde_json::json!({
            "query_id": rec.query_id,
            "trace": {"path": rec.trace},
            "ref_embedding": {"path": rec.reference},
        });
        let resp: serde_json::Value =
            serde_json::from_str(&request(&addr, "POST", "/v1/route", &body.to_string())?)?;
        println!(
            "{} -> {} via {}",
            rec.query_id, resp["decision"]["action"], resp["target"]["target"]
        );
    }
    println!(
        "pending: {}",
        request(&addr, "GET", "/v1/review/pending", "")?
    );
    println!("metrics: {}", request(&addr, "GET", "/v1/metrics", "")?);
    Ok(())
}
