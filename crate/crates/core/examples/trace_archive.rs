//! Write traces and references to disk, list them in a manifest, read them back.

use confroute::ingest::{
    decode_trace, encode_trace, load_manifest, load_record, read_trace, write_corpus, CorpusSpec,
};
use confroute::training::TierCounts;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let spec = CorpusSpec {
        counts: TierCounts {
            high: 2,
            medium: 2,
            low: 2,
        },
        ..CorpusSpec::default()
    };
    let (manifest_path, _) = write_corpus(dir.path(), &spec)?;
    let manifest = load_manifest(&manifest_path)?;

    for rec in manifest.records() {
        let (trace, reference) = load_record(&manifest, rec)?;
        println!(
            "{:<8} tier {:<6} L={} H={} ref dim {}",
            rec.query_id,
            rec.tier.map_or("-".to_string(), |t| t.to_string()),
            trace.num_layers(),
            trace.hidden_dim(),
            reference.vector().len()
        );
    }

    let rec = manifest.records().next().expect("non-empty manifest");
    let trace = read_trace(&manifest.resolve(rec.trace.as_deref().expect("trace path")))?;
    let bytes = encode_trace(&trace);
    let back = decode_trace(&bytes, trace.query_id())?;
    assert_eq!(encode_trace(&back), bytes);
    println!("{} bytes, bit-exact round trip", bytes.len());

    // a truncated file is an error, not a panic
    let err = decode_trace(&bytes[..bytes.len() - 3], "cut").unwrap_err();
    println!("truncated: {err}");
    Ok(())
}
