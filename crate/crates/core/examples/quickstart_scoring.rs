//! Train a small bundle on a synthetic corpus, then score and route a few traces.

use confroute::ingest::{load_record, synth_pool, write_corpus};
use confroute::prelude::*;
use confroute::training::build_dataset;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let (_, manifest) = write_corpus(dir.path(), &CorpusSpec::default())?;
    let set = build_dataset(&manifest, TierCounts::STANDARD)?;
    let (bundle, _) = train(&set, &TrainConfig::default())?;

    println!(
        "{:<10} {:>6} {:>6} {:>7} {:>7}  action",
        "query", "sem", "conv", "learned", "overall"
    );
    for rec in manifest.records().step_by(12) {
        let (trace, reference) = load_record(&manifest, rec)?;
        let b = score(&trace, &reference, &bundle)?;
        let action = route(b.c_overall, &bundle.thresholds)?;
        println!(
            "{:<10} {:>6.3} {:>6.3} {:>7.3} {:>7.3}  {action}",
            rec.query_id, b.c_sem, b.c_conv, b.c_learned, b.c_overall
        );
    }

    // traces that were never on disk score the same way
    let fresh = synth_pool(&CorpusSpec {
        seed: 9,
        counts: TierCounts {
            high: 1,
            medium: 1,
            low: 1,
        },
        ..CorpusSpec::default()
    })?;
    for e in &fresh {
        let d = RoutingDecision::new(
            e.query_id(),
            score(&e.trace, &e.reference, &bundle)?,
            &bundle.thresholds,
        )?;
        println!("{} ({}) -> {}", d.query_id, e.tier, d.action);
    }
    Ok(())
}
