//! Full training run with a per-epoch loss table and a saved bundle.

use confroute::ingest::{load_bundle, synth_pool};
use confroute::prelude::*;
use confroute::training::TrainingSet;

fn main() -> anyhow::Result<()> {
    let examples = synth_pool(&CorpusSpec::default())?;
    let set = TrainingSet::from_examples(examples);
    let cfg = TrainConfig::default();
    let (bundle, history) = train(&set, &cfg)?;

    println!("epoch  total   align   conf    lr");
    for r in &history.epochs {
        println!(
            "{:>5}  {:.4}  {:.4}  {:.4}  {:.1e}",
            r.epoch, r.total, r.align, r.conf, r.lr
        );
    }
    println!("weights {:?}", bundle.weights);
    println!("thresholds {:?}", bundle.thresholds);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.crb");
    save_bundle(&bundle, &path)?;
    assert_eq!(load_bundle(&path)?, bundle);
    println!("saved {} ({})", path.display(), bundle.bundle_version);
    Ok(())
}
