//! Method comparison and single-signal ablation, printed as markdown.

use confroute::evalkit::{
    compare_methods, render_ablation, render_report, run_ablation, AblationConfig, ReportFormat,
};
use confroute::ingest::synth_pool;
use confroute::prelude::*;
use confroute::training::TrainingSet;

fn main() -> anyhow::Result<()> {
    let set = TrainingSet::from_examples(synth_pool(&CorpusSpec::default())?);
    let (bundle, _) = train(&set, &TrainConfig::default())?;

    let test = synth_pool(&CorpusSpec {
        seed: 1,
        ..CorpusSpec::default()
    })?;
    let methods = compare_methods(&bundle, &test)?;
    print!("{}", render_report(&methods, ReportFormat::Markdown));
    println!();
    let rows = run_ablation(&bundle, &test, &AblationConfig::standard())?;
    print!("{}", render_ablation(&rows, ReportFormat::Markdown));
    Ok(())
}
