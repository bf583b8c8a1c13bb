#![allow(dead_code)]

use std::path::PathBuf;

use confroute::ingest::{load_manifest, save_bundle, write_corpus, CorpusSpec, Manifest};
use confroute::training::{build_dataset, train, TierCounts, TrainConfig};
use confroute::ModelBundle;
use tempfile::TempDir;

/// A synthetic corpus on disk and a bundle trained on it.
pub struct Fixture {
    pub dir: TempDir,
    pub manifest: Manifest,
    pub bundle: ModelBundle,
    pub bundle_path: PathBuf,
}

impl Fixture {
    pub fn corpus_dir(&self) -> PathBuf {
        self.manifest.dir.clone()
    }
}

pub fn fixture_with(spec: CorpusSpec, cfg: &TrainConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_corpus(&dir.path().join("corpus"), &spec).unwrap();
    let manifest = load_manifest(&path).unwrap();
    let set = build_dataset(&manifest, TierCounts::STANDARD).unwrap();
    let (bundle, _) = train(&set, cfg).unwrap();
    let bundle_path = dir.path().join("bundle.crb");
    save_bundle(&bundle, &bundle_path).unwrap();
    Fixture {
        dir,
        manifest,
        bundle,
        bundle_path,
    }
}

pub fn fixture() -> Fixture {
    fixture_with(CorpusSpec::default(), &TrainConfig::default())
}
