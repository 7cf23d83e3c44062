//! Training reads only the stored observations, never the oracle area.

use std::fs;

use oamp::grids::DatasetManifest;
use oamp::imputer::{train_imputer, ImputerTrainConfig};
use oamp::mask_prior::{train_prior, PriorTrainConfig};
use oamp::nnet::ConvNetSpec;
use oamp::partitioning::PartitionStrategy;
use oamp::synth::{gen_dataset, load_oracle, oracle_reads, SynthConfig, MANIFEST_FILE, ORACLE_DIR};

#[test]
fn training_never_touches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        height: 12,
        width: 12,
        n_samples: 6,
        ..Default::default()
    };
    gen_dataset(&cfg, dir.path()).unwrap();
    // Hide the oracle area entirely; any open would now fail.
    let sealed = dir.path().join("sealed");
    fs::rename(dir.path().join(ORACLE_DIR), &sealed).unwrap();

    let manifest = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    let masks = manifest.load_masks().unwrap();
    let prior = train_prior(
        &masks,
        &PriorTrainConfig {
            steps: 3,
            batch: 2,
            net: ConvNetSpec::mask_prior().with_hidden(4),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(prior.losses.len(), 3);

    let data = manifest.load_all().unwrap();
    let mut icfg = ImputerTrainConfig::new(PartitionStrategy::pixel_level_default());
    icfg.steps = 3;
    icfg.batch = 2;
    icfg.net = ConvNetSpec::imputer().with_hidden(4);
    train_imputer(&data, &icfg).unwrap();
    assert_eq!(oracle_reads(), 0);

    fs::rename(&sealed, dir.path().join(ORACLE_DIR)).unwrap();
    load_oracle(&manifest, 0).unwrap();
    assert_eq!(oracle_reads(), 1);
}
