#![allow(dead_code)]

use std::path::Path;

use gmvae::config::RunConfig;
use gmvae_core::corpus::CorpusConfig;
use gmvae_core::eval::ClassifierTraining;

/// A run small enough for a few seconds of end-to-end work.
pub fn small_run(out_dir: &Path) -> RunConfig {
    let mut run = RunConfig::desk();
    run.corpus = CorpusConfig { instruments: 3, pitches: 4, total_examples: 40, ..CorpusConfig::desk() };
    run.model.conv_channels = 8;
    run.model.hidden_units = 16;
    run.train.epochs = 2;
    run.train.batch_size = 8;
    run.experiment.n_grid = vec![0.0, 100.0];
    run.experiment.w_grid = vec![0.0, 1.0];
    run.experiment.transfer_pair_count = 2;
    run.experiment.repetitions = 2;
    run.experiment.probe = ClassifierTraining { epochs: 5, ..ClassifierTraining::linear() };
    run.experiment.cnn = ClassifierTraining { epochs: 2, ..run.experiment.cnn };
    run.paths.out_dir = out_dir.to_path_buf();
    run.resolve(None).unwrap()
}
