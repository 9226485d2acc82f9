//! Training and evaluation runs shared by the CLI and the acceptance
//! suite.

use std::fs;
use std::path::{Path, PathBuf};

use gmvae_core::corpus::{Corpus, Split};
use gmvae_core::eval::{
    centroid_ttest, controllability_eval, posterior_shift_eval, probe_cells, train_raw_cnn, transfer_pairs,
    Classifier, ClassifierKind, EvalReport, F1Cell, Feature, Task,
};
use gmvae_core::gmvae::{Gmvae, LossBreakdown, ModelMode};
use gmvae_core::latent::find_centroid_dimension;
use gmvae_core::nn::seeded;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::report;

/// Keeps label masking independent of the training stream.
const MASK_SALT: u64 = 0x6d61_736b;

/// `25` for whole percentages, `12.5` otherwise.
pub fn n_tag(n_percent: f64) -> String {
    if n_percent.fract() == 0.0 {
        format!("{}", n_percent as i64)
    } else {
        format!("{n_percent}")
    }
}

pub fn model_dir(models: &Path, mode: ModelMode, n_percent: f64) -> PathBuf {
    models.join(format!("{}_n{}", mode.name(), n_tag(n_percent)))
}

pub fn final_checkpoint(models: &Path, mode: ModelMode, n_percent: f64) -> PathBuf {
    model_dir(models, mode, n_percent).join("final.ckpt")
}

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// The corpus as the model trained at `n_percent` sees it.
pub fn masked_corpus(corpus: &Corpus, n_percent: f64, seed: u64) -> AppResult<Corpus> {
    Ok(corpus.mask_labels(n_percent, &mut seeded(seed ^ MASK_SALT))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossBreakdown>,
}

/// Trains one model. With `dir`, writes a checkpoint per epoch (keeping the
/// newest `run.paths.keep_checkpoints`), `final.ckpt` and `losses.csv` there.
pub fn train(
    run: &RunConfig,
    corpus: &Corpus,
    n_percent: f64,
    mode: ModelMode,
    dir: Option<&Path>,
    mut log: impl FnMut(&str),
) -> AppResult<Trained> {
    let masked = masked_corpus(corpus, n_percent, run.train.seed)?;
    let mut rng = seeded(run.train.seed);
    let config = gmvae_core::gmvae::ModelConfig { mode, ..run.model.clone() };
    let mut model = Gmvae::<f32>::new(config, run.train.learning_rate, &mut rng)?;
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(AppError::io(d))?;
    }
    let mut save_error = None;
    let fitted = model.fit(&masked, run.train.epochs, run.train.batch_size, &mut rng, |epoch, m, l| {
        log(&format!(
            "{} N={} epoch {}: total {:.3} rec {:.3} kl_p {:.3} kl_t {:.3} kl_cat {:.3} ce {:.3}",
            mode.name(),
            n_tag(n_percent),
            epoch + 1,
            l.total,
            l.reconstruction,
            l.kl_pitch,
            l.expected_kl_timbre,
            l.kl_categorical,
            l.supervised_ce
        ));
        if let Some(d) = dir {
            let ck = Checkpoint { model: m.clone(), n_percent, epochs_completed: epoch + 1 };
            let keep = run.paths.keep_checkpoints;
            let stale = epoch_checkpoint(d, (epoch + 1).wrapping_sub(keep));
            let saved = checkpoint::save(&epoch_checkpoint(d, epoch + 1), &ck).and_then(|()| {
                if keep > 0 && epoch + 1 > keep {
                    fs::remove_file(&stale).map_err(AppError::io(&stale))?;
                }
                Ok(())
            });
            if let Err(e) = saved {
                save_error = Some(e);
                return Err(gmvae_core::Error::Empty("checkpoint write"));
            }
        }
        Ok(())
    });
    if let Some(e) = save_error {
        return Err(e);
    }
    let losses = fitted?;
    let checkpoint = Checkpoint { model, n_percent, epochs_completed: run.train.epochs };
    if let Some(d) = dir {
        checkpoint::save(&d.join("final.ckpt"), &checkpoint)?;
        report::write_losses(&d.join("losses.csv"), &losses)?;
    }
    Ok(Trained { checkpoint, losses })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fragment {
    Disentanglement,
    Controllability,
    Transfer,
    Centroid,
}

impl Fragment {
    pub const ALL: [Fragment; 4] =
        [Fragment::Disentanglement, Fragment::Controllability, Fragment::Transfer, Fragment::Centroid];
}

/// CNNs trained on the fully labeled train split, used to judge generated
/// spectrograms.
pub struct ReferenceCnns {
    pub instrument: Classifier<f32>,
    pub pitch: Classifier<f32>,
    pub instrument_f1: f64,
    pub pitch_f1: f64,
}

pub fn reference_cnns(run: &RunConfig, corpus: &Corpus) -> AppResult<ReferenceCnns> {
    let kind = ClassifierKind::cnn_like(&run.model);
    let (instrument, instrument_f1) = train_raw_cnn(corpus, Task::Instrument, kind, &run.experiment.cnn, |_| true)?;
    let (pitch, pitch_f1) = train_raw_cnn(corpus, Task::Pitch, kind, &run.experiment.cnn, |_| true)?;
    Ok(ReferenceCnns { instrument, pitch, instrument_f1, pitch_f1 })
}

/// Runs the requested fragments. `models` holds one mixture model per N;
/// the transfer and centroid fragments use the one with the largest N.
pub fn evaluate(
    run: &RunConfig,
    corpus: &Corpus,
    models: &[(f64, Gmvae<f32>)],
    baseline: Option<(f64, &Gmvae<f32>)>,
    fragments: &[Fragment],
    mut log: impl FnMut(&str),
) -> AppResult<EvalReport> {
    let mut report = EvalReport::default();
    let exp = &run.experiment;
    let needs_cnn = fragments.iter().any(|f| *f != Fragment::Centroid);
    let cnns = if needs_cnn {
        log("training reference CNNs");
        let c = reference_cnns(run, corpus)?;
        log(&format!("reference CNN val F1: instrument {:.3}, pitch {:.3}", c.instrument_f1, c.pitch_f1));
        Some(c)
    } else {
        None
    };
    let top = models
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| AppError::Request("no models to evaluate".into()))?;

    if fragments.contains(&Fragment::Disentanglement) {
        let cnns = cnns.as_ref().unwrap();
        let kind = ClassifierKind::cnn_like(&run.model);
        for (n, model) in models {
            log(&format!("probing N={}", n_tag(*n)));
            report.f_scores.extend(probe_cells(model, corpus, *n, &exp.probe)?);
            report.f_scores.push(F1Cell { model: None, feature: Feature::Raw, task: Task::Pitch, n_percent: *n, f1: cnns.pitch_f1 });
            let f1 = if *n == 0.0 {
                None
            } else if *n == 100.0 {
                Some(cnns.instrument_f1)
            } else {
                let masked = masked_corpus(corpus, *n, run.train.seed)?;
                let keep: Vec<bool> = masked.examples.iter().map(|e| e.labeled).collect();
                Some(train_raw_cnn(corpus, Task::Instrument, kind, &exp.cnn, |i| keep[i])?.1)
            };
            if let Some(f1) = f1 {
                report.f_scores.push(F1Cell { model: None, feature: Feature::Raw, task: Task::Instrument, n_percent: *n, f1 });
            }
        }
        if let Some((n, vae)) = baseline {
            log(&format!("probing baseline N={}", n_tag(n)));
            report.f_scores.extend(probe_cells(vae, corpus, n, &exp.probe)?);
        }
    }
    if fragments.contains(&Fragment::Controllability) {
        let cnns = cnns.as_ref().unwrap();
        for (n, model) in models {
            log(&format!("controllability N={}", n_tag(*n)));
            report.controllability.extend(controllability_eval(
                model,
                &cnns.instrument,
                &cnns.pitch,
                &exp.w_grid,
                corpus,
                exp.repetitions,
                *n,
                run.train.seed,
            )?);
        }
    }
    if fragments.contains(&Fragment::Transfer) {
        let cnns = cnns.as_ref().unwrap();
        let pairs = exp.transfer_pairs.clone().unwrap_or_else(|| transfer_pairs(corpus, exp.transfer_pair_count));
        log(&format!("timbre transfer on pairs {pairs:?}"));
        report.posterior_shift =
            posterior_shift_eval(&top.1, &cnns.instrument, &cnns.pitch, &pairs, &exp.alpha_grid, corpus)?;
    }
    if fragments.contains(&Fragment::Centroid) {
        log("searching the centroid dimension");
        let found = find_centroid_dimension(&top.1, corpus)?;
        log(&format!("centroid dimension {}", found.dim));
        report.centroid = Some(centroid_ttest(&top.1, corpus, found.dim, found.delta, found.effects)?);
    }
    report.validate()?;
    Ok(report)
}

/// Validation example indices of one instrument.
pub fn val_examples_of(corpus: &Corpus, instrument: usize) -> Vec<usize> {
    corpus.indices(Split::Val).into_iter().filter(|&i| corpus.examples[i].instrument == instrument).collect()
}
