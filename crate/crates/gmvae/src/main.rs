use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gmvae::checkpoint::{self, Checkpoint};
use gmvae::config::RunConfig;
use gmvae::experiment::{self, final_checkpoint, model_dir, n_tag, Fragment};
use gmvae::{report, specfile, store, wav, AppError, AppResult};
use gmvae_core::corpus::{build_corpus, Corpus, Split};
use gmvae_core::dsp::Spectrogram;
use gmvae_core::gmvae::ModelMode;
use gmvae_core::latent::{
    centroids, find_centroid_dimension, latent_rows, synthesize, transfer_timbre, traverse_dimension,
    SynthesisRequest, TransferRequest,
};

#[derive(Parser)]
#[command(name = "gmvae", version, about = "Pitch/timbre disentanglement with a Gaussian-mixture VAE")]
struct Cli {
    /// Run configuration (JSON); desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gmvae,
    Vae,
}

impl From<ModeArg> for ModelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Gmvae => ModelMode::Gmvae,
            ModeArg::Vae => ModelMode::VaeBaseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus and store manifest plus spectrograms.
    GenCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the first N notes as 16-bit WAV files.
        #[arg(long, default_value_t = 0)]
        export_audio: usize,
    },
    /// Train one model on a stored corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 100.0)]
        n_labels: f64,
        #[arg(long, value_enum, default_value = "gmvae")]
        mode: ModeArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode codes sampled from one pitch and one instrument component.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pitch: usize,
        #[arg(long)]
        instrument: usize,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move validation notes of one instrument toward another.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        source_class: usize,
        #[arg(long)]
        target_class: usize,
        /// Repeatable; the configured grid when omitted.
        #[arg(long)]
        alpha: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shift one timbre dimension of every validation note.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// A dimension index or `auto` for the centroid-sensitive one.
        #[arg(long, default_value = "auto")]
        dim: String,
        /// Defaults to twice the timbre prior's standard deviation.
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write posterior means of every example and every prior mean as CSV.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained checkpoints and write the report.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Repeatable; every fragment when omitted.
        #[arg(long, value_enum)]
        only: Vec<Fragment>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus, every N-grid model, the baseline and the evaluation in one go.
    MakePaperRun {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn log(msg: &str) {
    eprintln!("[gmvae] {msg}");
}

fn resolve(path: Option<&Path>) -> AppResult<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    let run = base.resolve_env()?;
    eprintln!("{}", run.to_json());
    log(&format!("config hash {} seed {}", run.hash(), run.train.seed));
    Ok(run)
}

fn corpus_dir(run: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| run.paths.out_dir.join("corpus"))
}

fn models_dir(run: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| run.paths.out_dir.join("models"))
}

fn create_dir(dir: &Path) -> AppResult<()> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))
}

fn write_outputs(dir: &Path, header: &[&str], rows: Vec<(String, Spectrogram, Vec<String>)>) -> AppResult<()> {
    create_dir(dir)?;
    let index = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index)?;
    let mut head = vec!["file"];
    head.extend_from_slice(header);
    w.write_record(&head)?;
    for (file, spec, fields) in rows {
        specfile::write(&dir.join(&file), &spec)?;
        let mut rec = vec![file];
        rec.extend(fields);
        w.write_record(&rec)?;
    }
    w.flush().map_err(AppError::io(&index))?;
    Ok(())
}

fn gen_corpus(run: &RunConfig, out: &Path, export_audio: usize) -> AppResult<Corpus> {
    log(&format!("synthesizing {} notes", run.corpus.total_examples));
    let corpus = build_corpus(&run.corpus)?;
    let manifest = store::save_corpus(out, &corpus)?;
    if export_audio > 0 {
        let audio = out.join("audio");
        create_dir(&audio)?;
        for id in 0..export_audio.min(corpus.examples.len()) {
            wav::write(&audio.join(format!("{id:05}.wav")), &corpus.render(id)?)?;
        }
    }
    let (train, val) = manifest.split_counts();
    let text = fs::read(out.join(store::MANIFEST)).map_err(AppError::io(out))?;
    println!(
        "corpus K={} M={} examples={} train={} val={} manifest_sha256={}",
        manifest.instrument_classes,
        manifest.pitch_classes,
        manifest.examples.len(),
        train,
        val,
        store::sha256_hex(&text)
    );
    Ok(corpus)
}

fn load_models(run: &RunConfig, models: &Path) -> AppResult<(Vec<(f64, Checkpoint)>, Option<Checkpoint>)> {
    let mut out = Vec::new();
    for &n in &run.experiment.n_grid {
        out.push((n, checkpoint::load_expecting(&final_checkpoint(models, ModelMode::Gmvae, n), ModelMode::Gmvae)?));
    }
    let top = run.experiment.n_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let baseline = if run.experiment.baseline && top.is_finite() {
        Some(checkpoint::load_expecting(&final_checkpoint(models, ModelMode::VaeBaseline, top), ModelMode::VaeBaseline)?)
    } else {
        None
    };
    Ok((out, baseline))
}

fn eval(run: &RunConfig, corpus: &Corpus, models: &Path, only: &[Fragment], out: &Path) -> AppResult<()> {
    let (ckpts, baseline) = load_models(run, models)?;
    let fragments = if only.is_empty() { Fragment::ALL.to_vec() } else { only.to_vec() };
    let pairs: Vec<(f64, _)> = ckpts.into_iter().map(|(n, c)| (n, c.model)).collect();
    let base = baseline.as_ref().map(|c| (c.n_percent, &c.model));
    let report = experiment::evaluate(run, corpus, &pairs, base, &fragments, log)?;
    report::write_report(out, &report)?;
    if !report.f_scores.is_empty() {
        print!("{}", report::f_score_table(&report));
    }
    for c in &report.controllability {
        println!("controllability N={} w={}: instrument {:.3} pitch {:.3}", n_tag(c.n_percent), c.w, c.instrument_f1, c.pitch_f1);
    }
    for p in &report.posterior_shift {
        let mass: Vec<String> = p.target_mass().iter().map(|m| format!("{m:.3}")).collect();
        println!("transfer {}->{}: target mass [{}] largest step {:?}", p.source, p.target, mass.join(", "), p.largest_step());
    }
    if let Some(c) = &report.centroid {
        println!(
            "centroid dim {}: {}/{} instruments p<0.05, sign consistency {:.2}",
            c.dim,
            c.significant(0.05),
            c.stats.len(),
            c.sign_consistency()
        );
    }
    log(&format!("report written to {}", out.display()));
    Ok(())
}

fn run(cli: Cli) -> AppResult<()> {
    let run = resolve(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { out, export_audio } => {
            gen_corpus(&run, &corpus_dir(&run, out), export_audio)?;
        }
        Command::Train { corpus, n_labels, mode, epochs, out } => {
            let corpus = store::load_corpus(&corpus_dir(&run, corpus))?;
            let mut run = run;
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            let mode = ModelMode::from(mode);
            let dir = out.unwrap_or_else(|| model_dir(&run.paths.out_dir.join("models"), mode, n_labels));
            let trained = experiment::train(&run, &corpus, n_labels, mode, Some(&dir), log)?;
            if let Some(last) = trained.losses.last() {
                println!("final total loss {:.4}", last.total);
            }
            println!("checkpoint {}", dir.join("final.ckpt").display());
        }
        Command::Synth { checkpoint: ck, pitch, instrument, w, repetitions, seed, out } => {
            let ck = checkpoint::load(&ck)?;
            let req = SynthesisRequest {
                pitch,
                instrument,
                w,
                repetitions: repetitions.unwrap_or(run.experiment.repetitions),
                seed: seed.unwrap_or(run.train.seed),
            };
            let specs = synthesize(&ck.model, &req)?;
            let rows = specs
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    (format!("synth_{i:03}.spec1"), s, vec![pitch.to_string(), instrument.to_string(), w.to_string(), i.to_string()])
                })
                .collect();
            write_outputs(&out, &["pitch", "instrument", "w", "repetition"], rows)?;
            println!("wrote {} spectrograms to {}", req.repetitions, out.display());
        }
        Command::Transfer { checkpoint: ck, corpus, source_class, target_class, alpha, out } => {
            let ck = checkpoint::load(&ck)?;
            let corpus = store::load_corpus(&corpus_dir(&run, corpus))?;
            let alphas = if alpha.is_empty() { run.experiment.alpha_grid.clone() } else { alpha };
            let idx = experiment::val_examples_of(&corpus, source_class);
            let req = TransferRequest {
                sources: idx.iter().map(|&i| &corpus.examples[i].spectrogram).collect(),
                source_class,
                target_class,
                alphas: alphas.clone(),
            };
            let moved = transfer_timbre(&ck.model, &req)?;
            let mut rows = Vec::new();
            for (&id, per) in idx.iter().zip(moved) {
                for (a, s) in alphas.iter().zip(per) {
                    rows.push((
                        format!("transfer_{id:05}_a{a}.spec1"),
                        s,
                        vec![id.to_string(), source_class.to_string(), target_class.to_string(), a.to_string()],
                    ));
                }
            }
            let n = rows.len();
            write_outputs(&out, &["source_id", "source_class", "target_class", "alpha"], rows)?;
            println!("wrote {n} spectrograms for {} source notes to {}", idx.len(), out.display());
        }
        Command::Traverse { checkpoint: ck, corpus, dim, delta, out } => {
            let ck = checkpoint::load(&ck)?;
            let corpus = store::load_corpus(&corpus_dir(&run, corpus))?;
            let dim = if dim == "auto" {
                let found = find_centroid_dimension(&ck.model, &corpus)?;
                println!("chosen dimension {} (mean centroid shift {:.1} Hz)", found.dim, found.effects[found.dim]);
                found.dim
            } else {
                dim.parse().map_err(|_| AppError::Request(format!("--dim {dim:?} is neither an index nor auto")))?
            };
            let delta = delta.unwrap_or(2.0 * ck.model.config.timbre_std);
            let idx = corpus.indices(Split::Val);
            let sources: Vec<&Spectrogram> = idx.iter().map(|&i| &corpus.examples[i].spectrogram).collect();
            let specs = traverse_dimension(&ck.model, &sources, dim, delta)?;
            let cents = centroids(&corpus, &specs)?;
            let rows = idx
                .iter()
                .zip(specs)
                .zip(cents)
                .map(|((&id, s), c)| {
                    (
                        format!("traverse_{id:05}.spec1"),
                        s,
                        vec![id.to_string(), corpus.examples[id].instrument.to_string(), dim.to_string(), delta.to_string(), c.to_string()],
                    )
                })
                .collect();
            write_outputs(&out, &["source_id", "instrument", "dim", "delta", "centroid_hz"], rows)?;
            println!("traversed dimension {dim} by {delta} on {} notes", idx.len());
        }
        Command::ExportLatents { checkpoint: ck, corpus, out } => {
            let ck = checkpoint::load(&ck)?;
            let corpus = store::load_corpus(&corpus_dir(&run, corpus))?;
            let rows = latent_rows(&ck.model, &corpus)?;
            report::write_latents(&out, &rows, ck.model.config.latent_dim)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Eval { corpus, models, only, out } => {
            let corpus = store::load_corpus(&corpus_dir(&run, corpus))?;
            let models = models_dir(&run, models);
            let out = out.unwrap_or_else(|| run.paths.out_dir.join("eval"));
            eval(&run, &corpus, &models, &only, &out)?;
        }
        Command::MakePaperRun { out } => {
            let mut run = run;
            if let Some(o) = out {
                run.paths.out_dir = o;
            }
            create_dir(&run.paths.out_dir)?;
            run.save(&run.paths.out_dir.join("config.json"))?;
            let corpus = gen_corpus(&run, &run.paths.out_dir.join("corpus"), 0)?;
            let models = run.paths.out_dir.join("models");
            for &n in &run.experiment.n_grid {
                experiment::train(&run, &corpus, n, ModelMode::Gmvae, Some(&model_dir(&models, ModelMode::Gmvae, n)), log)?;
            }
            if run.experiment.baseline {
                let top = run.experiment.n_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let dir = model_dir(&models, ModelMode::VaeBaseline, top);
                experiment::train(&run, &corpus, top, ModelMode::VaeBaseline, Some(&dir), log)?;
            }
            eval(&run, &corpus, &models, &[], &run.paths.out_dir.join("eval"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
