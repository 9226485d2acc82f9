//! JSON and CSV outputs: evaluation report, loss logs and latent export.

use std::fs;
use std::path::Path;

use gmvae_core::eval::EvalReport;
use gmvae_core::gmvae::LossBreakdown;
use gmvae_core::latent::{LatentRow, RowKind};

use crate::error::{AppError, AppResult};

fn writer(path: &Path) -> AppResult<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    let file = fs::File::create(path).map_err(AppError::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> AppResult<()> {
    w.flush().map_err(AppError::io(path))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// `epoch` then the loss columns.
pub fn write_losses(path: &Path, losses: &[LossBreakdown]) -> AppResult<()> {
    let mut w = writer(path)?;
    let mut head = vec!["epoch"];
    head.extend(LossBreakdown::COLUMNS);
    w.write_record(&head)?;
    for (e, l) in losses.iter().enumerate() {
        let mut row = vec![(e + 1).to_string()];
        row.extend(l.values().iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// `kind, id, split, pitch, instrument, zt_0.., zp_0..`; prior-mean rows
/// leave the other space's columns empty.
pub fn write_latents(path: &Path, rows: &[LatentRow], dim: usize) -> AppResult<()> {
    let mut w = writer(path)?;
    let mut head: Vec<String> = ["kind", "id", "split", "pitch", "instrument"].map(String::from).to_vec();
    head.extend((0..dim).map(|d| format!("zt_{d}")));
    head.extend((0..dim).map(|d| format!("zp_{d}")));
    w.write_record(&head)?;
    for r in rows {
        let kind = match r.kind {
            RowKind::Example => "example",
            RowKind::PitchMean => "pitch_mean",
            RowKind::TimbreMean => "timbre_mean",
        };
        let split = match r.split {
            Some(gmvae_core::corpus::Split::Train) => "train",
            Some(gmvae_core::corpus::Split::Val) => "val",
            None => "",
        };
        let mut row = vec![kind.to_string(), r.id.to_string(), split.to_string(), r.pitch.to_string(), r.instrument.to_string()];
        for code in [&r.z_t, &r.z_p] {
            match code {
                Some(z) => row.extend(z.iter().map(|&v| num(v))),
                None => row.extend(std::iter::repeat_n(String::new(), dim)),
            }
        }
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// `report.json` plus one CSV per non-empty fragment.
pub fn write_report(dir: &Path, report: &EvalReport) -> AppResult<()> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(AppError::io(&path))?;

    if !report.f_scores.is_empty() {
        let path = dir.join("f_scores.csv");
        let mut w = writer(&path)?;
        w.write_record(["model", "feature", "task", "n_percent", "f1"])?;
        for c in &report.f_scores {
            w.write_record([
                c.model.map_or("cnn", |m| m.name()).to_string(),
                label(&c.feature),
                label(&c.task),
                num(c.n_percent),
                num(c.f1),
            ])?;
        }
        finish(w, &path)?;
    }
    if !report.controllability.is_empty() {
        let path = dir.join("controllability.csv");
        let mut w = writer(&path)?;
        w.write_record(["n_percent", "w", "instrument_f1", "pitch_f1"])?;
        for c in &report.controllability {
            w.write_record([num(c.n_percent), num(c.w), num(c.instrument_f1), num(c.pitch_f1)])?;
        }
        finish(w, &path)?;
    }
    if let Some(first) = report.posterior_shift.first() {
        let path = dir.join("posterior_shift.csv");
        let mut w = writer(&path)?;
        let k = first.mean_posterior.first().map_or(0, Vec::len);
        let mut head: Vec<String> =
            ["source", "target", "alpha", "target_mass", "pitch_f1", "range_compatible"].map(String::from).to_vec();
        head.extend((0..k).map(|c| format!("p_{c}")));
        w.write_record(&head)?;
        for p in &report.posterior_shift {
            for (a, (post, f1)) in p.mean_posterior.iter().zip(&p.pitch_f1).enumerate() {
                let mut row = vec![
                    p.source.to_string(),
                    p.target.to_string(),
                    num(p.alphas[a]),
                    num(post[p.target]),
                    num(*f1),
                    p.range_compatible.to_string(),
                ];
                row.extend(post.iter().map(|&v| num(v)));
                w.write_record(&row)?;
            }
        }
        finish(w, &path)?;
    }
    if let Some(c) = &report.centroid {
        let path = dir.join("centroid.csv");
        let mut w = writer(&path)?;
        w.write_record([
            "instrument", "dim", "n", "mean_minus", "std_minus", "mean_plus", "std_plus", "t", "df", "p_value", "direction",
        ])?;
        for s in &c.stats {
            let t = &s.test;
            w.write_record([
                s.instrument.to_string(),
                c.dim.to_string(),
                s.n.to_string(),
                num(t.mean_a),
                num(t.std_a),
                num(t.mean_b),
                num(t.std_b),
                num(t.t),
                num(t.df),
                num(t.p_value),
                s.direction.to_string(),
            ])?;
        }
        finish(w, &path)?;
        let path = dir.join("centroid_effects.csv");
        let mut w = writer(&path)?;
        w.write_record(["dim", "mean_abs_centroid_shift_hz"])?;
        for (d, e) in c.effects.iter().enumerate() {
            w.write_record([d.to_string(), num(*e)])?;
        }
        finish(w, &path)?;
    }
    Ok(())
}

fn label<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(String::from)).unwrap_or_default()
}

/// Table-1-style text summary of the F-score fragment.
pub fn f_score_table(report: &EvalReport) -> String {
    use gmvae_core::eval::{Feature, Task};
    use gmvae_core::gmvae::ModelMode;
    let mut ns: Vec<f64> = report.f_scores.iter().map(|c| c.n_percent).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    let rows: [(&str, Option<ModelMode>, Feature); 5] = [
        ("gmvae z_t", Some(ModelMode::Gmvae), Feature::Zt),
        ("gmvae z_p", Some(ModelMode::Gmvae), Feature::Zp),
        ("vae z_t", Some(ModelMode::VaeBaseline), Feature::Zt),
        ("vae z_p", Some(ModelMode::VaeBaseline), Feature::Zp),
        ("cnn raw", None, Feature::Raw),
    ];
    let mut out = String::new();
    for task in [Task::Instrument, Task::Pitch] {
        out.push_str(&format!("{:<10}", label(&task)));
        for n in &ns {
            out.push_str(&format!(" {:>7}", format!("N={}", crate::experiment::n_tag(*n))));
        }
        out.push('\n');
        for (name, model, feature) in rows {
            if !report.f_scores.iter().any(|c| c.model == model && c.feature == feature) {
                continue;
            }
            out.push_str(&format!("{name:<10}"));
            for &n in &ns {
                match report.f1(model, feature, task, n) {
                    Some(f) => out.push_str(&format!(" {f:>7.3}")),
                    None => out.push_str(&format!(" {:>7}", "-")),
                }
            }
            out.push('\n');
        }
    }
    out
}
