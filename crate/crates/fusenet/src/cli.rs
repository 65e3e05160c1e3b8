//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use fusenet_core::data::{balanced_sample, make_folds, normalize_subject};
use fusenet_core::eval::{
    fold_statistics, member_heatmaps, pixel_accuracy, predict_heatmap, predict_labelmap, CrossvalOptions,
};
use fusenet_core::fusion::{train_with, FusionScheme, SchemeKind};
use fusenet_core::phantom::generate_cohort;
use fusenet_core::rng::derive_seed;
use fusenet_core::{gradsuite, Error as CoreError};

use crate::cohort::{read_cohort, read_subject, write_cohort};
use crate::config::RunConfig;
use crate::crossval::{run_parallel, thread_count, write_reports, FOLDS_CSV, SUMMARY_CSV};
use crate::error::{Error, Result};
use crate::model::{load_model, save_model};
use crate::mmimg::write_image;
use crate::pgm::{read_labelmap, write_heatmap, write_labelmap};

pub const LABELS_SUFFIX: &str = ".labels.pgm";
pub const LOG_FILE: &str = "crossval.log";

#[derive(Parser, Debug)]
#[command(name = "fusenet", version, about = "Multi-modal patch CNN fusion for tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one scheme on balanced patches from the whole cohort.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// e.g. `type2:PET,CT,T2` or `single:T2`
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subject-level cross-validation of every configured scheme.
    Crossval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write heatmaps and a labelmap for one subject.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Score labelmaps against the cohort's masks.
    Evaluate {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Compare backprop with finite differences on toy networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        instances: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) {
    let _ = out.write_fmt(text);
    let _ = out.write_all(b"\n");
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Phantom { config, out: dir } => phantom(&config, &dir, out),
        Command::Train { config, scheme, out: path } => train(&config, &scheme, &path, out),
        Command::Crossval { config } => crossval(&config, out),
        Command::Predict {
            model,
            subject,
            out: dir,
            tau,
        } => predict(&model, &subject, &dir, tau, out),
        Command::Evaluate { maps, cohort } => evaluate(&maps, &cohort, out),
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances, out),
    }
}

fn phantom(config: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let cohort = generate_cohort(&cfg.phantom)?;
    write_cohort(dir, &cohort)?;
    say(
        out,
        format_args!(
            "wrote {} subjects ({}x{}, modalities {}) to {}",
            cohort.len(),
            cfg.phantom.height,
            cfg.phantom.width,
            cfg.phantom.modalities().join(","),
            dir.display()
        ),
    );
    Ok(0)
}

fn train(config: &Path, scheme: &str, path: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let scheme: FusionScheme = scheme.parse().map_err(|e: CoreError| Error::config("scheme", e.to_string()))?;
    let cohort: Vec<_> = read_cohort(cfg.cohort_dir()?)?.iter().map(normalize_subject).collect();
    let refs: Vec<_> = cohort.iter().collect();
    let samples = balanced_sample(
        &refs,
        scheme.modalities(),
        cfg.n_per_class,
        derive_seed(cfg.seed, "train/sample"),
    )?;
    let net = train_with(&scheme, &samples, &cfg.base, |log, _| {
        say(
            out,
            format_args!("epoch {} loss {:.6} accuracy {:.4}", log.epoch + 1, log.loss, log.accuracy),
        );
        std::ops::ControlFlow::Continue(())
    })?;
    save_model(path, &net)?;
    say(out, format_args!("saved {} ({} parameters) to {}", scheme, net.param_count(), path.display()));
    Ok(0)
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn model_file_name(scheme: &FusionScheme) -> String {
    format!("{}-{}.model", scheme.kind().name(), scheme.modalities().join("+"))
}

/// Where `crossval` with `save_models` puts the network of `scheme` for `fold`.
pub fn model_path(out_dir: &Path, fold: usize, scheme: &FusionScheme) -> PathBuf {
    out_dir.join("models").join(format!("fold{fold}")).join(model_file_name(scheme))
}

fn crossval(config: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let cohort = read_cohort(cfg.cohort_dir()?)?;
    let ids: Vec<String> = cohort.iter().map(|v| v.subject_id().to_string()).collect();
    let plan = make_folds(&ids, cfg.folds, cfg.seed)?;
    let opts = CrossvalOptions {
        schemes: cfg.schemes()?,
        config: cfg.base.clone(),
        n_per_class: cfg.n_per_class,
        tau: cfg.tau,
    };
    let threads = thread_count()?;
    let started = Instant::now();
    let mut log = format!("start {:.3}\nthreads {threads}\n", unix_seconds());
    let fold_log = std::sync::Mutex::new(Vec::new());
    let report = run_parallel(&cohort, &opts, &plan, threads, |f| {
        fold_log
            .lock()
            .expect("log lock")
            .push(format!("fold {} done {:.3}s", f.fold, started.elapsed().as_secs_f64()));
    })?;
    for line in fold_log.into_inner().expect("log lock") {
        log.push_str(&line);
        log.push('\n');
    }
    for f in &report.folds {
        if !f.audit.is_clean() {
            return Err(Error::config("folds", format!("fold {} leaks test subjects into training", f.fold)));
        }
        if cfg.save_models {
            for net in &f.networks {
                save_model(&model_path(&cfg.out, f.fold, &net.scheme), net)?;
            }
        }
    }
    write_reports(&cfg.out, &report)?;
    log.push_str(&format!("end {:.3}\nelapsed {:.3}s\n", unix_seconds(), started.elapsed().as_secs_f64()));
    crate::error::write(&cfg.out.join(LOG_FILE), log.as_bytes())?;
    say(out, format_args!("{:<24} {:>8} {:>8} {:>8}", "scheme", "median", "q1", "q3"));
    for (s, m) in &report.summary {
        say(out, format_args!("{:<24} {:>8.4} {:>8.4} {:>8.4}", s.to_string(), m.median, m.q1, m.q3));
    }
    say(
        out,
        format_args!("wrote {} and {} to {}", FOLDS_CSV, SUMMARY_CSV, cfg.out.display()),
    );
    Ok(0)
}

fn predict(model: &Path, subject: &Path, dir: &Path, tau: f64, out: &mut dyn Write) -> Result<i32> {
    let net = load_model(model)?;
    let volume = normalize_subject(&read_subject(subject)?);
    let id = volume.subject_id().to_string();
    if net.scheme.kind() == SchemeKind::Type3 {
        for (m, h) in net.scheme.modalities().iter().zip(member_heatmaps(&net, &volume)?) {
            write_image(&dir.join(format!("{id}.{m}.heat.mmimg")), &h.values)?;
            write_heatmap(&dir.join(format!("{id}.{m}.heat.pgm")), &h)?;
        }
    } else {
        let h = predict_heatmap(&net, &volume)?;
        write_image(&dir.join(format!("{id}.heat.mmimg")), &h.values)?;
        write_heatmap(&dir.join(format!("{id}.heat.pgm")), &h)?;
    }
    let labels = predict_labelmap(&net, &volume, tau)?;
    write_labelmap(&dir.join(format!("{id}{LABELS_SUFFIX}")), &labels)?;
    say(
        out,
        format_args!("{id}: {} positive pixels of {}", labels.positives(), labels.values.data().len()),
    );
    Ok(0)
}

fn evaluate(maps: &Path, cohort_dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cohort = read_cohort(cohort_dir)?;
    let mut files = Vec::new();
    for entry in std::fs::read_dir(maps).map_err(|e| Error::io(maps, e))? {
        let path = entry.map_err(|e| Error::io(maps, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(id) = name.strip_suffix(LABELS_SUFFIX) {
            files.push((id.to_string(), path.clone()));
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::config("maps", format!("no *{LABELS_SUFFIX} files in {}", maps.display())));
    }
    let mut accs = Vec::new();
    for (id, path) in files {
        let v = cohort
            .iter()
            .find(|v| v.subject_id() == id)
            .ok_or_else(|| Error::config("cohort", format!("no subject {id} for {}", path.display())))?;
        let labels = read_labelmap(&path, &id)?;
        let acc = pixel_accuracy(&labels.values, v.mask())?;
        say(out, format_args!("{id} {acc}"));
        accs.push(acc);
    }
    let stats = fold_statistics(&accs)?;
    say(
        out,
        format_args!("median {} q1 {} q3 {} over {} subjects", stats.median, stats.q1, stats.q3, accs.len()),
    );
    Ok(0)
}

fn gradcheck(seed: u64, instances: usize, out: &mut dyn Write) -> Result<i32> {
    if instances == 0 {
        return Err(Error::config("instances", "must be positive"));
    }
    let cases = gradsuite::run(seed, instances)?;
    say(out, format_args!("{:<8} {:>4} {:>6} {:<8} {:>8} {:>6} {:>12}", "case", "inst", "layer", "kind", "checked", "kinks", "max_rel_err"));
    let mut worst: f64 = 0.0;
    for c in &cases {
        for l in &c.report.layers {
            say(
                out,
                format_args!(
                    "{:<8} {:>4} {:>6} {:<8} {:>8} {:>6} {:>12.3e}",
                    c.name, c.instance, l.layer, l.kind, l.checked, l.kinks, l.max_rel_error
                ),
            );
            worst = worst.max(l.max_rel_error);
        }
    }
    let passed = gradsuite::passed(&cases);
    let checked: usize = cases.iter().map(|c| c.report.checked()).sum();
    let kinks: usize = cases.iter().map(|c| c.report.kinks()).sum();
    say(
        out,
        format_args!(
            "max relative error {worst:.3e}, tolerance {:e}, kink crossings skipped {kinks}/{checked}: {}",
            gradsuite::TOLERANCE,
            if passed { "pass" } else { "FAIL" }
        ),
    );
    Ok(if passed { 0 } else { 1 })
}
