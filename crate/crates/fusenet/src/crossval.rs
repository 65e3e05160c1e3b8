//! Fold-parallel cross-validation and its CSV reports.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fusenet_core::data::{FoldPlan, SubjectVolume};
use fusenet_core::eval::{run_fold, summarize, validate_crossval, CrossvalOptions, CrossvalReport, FoldRun};

use crate::error::{write, Error, Result};

pub const THREADS_VAR: &str = "FUSENET_THREADS";
pub const FOLDS_CSV: &str = "crossval_folds.csv";
pub const SUMMARY_CSV: &str = "crossval_summary.csv";

/// Worker cap from `FUSENET_THREADS`, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(THREADS_VAR, format!("expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs the folds of `plan` on up to `threads` workers. Results do not
/// depend on the worker count.
pub fn run_parallel(
    cohort: &[SubjectVolume],
    opts: &CrossvalOptions,
    plan: &FoldPlan,
    threads: usize,
    on_fold: impl Fn(&FoldRun) + Sync,
) -> Result<CrossvalReport> {
    validate_crossval(cohort, opts, plan)?;
    let folds = plan.folds();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<fusenet_core::Result<FoldRun>>>> = Mutex::new(vec![None; folds.len()]);
    let workers = threads.clamp(1, folds.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(fold) = folds.get(i) else { break };
                let run = run_fold(cohort, fold, opts);
                if let Ok(r) = &run {
                    on_fold(r);
                }
                slots.lock().expect("no worker panicked")[i] = Some(run);
            });
        }
    });
    let runs = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<fusenet_core::Result<Vec<_>>>()?;
    Ok(summarize(&opts.schemes, runs)?)
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

/// Per-subject accuracies: scheme, modalities, fold, subject, accuracy.
pub fn folds_csv(report: &CrossvalReport) -> Vec<u8> {
    let header = ["scheme", "modalities", "fold", "subject", "accuracy"].map(String::from).to_vec();
    let rows = report.folds.iter().flat_map(|f| &f.results).map(|r| {
        vec![
            r.scheme.kind().name().to_string(),
            r.scheme.modality_label(),
            r.fold.to_string(),
            r.subject_id.clone(),
            r.accuracy.to_string(),
        ]
    });
    csv_bytes(std::iter::once(header).chain(rows))
}

/// Per-scheme statistics over every test subject of every fold.
pub fn summary_csv(report: &CrossvalReport) -> Vec<u8> {
    let header = ["scheme", "modalities", "subjects", "median", "q1", "q3", "min", "max"]
        .map(String::from)
        .to_vec();
    let rows = report.summary.iter().map(|(s, m)| {
        vec![
            s.kind().name().to_string(),
            s.modality_label(),
            m.accuracies.len().to_string(),
            m.median.to_string(),
            m.q1.to_string(),
            m.q3.to_string(),
            m.min.to_string(),
            m.max.to_string(),
        ]
    });
    csv_bytes(std::iter::once(header).chain(rows))
}

pub fn write_reports(dir: &Path, report: &CrossvalReport) -> Result<()> {
    write(&dir.join(FOLDS_CSV), &folds_csv(report))?;
    write(&dir.join(SUMMARY_CSV), &summary_csv(report))
}
