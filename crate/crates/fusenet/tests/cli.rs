use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusenet::cli::model_path;
use fusenet::crossval::{FOLDS_CSV, SUMMARY_CSV};
use fusenet_core::fusion::FusionScheme;

const CONFIG: &str = "\
# tiny end-to-end run
cohort = cohort
out = results
modalities = PET, CT, T2
folds = 5
n_per_class = 60
epochs = 1
conv1_filters = 3
conv2_filters = 4
dense_width = 8
batch_size = 32
save_models = true
seed = 4
phantom.subjects = 10
phantom.height = 40
phantom.width = 40
phantom.semi_axes = 4, 5
";

fn fusenet(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fusenet"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("FUSENET_THREADS", t),
        None => cmd.env_remove("FUSENET_THREADS"),
    };
    cmd.output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", text(&out.stdout), text(&out.stderr));
    text(&out.stdout)
}

/// Writes the config (with `out` replaced) and a generated cohort into `dir`.
fn setup(dir: &Path, out: &str) -> PathBuf {
    let conf = dir.join(format!("{out}.conf"));
    std::fs::write(&conf, CONFIG.replace("out = results", &format!("out = {out}"))).unwrap();
    if !dir.join("cohort").exists() {
        ok(&fusenet(&["phantom", "--config", conf.to_str().unwrap(), "--out", dir.join("cohort").to_str().unwrap()], None));
    }
    conf
}

#[test]
fn crossval_writes_one_summary_row_per_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let conf = setup(dir.path(), "results");
    let stdout = ok(&fusenet(&["crossval", "--config", conf.to_str().unwrap()], Some("2")));
    assert!(stdout.contains("type2[PET+CT+T2]"), "{stdout}");
    let res = dir.path().join("results");
    let summary = std::fs::read_to_string(res.join(SUMMARY_CSV)).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "scheme,modalities,subjects,median,q1,q3,min,max");
    // three fusion kinds on one combination plus three single modalities
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("type1,PET+CT+T2,10,"));
    assert!(lines[6].starts_with("single,T2,10,"));
    let folds = std::fs::read_to_string(res.join(FOLDS_CSV)).unwrap();
    assert_eq!(folds.lines().next().unwrap(), "scheme,modalities,fold,subject,accuracy");
    assert_eq!(folds.lines().count(), 1 + 6 * 10);
    for row in folds.lines().skip(1) {
        let acc: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let log = std::fs::read_to_string(res.join("crossval.log")).unwrap();
    assert!(log.contains("start") && log.contains("elapsed"));
}

#[test]
fn crossval_is_bitwise_repeatable_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = setup(dir.path(), "a");
    let b = setup(dir.path(), "b");
    ok(&fusenet(&["crossval", "--config", a.to_str().unwrap()], Some("1")));
    ok(&fusenet(&["crossval", "--config", b.to_str().unwrap()], Some("3")));
    for f in [FOLDS_CSV, SUMMARY_CSV] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn predict_then_evaluate_reproduces_crossval_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let conf = setup(dir.path(), "results");
    ok(&fusenet(&["crossval", "--config", conf.to_str().unwrap()], None));
    let res = dir.path().join("results");
    let folds = std::fs::read_to_string(res.join(FOLDS_CSV)).unwrap();
    for scheme in ["type2:PET,CT,T2", "type3:PET,CT,T2", "single:CT"] {
        let s: FusionScheme = scheme.parse().unwrap();
        let rows: Vec<Vec<&str>> = folds
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|r| r[0] == s.kind().name() && r[1] == s.modality_label() && r[2] == "1")
            .collect();
        assert_eq!(rows.len(), 2);
        let maps = dir.path().join(format!("maps-{}", s.kind().name()));
        let model = model_path(&res, 1, &s);
        for r in &rows {
            let subject = dir.path().join("cohort").join(r[3]);
            ok(&fusenet(
                &[
                    "predict",
                    "--model",
                    model.to_str().unwrap(),
                    "--subject",
                    subject.to_str().unwrap(),
                    "--out",
                    maps.to_str().unwrap(),
                ],
                None,
            ));
        }
        let out = ok(&fusenet(
            &["evaluate", "--maps", maps.to_str().unwrap(), "--cohort", dir.path().join("cohort").to_str().unwrap()],
            None,
        ));
        for r in &rows {
            assert!(out.contains(&format!("{} {}\n", r[3], r[4])), "{scheme}: {out} vs {r:?}");
        }
    }
}

#[test]
fn train_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let conf = setup(dir.path(), "results");
    let model = dir.path().join("t1.model");
    let out = ok(&fusenet(
        &["train", "--config", conf.to_str().unwrap(), "--scheme", "type1:PET,T2", "--out", model.to_str().unwrap()],
        None,
    ));
    assert!(out.contains("epoch 1 loss"), "{out}");
    let net = fusenet::model::load_model(&model).unwrap();
    assert_eq!(net.scheme.to_string(), "type1[PET+T2]");
    assert_eq!(net.config.epochs, 1);
}

#[test]
fn gradcheck_passes_on_default_seed() {
    let out = ok(&fusenet(&["gradcheck"], None));
    let mut rows = 0;
    for line in out.lines().skip(1) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() == 7 {
            let err: f64 = cols[6].parse().unwrap();
            assert!(err < 1e-6, "{line}");
            rows += 1;
        }
    }
    assert!(rows >= 8);
    assert!(out.trim_end().ends_with("pass"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fusenet(&["crossval", "--bogus"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"));
    assert_eq!(fusenet(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(fusenet(&["--help"], None).status.code(), Some(0));

    let missing = dir.path().join("none.conf");
    assert_eq!(fusenet(&["crossval", "--config", missing.to_str().unwrap()], None).status.code(), Some(2));

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "modalities = PET\nschemes = type2\n").unwrap();
    let out = fusenet(&["crossval", "--config", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("combinations"), "{}", text(&out.stderr));

    let conf = setup(dir.path(), "results");
    let out = fusenet(&["crossval", "--config", conf.to_str().unwrap()], Some("zero"));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("FUSENET_THREADS"));

    let img = dir.path().join("cohort").join("P000").join("CT.mmimg");
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..100]).unwrap();
    let out = fusenet(&["crossval", "--config", conf.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("byte 100"), "{}", text(&out.stderr));

    let out = fusenet(
        &["train", "--config", conf.to_str().unwrap(), "--scheme", "type9:PET", "--out", "x"],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
}
