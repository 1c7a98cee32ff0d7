//! Command-line behavior: flags, exit codes, file formats and agreement
//! between the file pipeline and the in-process library calls.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use phenokit_cli::{emit_report_svg, exit_code, run_command, RunConfig, EXIT_INPUT, EXIT_INVARIANT, EXIT_USAGE};
use phenokit_core::dataio::{load_dataset, ANNOTATIONS_FILE};
use phenokit_core::eval::{evaluate, AnnotationMap, EvalReport, QueryResult, DEFAULT_TOP_FRAC};
use phenokit_core::model::{load_checkpoint, PhenoNet};
use phenokit_core::pipeline::embed_sites;
use phenokit_core::profiles::{
    aggregate, correct, default_epsilon, read_profiles, sphering_apply, sphering_fit, write_profiles, Level,
    ProfileRow, ProfileTable, Role,
};
use phenokit_core::Error;
use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phenokit"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["phenokit".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_command(&argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ── flags and exit codes ─────────────────────────────────────────────────

#[test]
fn help_lists_every_flag_of_every_subcommand() {
    let cases: [(&str, &[&str]); 7] = [
        ("synth", &["--spec", "--out", "--seed"]),
        ("train", &["--config", "--data", "--out", "--no-cls", "--no-mse", "--no-con", "--no-diffconv", "--log"]),
        ("embed", &["--ckpt", "--data", "--config", "--out", "--batch-size"]),
        ("correct", &["--in", "--alpha", "--epsilon", "--config", "--out", "--wells-out"]),
        ("evaluate", &["--profiles", "--annotations", "--wells", "--top-frac", "--config", "--out"]),
        ("imad", &["--wells", "--out", "--no-whiten"]),
        ("report", &["--report", "--out"]),
    ];
    for (cmd, flags) in cases {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        let text = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
        // `report` has only required flags.
        if cmd != "report" {
            assert!(text.contains("[default:"), "{cmd} --help shows no defaults:\n{text}");
        }
    }
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin().args(["correct", "--bogus"]).output().unwrap().status.code(), Some(EXIT_USAGE));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(EXIT_USAGE));
    assert_eq!(bin().output().unwrap().status.code(), Some(EXIT_USAGE));
    assert_eq!(run(&["imad", "--wells"]), EXIT_USAGE);
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("out.csv");
    let o = bin().args(["correct", "--in", s(&missing), "--out", s(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_INPUT));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.csv"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"pcs": {"alpha": 0.5, "beta": 1}}"#).unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(&out)]), EXIT_INPUT);
    assert!(!out.exists());
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(exit_code(&Error::Invariant("x".into())), EXIT_INVARIANT);
    assert_eq!(exit_code(&Error::NonFinite { op: "relu".into() }), EXIT_INVARIANT);
    assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_INPUT);
    assert_eq!(exit_code(&Error::NoActiveObjective), EXIT_INPUT);
}

#[test]
fn run_config_is_strict_with_stable_defaults() {
    let d = RunConfig::default();
    assert_eq!(d.pcs.alpha, 0.7);
    assert_eq!(d.sphering.epsilon, None);
    assert_eq!(d.metrics.top_frac, 0.01);
    assert_eq!(d.train.batch_size, 16);
    assert_eq!(d.train.max_epochs, 30);
    assert_eq!(d.train.warmup_epochs, 10);
    assert_eq!((d.model.image_size, d.model.feat_dim, d.model.out_dim), (32, 128, 32));
    d.validate().unwrap();
    let parsed: RunConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(parsed, d);
    let back: RunConfig = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
    assert_eq!(back, d);
    assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"heads": 4}}"#).is_err());
    assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
}

// ── evaluation fixture ───────────────────────────────────────────────────

/// Four treatments related in a cycle; every query ranks one partner first,
/// the unrelated treatment second and the other partner third.
fn cycle_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let vectors = [
        [1.0, 0.0, 0.0, 0.0],
        [0.45, 0.893029, 0.0, 0.0],
        [0.25, -0.013997, 0.968145, 0.0],
        [0.05, 0.31074, 0.404743, 0.858559],
    ];
    let rows = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| ProfileRow {
            plate: String::new(),
            well: String::new(),
            site: String::new(),
            treatment: format!("t{}", i + 1),
            role: Role::Treated,
            vector: v.to_vec(),
        })
        .collect();
    let table = ProfileTable::new(Level::Treatment, 4, rows).unwrap();
    let profiles = dir.join("treatments.csv");
    write_profiles(&table, &profiles).unwrap();
    let mut ann = AnnotationMap::new();
    for (t, labels) in [("t1", ["a", "d"]), ("t2", ["a", "b"]), ("t3", ["b", "c"]), ("t4", ["c", "d"])] {
        for l in labels {
            ann.insert(t, l);
        }
    }
    let ann_path = dir.join("ann.csv");
    ann.write_csv(&ann_path).unwrap();
    (profiles, ann_path)
}

#[test]
fn evaluate_reproduces_the_hand_computed_map() {
    let dir = tempdir().unwrap();
    let (profiles, ann) = cycle_fixture(dir.path());
    let out = dir.path().join("report.json");
    assert_eq!(run(&["evaluate", "--profiles", s(&profiles), "--annotations", s(&ann), "--out", s(&out)]), 0);
    let r = EvalReport::read_json(&out).unwrap();
    assert!((r.map - 5.0 / 6.0).abs() < 1e-12, "{}", r.map);
    assert_eq!(format!("{:.4}", r.map), "0.8333");
    assert_eq!(r.per_query.len(), 4);
    for q in &r.per_query {
        assert!((q.average_precision - 5.0 / 6.0).abs() < 1e-12, "{q:?}");
        assert_eq!(q.first_hit_rank, 1);
    }
    assert_eq!(r.recall(1), Some(1.0));

    // A site-level table is not accepted for evaluation.
    let wrong = dir.path().join("wrong.json");
    assert_eq!(run(&["evaluate", "--profiles", s(&ann), "--annotations", s(&ann), "--out", s(&wrong)]), EXIT_INPUT);
}

// ── SVG report ───────────────────────────────────────────────────────────

fn fixture_report() -> EvalReport {
    let mut recall_at = BTreeMap::new();
    for (k, v) in [(1, 0.5), (3, 0.75), (5, 0.875), (10, 1.0)] {
        recall_at.insert(format!("recall@{k}"), v);
    }
    EvalReport {
        foe: 13.28571,
        map: 0.83333,
        recall_at,
        imad: Some(1.2345),
        per_query: vec![QueryResult {
            query: "t1".into(),
            average_precision: 0.83333,
            odds_ratio: 13.28571,
            first_hit_rank: 1,
        }],
    }
}

fn svg_values(svg: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in svg.lines().filter(|l| l.contains(r#"class="value""#)) {
        let metric = line.split(r#"data-metric=""#).nth(1).unwrap().split('"').next().unwrap();
        let text = line.split('>').nth(1).unwrap().split('<').next().unwrap();
        out.insert(metric.to_string(), text.trim_start_matches("IMAD ").to_string());
    }
    out
}

#[test]
fn svg_matches_the_golden_file() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report.svg");
    let svg = emit_report_svg(&fixture_report());
    if std::env::var_os("PHENOKIT_UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &svg).unwrap();
    }
    assert_eq!(svg, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn svg_values_round_trip_to_three_decimals() {
    let r = fixture_report();
    let svg = emit_report_svg(&r);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let values = svg_values(&svg);
    assert_eq!(values["FoE"], format!("{:.3}", r.foe));
    assert_eq!(values["MAP"], format!("{:.3}", r.map));
    for (k, v) in r.recalls() {
        assert_eq!(values[&format!("recall@{k}")], format!("{v:.3}"));
    }
    assert_eq!(values["IMAD"], "1.234");
    assert_eq!(svg.matches(r#"class="bar""#).count(), 6);

    let bare = EvalReport { recall_at: BTreeMap::new(), imad: None, ..r };
    let svg = emit_report_svg(&bare);
    assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
    assert_eq!(svg_values(&svg).keys().cloned().collect::<Vec<_>>(), ["FoE", "MAP"]);
}

#[test]
fn report_command_writes_the_svg() {
    let dir = tempdir().unwrap();
    let json = dir.path().join("r.json");
    fixture_report().write_json(&json).unwrap();
    let svg = dir.path().join("r.svg");
    assert_eq!(run(&["report", "--report", s(&json), "--out", s(&svg)]), 0);
    assert_eq!(std::fs::read_to_string(&svg).unwrap(), emit_report_svg(&fixture_report()));
}

// ── full pipeline ────────────────────────────────────────────────────────

const SHORT_TRAINING: &str = r#"{
    "train": {"max_epochs": 3, "warmup_epochs": 1, "lr_stages": [[1, 0.02], [3, 0.01]]}
}"#;

fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Outputs {
    ckpt: PathBuf,
    sites: PathBuf,
    treatments: PathBuf,
    wells: PathBuf,
    report: PathBuf,
    imad: PathBuf,
    svg: PathBuf,
}

fn run_pipeline(data: &Path, cfg: &Path, out: &Path) -> Outputs {
    let o = Outputs {
        ckpt: out.join("model.ckpt"),
        sites: out.join("sites.csv"),
        treatments: out.join("treatments.csv"),
        wells: out.join("wells.csv"),
        report: out.join("report.json"),
        imad: out.join("imad.txt"),
        svg: out.join("report.svg"),
    };
    let log = out.join("train_log.jsonl");
    let ann = data.join(ANNOTATIONS_FILE);
    assert_eq!(run(&["train", "--config", s(cfg), "--data", s(data), "--out", s(&o.ckpt), "--log", s(&log)]), 0);
    assert_eq!(run(&["embed", "--ckpt", s(&o.ckpt), "--data", s(data), "--out", s(&o.sites)]), 0);
    let c = ["correct", "--in", s(&o.sites), "--config", s(cfg), "--out", s(&o.treatments), "--wells-out", s(&o.wells)];
    assert_eq!(run(&c), 0);
    let e = [
        "evaluate",
        "--profiles",
        s(&o.treatments),
        "--annotations",
        s(&ann),
        "--wells",
        s(&o.wells),
        "--out",
        s(&o.report),
    ];
    assert_eq!(run(&e), 0);
    assert_eq!(run(&["imad", "--wells", s(&o.wells), "--out", s(&o.imad)]), 0);
    assert_eq!(run(&["report", "--report", s(&o.report), "--out", s(&o.svg)]), 0);
    let logs = read_json_lines(&log);
    assert_eq!(logs.len(), 3);
    o
}

#[test]
fn pipeline_runs_end_to_end_and_matches_in_process_results() {
    let root = tempdir().unwrap();
    let data = root.path().join("data");
    let data2 = root.path().join("data2");
    assert_eq!(run(&["synth", "--out", s(&data)]), 0);
    assert_eq!(run(&["synth", "--out", s(&data2)]), 0);
    assert_eq!(tree_bytes(&data), tree_bytes(&data2), "synth is not reproducible");

    let cfg = root.path().join("cfg.json");
    std::fs::write(&cfg, SHORT_TRAINING).unwrap();
    let run1 = root.path().join("run1");
    let run2 = root.path().join("run2");
    let a = run_pipeline(&data, &cfg, &run1);
    run_pipeline(&data, &cfg, &run2);
    assert_eq!(tree_bytes(&run1), tree_bytes(&run2), "pipeline outputs differ between identical runs");

    let file_report = EvalReport::read_json(&a.report).unwrap();
    let imad_text = std::fs::read_to_string(&a.imad).unwrap();
    assert_eq!(imad_text.trim().parse::<f64>().unwrap(), file_report.imad.unwrap());
    assert!(std::fs::read_to_string(&a.svg).unwrap().contains("data-metric=\"MAP\""));

    // Same checkpoint, library calls only.
    let net: PhenoNet<f32> = load_checkpoint(&a.ckpt).unwrap();
    let loaded = load_dataset(&data, net.config().image_size).unwrap();
    let sites = embed_sites(&net, &loaded).unwrap();
    // The CSV stores nine significant digits.
    let file_sites = read_profiles(&a.sites).unwrap();
    assert_eq!(sites.len(), file_sites.len());
    for (x, y) in sites.rows().iter().zip(file_sites.rows()) {
        assert_eq!((&x.plate, &x.well, &x.site, &x.treatment), (&y.plate, &y.well, &y.site, &y.treatment));
        for (p, q) in x.vector.iter().zip(&y.vector) {
            assert!((p - q).abs() <= 5e-9 * p.abs().max(1e-30), "{p} vs {q}");
        }
    }
    let corrected = correct(&sites, RunConfig::default().pcs.alpha, None).unwrap();
    let ann = AnnotationMap::read_csv(data.join(ANNOTATIONS_FILE)).unwrap();
    let mem = evaluate(&corrected.treatments, &ann, DEFAULT_TOP_FRAC).unwrap();
    assert!((mem.map - file_report.map).abs() <= 1e-9);
    assert!((mem.foe - file_report.foe).abs() <= 1e-9);
    for (k, v) in mem.recalls() {
        assert!((v - file_report.recall(k).unwrap()).abs() <= 1e-9);
    }
    // Treatment vectors agree up to the CSV rounding once both sides start
    // from the same stored site table.
    let from_file = correct(&file_sites, RunConfig::default().pcs.alpha, None).unwrap();
    let file_treatments = read_profiles(&a.treatments).unwrap();
    assert_eq!(from_file.treatments.len(), file_treatments.len());
    for (x, y) in from_file.treatments.rows().iter().zip(file_treatments.rows()) {
        assert_eq!(x.treatment, y.treatment);
        for (p, q) in x.vector.iter().zip(&y.vector) {
            assert!((p - q).abs() <= 5e-9 * p.abs().max(1e-30), "{p} vs {q}");
        }
    }

    // `--alpha 0` equals aggregation and sphering with no control-mean subtraction.
    let zero = root.path().join("alpha0.csv");
    assert_eq!(run(&["correct", "--in", s(&a.sites), "--alpha", "0", "--out", s(&zero)]), 0);
    let wells = aggregate(&file_sites, Level::Well).unwrap();
    let reference: Vec<&[f64]> =
        wells.rows().iter().filter(|r| r.role == Role::Control).map(|r| r.vector.as_slice()).collect();
    let w = sphering_fit(&reference, default_epsilon(&reference).unwrap()).unwrap();
    let expected = aggregate(&sphering_apply(&wells, &w).unwrap(), Level::Treatment).unwrap();
    let expected_path = root.path().join("expected.csv");
    write_profiles(&expected, &expected_path).unwrap();
    assert_eq!(std::fs::read(&zero).unwrap(), std::fs::read(&expected_path).unwrap());
}

#[test]
fn ablation_flags_reach_the_trainer() {
    let root = tempdir().unwrap();
    let data = root.path().join("data");
    let spec = root.path().join("spec.json");
    std::fs::write(&spec, r#"{"n_moa_groups": 2, "treatments_per_group": 2, "image_size": 16}"#).unwrap();
    assert_eq!(run(&["synth", "--spec", s(&spec), "--out", s(&data)]), 0);
    let cfg = root.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"image_size": 16}, "train": {"max_epochs": 2, "warmup_epochs": 1, "lr_stages": [[2, 0.01]]}}"#,
    )
    .unwrap();
    let ckpt = root.path().join("m.ckpt");
    let log = root.path().join("log.jsonl");
    let args = [
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--log",
        s(&log),
        "--no-mse",
        "--no-diffconv",
    ];
    assert_eq!(run(&args), 0);
    let net: PhenoNet<f32> = load_checkpoint(&ckpt).unwrap();
    assert_eq!((net.config().theta1, net.config().theta2), (0.0, 0.0));
    let logs = read_json_lines(&log);
    assert!(logs.iter().all(|l| l["stage"] == "joint"));

    let all_off =
        ["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--no-mse", "--no-cls", "--no-con"];
    assert_eq!(run(&all_off), EXIT_INPUT);
}

fn read_json_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}
