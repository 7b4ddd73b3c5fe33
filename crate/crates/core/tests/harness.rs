use metalora::harness::{
    emit_outputs, read_csv, run_comparison, summarize, verify_theorems, write_csv, ExperimentConfig, Method,
    OutputFormat, Sweep, SweepAxis, VerifyConfig, CSV_HEADER,
};
use metalora::TrainConfig;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        d: 5,
        k: 1,
        tasks: 2,
        n_retrain: 400,
        n_finetune: 40,
        trials: 2,
        train: TrainConfig {
            max_iters: 3000,
            ..TrainConfig::empirical()
        },
        finetune: TrainConfig {
            max_iters: 3000,
            ..TrainConfig::empirical()
        },
        master_seed: 5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn comparison_rows_are_ordered_and_reproducible() {
    let mut cfg = small();
    cfg.sweep = Some(Sweep {
        axis: SweepAxis::Finetune,
        values: vec![20, 40],
    });
    let rows = run_comparison(&cfg).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.sweep_axis, "N_prime");
        assert_eq!(r.trial, (i / 2) % 2);
        assert_eq!(r.method, if i % 2 == 0 { Method::MetaLoRA } else { Method::SrLoRA });
        assert!(!r.failed() && r.test_loss.is_finite());
    }
    let again = run_comparison(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_csv(&rows, &p1).unwrap();
    write_csv(&again, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let back = read_csv(&p1).unwrap();
    assert_eq!(back.len(), rows.len());
    assert_eq!(back[3].test_loss.to_bits(), rows[3].test_loss.to_bits());
}

#[test]
fn singular_sr_is_flagged_not_fatal() {
    // Two samples per task in d = 5 leave the pooled covariance singular.
    let cfg = ExperimentConfig {
        n_retrain: 4,
        trials: 1,
        ..small()
    };
    let rows = run_comparison(&cfg).unwrap();
    let sr = rows.iter().find(|r| r.method == Method::SrLoRA).unwrap();
    assert!(sr.failed() && sr.test_loss.is_nan());
    assert!(sr.error.as_ref().unwrap().contains("singular"));
    let summary = summarize(&rows);
    let s = summary.iter().find(|s| s.method == Method::SrLoRA).unwrap();
    assert_eq!((s.trials, s.failed), (0, 1));
}

#[test]
fn empty_csv_has_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write_csv(&[], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.trim_end(), CSV_HEADER.join(","));
    assert!(read_csv(&path).unwrap().is_empty());
}

#[test]
fn outputs_include_one_plot_per_axis() {
    let mut rows = Vec::new();
    for axis in [SweepAxis::Dim, SweepAxis::Tasks] {
        let mut cfg = small();
        cfg.trials = 1;
        cfg.sweep = Some(Sweep {
            axis,
            values: vec![2, 3],
        });
        if axis == SweepAxis::Dim {
            cfg.sweep.as_mut().unwrap().values = vec![4, 5];
        }
        rows.extend(run_comparison(&cfg).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let written = emit_outputs(&rows, None, dir.path(), &[OutputFormat::Csv, OutputFormat::Json, OutputFormat::Plot])
        .unwrap();
    let names: Vec<_> = written.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["ablation.csv", "ablation.json", "sweep_d.svg", "sweep_T.svg"]);
    let svg = std::fs::read_to_string(dir.path().join("sweep_d.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn verification_passes_and_negative_control_fails() {
    let cfg = VerifyConfig {
        d_values: vec![6],
        k_values: vec![1],
        t_values: vec![2, 3],
        seeds: 2,
        saddle_probes: 5,
        ..VerifyConfig::default()
    };
    let report = verify_theorems(&cfg).unwrap();
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| &c.name).collect();
    assert!(report.all_passed, "failed checks: {failed:?}");
    assert_eq!(report.checks.len(), 17);

    let bad = verify_theorems(&VerifyConfig {
        corrupt_sr: true,
        ..cfg
    })
    .unwrap();
    assert!(!bad.all_passed);
    let rank = bad.checks.iter().find(|c| c.name == "sr_rank_equals_kT").unwrap();
    assert!(!rank.passed);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"d": 8, "T": 2, "finetune_rank_policy": {"fixed": 2}}"#).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!((cfg.d, cfg.tasks, cfg.rank(), cfg.trials), (8, 2, 2, 10));
    std::fs::write(&path, r#"{"dims": 8}"#).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}
