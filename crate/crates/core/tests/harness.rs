use seqpar::attention::EngineKind;
use seqpar::comm::Scheduler;
use seqpar::error::Error;
use seqpar::harness::{
    csv_name, rows_to_csv, run_command, Command, CommandOutput, ExperimentSpec, ReportRow, REPORT_HEADER,
};
use seqpar::model::Task;

fn tiny() -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        engines: vec![EngineKind::Ulysses, EngineKind::RingZigzag],
        sp_values: vec![2],
        samples: 3,
        parity_lengths: vec![16],
        comm_lengths: vec![32],
        balance_lengths: vec![8, 16],
        ..ExperimentSpec::default()
    };
    spec.trainer.epochs = 1;
    spec.trainer.grad_accumulation = 3;
    spec
}

#[test]
fn spec_json_fills_defaults_and_rejects_unknown_fields() {
    let spec = ExperimentSpec::from_json(r#"{"sp_values": [4], "trainer": {"task": "dpo"}}"#).unwrap();
    assert_eq!(spec.sp_values, vec![4]);
    assert_eq!(spec.trainer.task, Task::Dpo);
    assert_eq!(spec.model, ExperimentSpec::default().model);
    assert!(!spec.engines.contains(&EngineKind::Oracle));

    assert!(matches!(ExperimentSpec::from_json(r#"{"engine": "ulysses"}"#), Err(Error::Config(_))));
    assert!(matches!(ExperimentSpec::from_json(r#"{"sp_values": []}"#), Err(Error::Config(_))));
    assert!(matches!(ExperimentSpec::from_json(r#"{"engines": ["warp"]}"#), Err(Error::Config(_))));
}

#[test]
fn spec_round_trips_through_json() {
    let spec = tiny().with_seed(5);
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(ExperimentSpec::from_json(&text).unwrap(), spec);
    assert_eq!((spec.model.seed, spec.trainer.seed), (5, 5));
}

#[test]
fn command_names_parse() {
    for c in Command::ALL {
        assert_eq!(c.as_str().parse::<Command>().unwrap(), c);
    }
    assert!("report".parse::<Command>().is_err());
    assert_eq!(csv_name(Command::PitfallDemo, "ulysses", 4), "pitfall-demo_ulysses_sp4.csv");
}

#[test]
fn rows_judge_their_checks() {
    assert!(ReportRow::close("e", 2, "m", 1e-12, 0.0, 1e-10).pass);
    assert!(!ReportRow::close("e", 2, "m", 1e-9, 0.0, 1e-10).pass);
    assert!(!ReportRow::close("e", 2, "m", f64::NAN, 0.0, 1.0).pass);
    assert!(ReportRow::greater("e", 2, "m", 3.0, 2.0).pass);
    assert!(!ReportRow::greater("e", 2, "m", 2.0, 2.0).pass);
    assert!(ReportRow::within("e", 2, "m", 3.0, 2.0, 4.0).pass);
    assert!(!ReportRow::expected_error("e", 2, "m", false).pass);
    let fail = ReportRow::failure("e", 2, "m", &Error::Config("a, b".into()));
    assert!(!fail.pass && !fail.metric.contains(','));

    let csv = rows_to_csv(&[ReportRow::info("e", 1, "m", 0.5)]);
    assert_eq!(csv, format!("{REPORT_HEADER}\ne,1,m,5e-1,,,info,true\n"));
}

#[test]
fn exit_code_follows_rows() {
    let mut out = CommandOutput::default();
    assert_eq!(out.exit_code(), 0);
    out.rows.push(ReportRow::close("e", 2, "m", 1.0, 0.0, 0.0));
    assert_eq!(out.exit_code(), 1);
}

#[test]
fn every_command_passes_on_a_small_spec() {
    for c in Command::ALL {
        let out = run_command(c, &tiny()).unwrap();
        let fails: Vec<_> = out.failures().collect();
        assert!(fails.is_empty(), "{}: {fails:?}", c.as_str());
        assert!(!out.rows.is_empty());
        let report = format!("{}_report.csv", c.as_str());
        assert!(out.files.iter().any(|(n, _)| *n == report), "{} lacks {report}", c.as_str());
        for (name, contents) in &out.files {
            assert!(name.starts_with(c.as_str()), "{name}");
            assert!(!contents.is_empty());
        }
    }
}

#[test]
fn verify_emits_per_engine_reports() {
    let out = run_command(Command::Verify, &tiny()).unwrap();
    for e in ["ulysses", "ring_zigzag"] {
        let name = csv_name(Command::Verify, e, 2);
        let (_, csv) = out.files.iter().find(|(n, _)| *n == name).unwrap();
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.lines().skip(1).all(|l| l.starts_with(&format!("{e},2,"))));
    }
}

#[test]
fn infeasible_head_split_is_an_expected_error() {
    let spec = ExperimentSpec {
        engines: vec![EngineKind::Ulysses],
        sp_values: vec![4],
        ..tiny()
    };
    let out = run_command(Command::Verify, &spec).unwrap();
    assert!(out.all_pass());
    assert!(out
        .rows
        .iter()
        .any(|r| r.metric.starts_with("divisibility error expected_L16_hs6") && r.pass));
}

#[test]
fn training_with_no_feasible_engine_fails() {
    let spec = ExperimentSpec {
        engines: vec![EngineKind::Ulysses],
        sp_values: vec![4],
        ..tiny()
    };
    let out = run_command(Command::Train, &spec).unwrap();
    assert_eq!(out.exit_code(), 1);
}

#[test]
fn outputs_match_across_schedulers() {
    for c in Command::ALL {
        let run = |s| {
            run_command(
                c,
                &ExperimentSpec {
                    scheduler: s,
                    ..tiny()
                },
            )
            .unwrap()
            .files
        };
        assert_eq!(run(Scheduler::Lockstep), run(Scheduler::Threaded), "{}", c.as_str());
    }
}

#[test]
fn seed_changes_training_curves() {
    let a = run_command(Command::Train, &tiny().with_seed(1)).unwrap();
    let b = run_command(Command::Train, &tiny().with_seed(2)).unwrap();
    let curve = |o: &CommandOutput| o.files.iter().find(|(n, _)| n == "train_oracle_sp1.csv").unwrap().1.clone();
    assert_ne!(curve(&a), curve(&b));
}

#[test]
fn write_to_creates_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("nested/out");
    let out = run_command(Command::BalanceReport, &tiny()).unwrap();
    out.write_to(&target).unwrap();
    for (name, contents) in &out.files {
        assert_eq!(&std::fs::read_to_string(target.join(name)).unwrap(), contents);
    }
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert!(matches!(out.write_to(&blocker.join("sub")), Err(Error::Io(_))));
}

#[test]
fn shipped_example_config_is_the_default() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/example-config.json");
    assert_eq!(ExperimentSpec::load(&path).unwrap(), ExperimentSpec::default());
}
