mod common;

use std::collections::BTreeSet;
use std::path::Path;

use blockpair::dataset::{functions, read_jsonl, unsound_negatives, PairRecord};
use blockpair::pipeline::{run, PipelineError, RunManifest};

use common::{fixture, run_ternary, RUN_FILES, TERNARY_RUN};

fn records(dir: &Path, name: &str) -> Vec<PairRecord> {
    read_jsonl(dir.join(name)).unwrap()
}

#[test]
fn ternary_run_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_ternary(tmp.path());
    assert_eq!(report.run_dirs, [tmp.path().join(TERNARY_RUN)]);
    for f in RUN_FILES {
        let got = std::fs::read(tmp.path().join(TERNARY_RUN).join(f)).unwrap();
        let want = std::fs::read(fixture(&format!("ternary/golden/{f}"))).unwrap();
        assert!(got == want, "{f} differs from golden");
    }
    assert!(tmp.path().join("log.jsonl").is_file());
}

#[test]
fn ternary_lines_are_shared() {
    let tmp = tempfile::tempdir().unwrap();
    run_ternary(tmp.path());
    let recs = records(&tmp.path().join(TERNARY_RUN), "pairs.jsonl");
    let shared: BTreeSet<(String, u32)> = recs
        .iter()
        .filter(|r| r.label == 1)
        .flat_map(|r| {
            r.meta
                .shared_labels
                .clone()
                .unwrap_or_default()
                .iter()
                .map(|s| (s.file().to_string(), s.line()))
                .collect::<Vec<_>>()
        })
        .collect();
    // the ternaries in clamp_len and main
    assert!(shared.contains(&("ternary.c".to_string(), 7)), "{shared:?}");
    assert!(shared.contains(&("ternary.c".to_string(), 24)), "{shared:?}");
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_ternary(a.path());
    let mut m = RunManifest::load(fixture("ternary/manifest.json")).unwrap();
    m.out = b.path().to_path_buf();
    m.jobs = Some(1);
    run(&m).unwrap();
    for f in RUN_FILES.iter().chain(&["train.jsonl", "test.jsonl"]) {
        let read = |d: &Path| std::fs::read(d.join(TERNARY_RUN).join(f)).unwrap();
        assert!(read(a.path()) == read(b.path()), "{f}");
    }
}

#[test]
fn negatives_sound_and_balanced() {
    let tmp = tempfile::tempdir().unwrap();
    run_ternary(tmp.path());
    let recs = records(&tmp.path().join(TERNARY_RUN), "pairs.jsonl");
    assert!(unsound_negatives(&recs).is_empty());
    let pos = recs.iter().filter(|r| r.label == 1).count();
    assert_eq!(recs.len(), 2 * pos);
}

#[test]
fn split_partitions_records() {
    let tmp = tempfile::tempdir().unwrap();
    run_ternary(tmp.path());
    let dir = tmp.path().join(TERNARY_RUN);
    let (all, train, test) = (
        records(&dir, "pairs.jsonl"),
        records(&dir, "train.jsonl"),
        records(&dir, "test.jsonl"),
    );
    assert_eq!(train.len(), 8);
    assert_eq!(train.len() + test.len(), all.len());
    // both files keep pairs.jsonl order
    let mut it = all.iter();
    assert!(train.iter().all(|r| it.any(|a| a == r)));
    let mut it = all.iter();
    assert!(test.iter().all(|r| it.any(|a| a == r)));
}

#[test]
fn split_by_function_keeps_groups_apart() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = RunManifest::load(fixture("ternary/manifest.json")).unwrap();
    m.out = tmp.path().to_path_buf();
    m.split_by_function = true;
    run(&m).unwrap();
    let dir = tmp.path().join(TERNARY_RUN);
    let (train, test) = (records(&dir, "train.jsonl"), records(&dir, "test.jsonl"));
    assert!(functions(&train).is_disjoint(&functions(&test)));
}

#[test]
fn seed_changes_negatives_only() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_ternary(a.path());
    let mut m = RunManifest::load(fixture("ternary/manifest.json")).unwrap();
    m.out = b.path().to_path_buf();
    m.seed = Some(7);
    run(&m).unwrap();
    let pos = |d: &Path| -> Vec<PairRecord> {
        records(&d.join(TERNARY_RUN), "pairs.jsonl")
            .into_iter()
            .filter(|r| r.label == 1)
            .collect()
    };
    assert_eq!(pos(a.path()), pos(b.path()));
}

#[test]
fn manifest_errors_are_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |text: &str| {
        let p = tmp.path().join("m.json");
        std::fs::write(&p, text).unwrap();
        RunManifest::load(&p).and_then(|m| m.validate())
    };
    let base = r#""inputs": [], "seed": 1"#;
    for bad in [
        format!(r#"{{"matrix": [{{"isa": "mips", "compiler": "gcc", "opt_level": "O0"}}], {base}}}"#),
        format!(r#"{{"matrix": [{{"isa": "x86", "compiler": "gcc", "opt_level": "O0"}}], {base}}}"#),
        "{ not json".to_string(),
    ] {
        let err = write(&bad).unwrap_err();
        assert!(matches!(err, PipelineError::Validation(_)), "{bad}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}
