#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const METHODS: [&str; 11] = [
    "cr_plus",
    "cr_times",
    "rso",
    "rs_dpo",
    "mbr_bw",
    "mbr_bmw",
    "qe_best",
    "top_scores",
    "minmax_r",
    "minmax_p",
    "minmax_po",
];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> String {
    fixtures().join(name).to_string_lossy().into_owned()
}

pub fn crpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crpo"))
        .args(args)
        .output()
        .expect("spawn crpo")
}

pub fn crpo_ok(args: &[&str]) {
    let out = crpo(args);
    assert!(
        out.status.success(),
        "crpo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// One golden comparison: the command, then (produced file, golden file)
/// pairs relative to the output directory and `fixtures/golden`.
pub struct GoldenCase {
    pub name: String,
    pub args: Vec<String>,
    pub files: Vec<(String, String)>,
}

fn select_case(name: &str, method: &str, input: &str, extra: &[&str]) -> GoldenCase {
    let mut args = vec![
        "select".to_string(),
        "--method".into(),
        method.into(),
        "--in".into(),
        fixture(input),
        "--out".into(),
        format!("{{out}}/{name}.jsonl"),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    GoldenCase {
        name: name.into(),
        args,
        files: vec![
            (format!("{name}.jsonl"), format!("{name}.jsonl")),
            (
                format!("{name}.jsonl.provenance.json"),
                format!("{name}.provenance.json"),
            ),
        ],
    }
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let mut cases: Vec<GoldenCase> = METHODS
        .iter()
        .map(|m| {
            select_case(
                &format!("pool_{m}"),
                m,
                "pool.jsonl",
                &["--seed", "7", "--top-n", "3"],
            )
        })
        .collect();
    cases.push(select_case("three_cr_plus", "cr_plus", "three.jsonl", &[]));
    cases.push(select_case(
        "three_cr_times",
        "cr_times",
        "three.jsonl",
        &[],
    ));
    cases.push(select_case(
        "small_gaps_rs_dpo",
        "rs_dpo",
        "small_gaps.jsonl",
        &["--eta-out", "0.6"],
    ));
    let extra = fixture("extra.jsonl");
    cases.push(select_case(
        "mixed_cr_plus",
        "cr_plus",
        "pool.jsonl",
        &["--extra", &extra],
    ));
    cases.push(select_case(
        "pool_cr_plus_gated",
        "cr_plus",
        "pool.jsonl",
        &[
            "--gate",
            "log-space",
            "--epsilon",
            "4",
            "--logprob-norm",
            "per-token",
        ],
    ));
    cases.push(GoldenCase {
        name: "utility".into(),
        args: [
            "utility",
            "matrix",
            "--in",
            &fixture("pool.jsonl"),
            "--out",
            "{out}/utility.jsonl",
        ]
        .map(String::from)
        .to_vec(),
        files: vec![("utility.jsonl".into(), "utility.jsonl".into())],
    });
    cases.push(GoldenCase {
        name: "stats".into(),
        args: [
            "stats",
            "--pairs",
            &fixtures()
                .join("golden/pool_cr_plus.jsonl")
                .to_string_lossy(),
            "--candidates",
            &fixture("pool.jsonl"),
            "--bins",
            "5",
            "--out",
            "{out}/stats.json",
            "--csv",
            "{out}/stats.csv",
        ]
        .map(String::from)
        .to_vec(),
        files: vec![
            ("stats.json".into(), "stats_cr_plus.json".into()),
            ("stats.csv".into(), "stats_cr_plus.csv".into()),
        ],
    });
    cases
}

/// Runs a case in `dir` and returns the mismatching golden files. With
/// `CRPO_BLESS=1` the goldens are rewritten instead.
pub fn run_golden(case: &GoldenCase, dir: &Path) -> Vec<String> {
    let args: Vec<String> = case
        .args
        .iter()
        .map(|a| a.replace("{out}", &dir.to_string_lossy()))
        .collect();
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    crpo_ok(&refs);
    let bless = std::env::var_os("CRPO_BLESS").is_some();
    let mut mismatches = Vec::new();
    for (produced, golden) in &case.files {
        let got = std::fs::read(dir.join(produced)).expect("produced file");
        let golden_path = fixtures().join("golden").join(golden);
        if bless {
            std::fs::write(&golden_path, &got).expect("write golden");
            continue;
        }
        let want = std::fs::read(&golden_path).unwrap_or_default();
        if got != want {
            mismatches.push(format!("{}: {} != golden/{}", case.name, produced, golden));
        }
    }
    mismatches
}
