//! Runner-level tests: exit codes, config errors, report schema and CSV
//! formatting.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use moving_frames::cli::{self, Command, Config, Overrides, Settings};

fn binary() -> Process {
    Process::new(env!("CARGO_BIN_EXE_mframes"))
}

fn schema() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn reports_validate_against_the_published_schema() {
    let validator = schema();
    let dir = tempfile::tempdir().unwrap();
    let cases: [(Command, &str); 7] = [
        (Command::Hedgehog, "[grid]\nn = 24\n"),
        (
            Command::Coulomb,
            "[grid]\nresolutions = 12,16\n[control]\nresolutions = 24\n",
        ),
        (Command::CheckIdentities, "[grid]\nresolutions = 12,16\n"),
        (
            Command::WenteConstant,
            "[grid]\nn = 24\n[experiment]\ncount = 2\n",
        ),
        (Command::HarmonicFlow, "[grid]\nn = 16\n"),
        (Command::Noether, "[grid]\nn = 16\n"),
        (
            Command::Norms,
            "[grid]\nn = 16\nshape = annulus(0.3)\n[map]\nfamily = linear_projected\n",
        ),
    ];
    for (cmd, text) in cases {
        let s =
            Settings::resolve(cmd, &Config::parse(text).unwrap(), Overrides::default()).unwrap();
        let out = dir.path().join(cmd.name());
        cli::run(&s, Some(&out)).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        let errors: Vec<String> = validator
            .iter_errors(&report)
            .map(|e| e.to_string())
            .collect();
        assert!(errors.is_empty(), "{}: {errors:?}", cmd.name());
        assert_eq!(report["subcommand"], cmd.name());
    }
}

#[test]
fn schema_rejects_a_check_without_criterion() {
    let validator = schema();
    let s = Settings::resolve(
        Command::Hedgehog,
        &Config::parse("[grid]\nn = 24\n").unwrap(),
        Overrides::default(),
    )
    .unwrap();
    let mut report = serde_json::to_value(cli::run(&s, None).unwrap()).unwrap();
    assert!(validator.is_valid(&report));
    report["checks"][0]
        .as_object_mut()
        .unwrap()
        .remove("criterion");
    assert!(!validator.is_valid(&report));
}

#[test]
fn every_check_names_a_criterion() {
    let s = Settings::resolve(
        Command::CheckIdentities,
        &Config::parse("[grid]\nresolutions = 12,16\n").unwrap(),
        Overrides::default(),
    )
    .unwrap();
    let r = cli::run(&s, None).unwrap();
    assert!(!r.checks.is_empty());
    assert!(r.checks.iter().all(|c| (1..=9).contains(&c.criterion)));
}

#[test]
fn csv_artifacts_have_a_header_and_lf_endings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[grid]\nresolutions = 16,32\n");
    let out = dir.path().join("out");
    let status = binary()
        .args(["check-identities", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let body = std::fs::read_to_string(out.join("identities.csv")).unwrap();
    assert!(!body.contains('\r'));
    assert!(body.ends_with('\n'));
    let mut lines = body.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "name,group,coarse,fine,factor");
    let width = header.split(',').count();
    for line in lines {
        assert_eq!(line.split(',').count(), width, "{line}");
    }
}

#[test]
fn unknown_keys_exit_with_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[grid]\nn = 24\nwidth = 3\n");
    let out = binary()
        .arg("hedgehog")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.width"));
}

#[test]
fn out_of_range_values_exit_with_a_usage_error() {
    let out = binary()
        .args(["hedgehog", "--resolution", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.n"));
    let out = binary().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_status_follows_the_checks() {
    let ok = binary()
        .args(["hedgehog", "--resolution", "48", "--quiet"])
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[grid]\nn = 24\n[check]\ntolerance = 1e-4\n");
    let out = binary()
        .arg("hedgehog")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL [criterion 1]"));
}

#[test]
fn seed_override_reaches_random_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[grid]\nn = 16\n[map]\nfamily = random_band_limited\n",
    );
    let missing = binary()
        .arg("norms")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("map.seed"));
    let run = |seed: &str, out: &Path| {
        let st = binary()
            .args(["norms", "--quiet", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        v["results"].clone()
    };
    let a = run("5", &dir.path().join("a"));
    let b = run("5", &dir.path().join("b"));
    let c = run("6", &dir.path().join("c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let cmd = Command::ALL
            .into_iter()
            .filter(|c| stem.starts_with(c.name()))
            .max_by_key(|c| c.name().len())
            .unwrap_or_else(|| panic!("{stem} names no subcommand"));
        Settings::resolve(cmd, &Config::load(&path).unwrap(), Overrides::default())
            .unwrap_or_else(|e| panic!("{stem}: {e}"));
        seen += 1;
    }
    assert!(seen >= 5);
}
