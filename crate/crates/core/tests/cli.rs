use std::path::Path;
use std::process::Command;

use gsens::cli::config::ResolvedColumns;
use gsens::cli::{
    emit_report, execute, load_csv, render_csv, render_json, write_dataset_csv, OutputFormat,
    RawConfig, Report,
};
use gsens::simulation::{calibrate_logistic, generate_logistic, FixedCoefficients};
use gsens::{Dataset, Error};
use proptest::prelude::*;

fn gsens() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gsens"))
}

fn write_logistic_csv(dir: &Path, n: usize) -> std::path::PathBuf {
    let c = calibrate_logistic(-0.5, 0.0, 0.5, 0.6, 0.3, &FixedCoefficients::default()).unwrap();
    let d = generate_logistic(&c, n, 77).unwrap();
    let path = dir.join("study.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["id", "death", "vitd", "filaggrin"])
        .unwrap();
    for (i, r) in d.rows().enumerate() {
        w.write_record([
            i.to_string(),
            r.y.to_string(),
            r.x.to_string(),
            r.z.to_string(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
    path
}

fn sweep_config(data: &Path, out: &Path) -> RawConfig {
    RawConfig::from_toml_str(&format!(
        r#"
command = "sweep"
data_path = "{}"
link = "logit"
output_path = "{}"

[columns]
y = "death"
x = "vitd"
z = "filaggrin"

[grid]
start = -0.15
stop = 0.5
step = 0.05
"#,
        data.display(),
        out.display()
    ))
    .unwrap()
}

#[test]
fn sweep_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_logistic_csv(dir.path(), 1500);
    let out = dir.path().join("sweep.csv");
    let config = sweep_config(&data, &out).validate().unwrap();
    let report = execute(&config, None).unwrap();
    emit_report(&report, OutputFormat::Csv, Some(&out)).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "alpha,psi_hat,ci_lo,ci_hi,or_hat,or_lo,or_hi,status"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 14);
    let alphas: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(alphas[0], "-0.150");
    assert_eq!(alphas[3], "0.000");
    assert_eq!(alphas[13], "0.500");
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        let status = fields[7];
        assert!(["solved", "no_solution", "singular_covariance"].contains(&status));
        for f in &fields[..7] {
            if *f != "NA" {
                let decimals = f.split('.').nth(1).map_or(0, str::len);
                assert_eq!(decimals, 3, "{f}");
            }
        }
        if status == "solved" {
            let psi: f64 = fields[1].parse().unwrap();
            let or: f64 = fields[4].parse().unwrap();
            assert!((or - psi.exp()).abs() < 2e-3 * or.max(1.0));
        }
    }
}

#[test]
fn identity_sweep_has_no_odds_ratio_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_logistic_csv(dir.path(), 400);
    let out = gsens()
        .args(["sweep", "--data"])
        .arg(&data)
        .args([
            "--y",
            "death",
            "--x",
            "vitd",
            "--z",
            "filaggrin",
            "--link",
            "identity",
        ])
        .args(["--grid", "-0.1,0,0.1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "alpha,psi_hat,ci_lo,ci_hi,status"
    );
}

#[test]
fn json_and_csv_agree_and_echo_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_logistic_csv(dir.path(), 1500);
    let config = sweep_config(&data, &dir.path().join("x.json"))
        .validate()
        .unwrap();
    assert_eq!(config.output_format, OutputFormat::Json);
    let report = execute(&config, None).unwrap();
    let json: serde_json::Value = serde_json::from_str(&render_json(&report).unwrap()).unwrap();
    assert_eq!(json["config"]["link"], "logit");
    assert_eq!(json["config"]["grid"]["step"], 0.05);
    assert!(json["version"].is_string());
    let csv_text = render_csv(&report).unwrap();
    let rows = json["result"]["rows"].as_array().unwrap();
    for (line, row) in csv_text.lines().skip(1).zip(rows) {
        let fields: Vec<&str> = line.split(',').collect();
        for (k, key) in [
            "alpha", "psi_hat", "ci_lo", "ci_hi", "or_hat", "or_lo", "or_hi",
        ]
        .iter()
        .enumerate()
        {
            match row[key].as_f64() {
                Some(v) => {
                    let c: f64 = fields[k].parse().unwrap();
                    assert!(
                        (c - (v * 1000.0).round() / 1000.0).abs() < 1e-9,
                        "{key}: {c} vs {v}"
                    );
                }
                None => assert_eq!(fields[k], "NA"),
            }
        }
        assert_eq!(fields[7], row["status"].as_str().unwrap());
    }
}

#[test]
fn simulate_csv_schema_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let status = gsens()
        .args([
            "simulate",
            "--link",
            "identity",
            "--psi",
            "0",
            "--alpha-star",
            "0",
        ])
        .args([
            "--p-z", "0.5", "--p-x", "0.6", "--n", "200", "--m", "20", "--seed", "3", "--output",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "alpha,coverage,mean_ci_length,mean_est,q25,q50,q75,n_solved,n_failed"
    );
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn invalid_link_exits_with_validation_status() {
    let out = gsens()
        .args([
            "calibrate",
            "--link",
            "probit",
            "--psi",
            "0",
            "--alpha-star",
            "0",
            "--p-z",
            "0.5",
            "--p-x",
            "0.6",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`link`"));
}

#[test]
fn data_errors_exit_with_data_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "death,vitd,filaggrin\n").unwrap();
    let out = gsens()
        .args(["relevance", "--x", "vitd", "--z", "filaggrin", "--data"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_with_unknown_key_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "command = \"calibrate\"\nlink = \"identity\"\nsigmaa = 2\n",
    )
    .unwrap();
    let out = gsens()
        .args(["calibrate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmaa"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_logistic_csv(dir.path(), 300);
    let config = sweep_config(&data, &dir.path().join("x.csv"))
        .validate()
        .unwrap();
    let report: Report = execute(&config, None).unwrap();
    let target = dir.path().join("missing").join("dir").join("out.csv");
    let e = emit_report(&report, OutputFormat::Csv, Some(&target)).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
}

#[test]
fn sweep_with_unsolvable_points_still_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_logistic_csv(dir.path(), 600);
    let out = gsens()
        .args([
            "sweep",
            "--link",
            "logit",
            "--y",
            "death",
            "--x",
            "vitd",
            "--z",
            "filaggrin",
        ])
        .args(["--grid", "-30,0"])
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.lines().nth(1).unwrap().ends_with("no_solution"),
        "{text}"
    );
}

fn columns() -> ResolvedColumns {
    ResolvedColumns {
        y: Some("y".into()),
        x: "x".into(),
        z: "z".into(),
        covariates: vec!["age".into()],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_csv_round_trip(rows in prop::collection::vec((any::<f64>(), -1e6f64..1e6, 0u8..2, -1e300f64..1e300), 1..40)) {
        let rows: Vec<_> = rows.into_iter().filter(|r| r.0.is_finite()).collect();
        prop_assume!(!rows.is_empty());
        let d = Dataset::with_covariates(
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2 as f64).collect(),
            vec![rows.iter().map(|r| r.3).collect()],
            vec!["age".into()],
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&d, &path).unwrap();
        prop_assert_eq!(load_csv(&path, &columns()).unwrap(), d);
    }

    #[test]
    fn config_validation_never_panics(
        command in prop::sample::select(vec!["fit", "sweep", "simulate", "calibrate", "relevance", "bogus"]),
        link in prop::option::of(prop::sample::select(vec!["identity", "logit", "log", "probit"])),
        alpha in prop::option::of(-1.0f64..1.0),
        with_data in any::<bool>(),
        with_sim in any::<bool>(),
        n in prop::option::of(0usize..5),
        step in prop::option::of(-0.1f64..0.1),
    ) {
        let mut text = format!("command = \"{command}\"\n");
        if let Some(l) = link { text += &format!("link = \"{l}\"\n"); }
        if let Some(a) = alpha { text += &format!("alpha = {a}\n"); }
        if with_data { text += "data_path = \"d.csv\"\n[columns]\ny = \"y\"\nx = \"x\"\nz = \"z\"\n"; }
        if let Some(s) = step { text += &format!("[grid]\ncenter = 0.0\nhalf_width = 0.2\nstep = {s}\n"); }
        if with_sim {
            text += "[simulation]\npsi = 0.0\nalpha_star = 0.0\np_z = 0.5\np_x = 0.6\n";
            if let Some(n) = n { text += &format!("n = {n}\nm = 3\nmaster_seed = 1\n"); }
        }
        match RawConfig::from_toml_str(&text).and_then(|raw| raw.validate()) {
            Ok(_) => {}
            Err(Error::Config { field, .. }) => prop_assert!(!field.is_empty()),
            Err(other) => prop_assert!(false, "unexpected error {:?}", other),
        }
    }
}
