use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn surveyel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surveyel")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn json_stdout(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn error_record(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("json error record on stderr")
}

/// Writes a synthetic Setting 2 sample and returns its path.
fn generated_sample(dir: &Path) -> String {
    let data = dir.join("sample.csv").display().to_string();
    let cfg = write(
        dir,
        "gen.toml",
        &format!("schema_version = 1\nseed = 7\n[generate]\nsetting = 2\npath = \"{data}\"\n"),
    );
    let r = json_stdout(&surveyel(&["generate", "--config", &cfg]));
    assert_eq!(r["result"]["population_size"], 10_000);
    data
}

fn estimate_config(data: &str, id: &str, extra: &str) -> String {
    format!(
        "schema_version = 1\nseed = 3\n[data]\npath = \"{data}\"\nsetting = 2\npopulation_size = 10000\n\
         [estimator]\nid = \"{id}\"\n{extra}"
    )
}

#[test]
fn estimate_setting2_converges() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_sample(dir.path());
    let cfg = write(dir.path(), "est.toml", &estimate_config(&data, "EL13|13", ""));
    let r = json_stdout(&surveyel(&["estimate", "--config", &cfg]));
    assert_eq!(r["status"], "ok");
    assert_eq!(r["result"]["converged"], true);
    assert_eq!(r["result"]["estimator_id"], "EL13|13");
    assert!(r["result"]["theta_hat"][0].as_f64().unwrap().abs() < 0.3);
    assert_eq!(r["config"]["estimator"]["id"], "EL13|13");
}

#[test]
fn setting3_echoes_external_block() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_sample(dir.path());
    let ext = "[external]\ntau = [0.295]\nsigma1 = [[0.2057]]\nn1 = 33672\n";
    let body = estimate_config(&data, "EL10|10^(33672)", ext).replace("setting = 2", "setting = 3");
    let cfg = write(dir.path(), "s3.toml", &body);
    let r = json_stdout(&surveyel(&["estimate", "--config", &cfg]));
    assert_eq!(r["config"]["external"]["n1"], 33672);
    assert_eq!(r["config"]["external"]["tau"][0], 0.295);
    let d = &r["result"]["diagnostics"];
    assert!(d["tau_hat"][0].as_f64().is_some(), "{d}");

    // without the external table the same identifier is a config error
    let bare = write(dir.path(), "bare.toml", &estimate_config(&data, "EL10|10^(33672)", "").replace("setting = 2", "setting = 3"));
    let o = surveyel(&["estimate", "--config", &bare]);
    assert_eq!(o.status.code(), Some(2));
}

fn without_timestamp(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn same_config_same_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_sample(dir.path());
    let cfg = write(dir.path(), "b.toml", &estimate_config(&data, "EL10|10", ""));
    let run = || json_stdout(&surveyel(&["bootstrap", "--config", &cfg, "--boot", "20", "--workers", "1"]));
    let (a, b) = (run(), run());
    assert_eq!(without_timestamp(a.clone()), without_timestamp(b));
    assert!(a["result"]["se"][0].as_f64().unwrap() > 0.0);
    assert_eq!(a["result"]["bootstrap"]["b_requested"], 20);
}

#[test]
fn csv_output_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_sample(dir.path());
    let cfg = write(dir.path(), "c.toml", &estimate_config(&data, "KH11", ""));
    let out = dir.path().join("out.csv");
    let o = surveyel(&["estimate", "--config", &cfg, "--format", "csv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "estimator,component,theta_hat,se,ci_lower,ci_upper,converged");
    assert!(lines[1].starts_with("KH11,0,"));
}

#[test]
fn simulate_is_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.toml",
        "schema_version = 1\nseed = 11\n[scenario]\nestimators = [\"HT1\", \"KH11\", \"EL10|10@S2\"]\nreplicates = 4\n\
         [scenario.generator]\npopulation_size = 3000\n",
    );
    let a = json_stdout(&surveyel(&["simulate", "--config", &cfg, "--workers", "1"]));
    let b = json_stdout(&surveyel(&["simulate", "--config", &cfg, "--workers", "2"]));
    assert_eq!(a["result"], b["result"]);
    assert_eq!(a["result"]["rows"].as_array().unwrap().len(), 3);
    let csv = surveyel(&["simulate", "--config", &cfg, "--format", "csv"]);
    assert_eq!(String::from_utf8(csv.stdout).unwrap().lines().count(), 4);
}

#[test]
fn validate_reports_low_weight() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", "x,z,w,y,delta,r\n0.1,0.2,2,1.5,1,1\n0.3,0.1,0.5,,1,0\n0.2,,,,0,0\n");
    let cfg = write(
        dir.path(),
        "v.toml",
        &format!("schema_version = 1\n[data]\npath = \"{data}\"\nsetting = 1\n"),
    );
    let r = json_stdout(&surveyel(&["validate", "--config", &cfg]));
    assert_eq!(r["result"]["usable"], false);
    let v = r["result"]["report"]["violations"].to_string();
    assert!(v.contains("weight below 1"), "{v}");
}

#[test]
fn failures_exit_with_category_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unparsable config
    let bad = write(dir.path(), "bad.toml", "schema_version = ");
    let o = surveyel(&["estimate", "--config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["category"], "config");

    // wrong schema version
    let v2 = write(dir.path(), "v2.toml", "schema_version = 2\n");
    assert_eq!(surveyel(&["estimate", "--config", &v2]).status.code(), Some(2));

    // unknown estimator
    let data = write(dir.path(), "d.csv", "x,z,w,y,delta,r\n0.1,0.2,2,1.5,1,1\n");
    let unk = write(dir.path(), "u.toml", &estimate_config(&data, "XX11", ""));
    let o = surveyel(&["estimate", "--config", &unk]);
    assert_eq!(o.status.code(), Some(2));

    // monotone pattern violated: data error
    let broken = write(dir.path(), "broken.csv", "x,z,w,y,delta,r\n0.1,0.2,2,1.5,1,1\n0.3,,,,0,1\n");
    let cfg = write(
        dir.path(),
        "b.toml",
        &format!("schema_version = 1\n[data]\npath = \"{broken}\"\nsetting = 1\n[estimator]\nid = \"HT1\"\n"),
    );
    let o = surveyel(&["estimate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    let rec = error_record(&o);
    assert_eq!((rec["category"].as_str(), rec["exit_code"].as_u64()), (Some("data"), Some(3)));

    // all respondents share the same response: the logistic fit separates
    let sep = write(
        dir.path(),
        "sep.csv",
        "x,z,w,y,delta,r\n0.1,0.2,2,1.5,1,1\n0.5,0.1,3,0.2,1,1\n-0.3,0.4,2.5,,1,0\n-0.8,-0.2,4,,1,0\n",
    );
    let cfg = write(
        dir.path(),
        "s.toml",
        &format!(
            "schema_version = 1\n[data]\npath = \"{sep}\"\nsetting = 2\npopulation_size = 20\n[estimator]\nid = \"HT1\"\n\
             [models]\nresponse = [[\"1\", \"x\"]]\noutcome = [[\"1\", \"x\"]]\ncfun = [\"1\"]\n"
        ),
    );
    let o = surveyel(&["estimate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
