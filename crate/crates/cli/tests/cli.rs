mod common;

use common::*;

fn error_line(o: &std::process::Output) -> String {
    let s = stderr(o);
    let lines: Vec<&str> = s.lines().filter(|l| l.starts_with("seqforge: error: ")).collect();
    assert_eq!(lines.len(), 1, "stderr: {s}");
    lines[0].to_string()
}

#[test]
fn out_of_range_value_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "-data", "x", "-save_model", dir.path().join("m").to_str().unwrap(), "-layers", "0"]);
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("seqforge: error: layers:"));
}

#[test]
fn unknown_flag_and_missing_path() {
    let o = run(&["translate", "-model", "m", "-src", "s", "-beam", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o), "seqforge: error: beam: unknown flag");
    let o = run(&["translate", "-model", "m"]);
    assert_eq!(error_line(&o), "seqforge: error: src: missing required flag");
    let o = run(&["translate", "-model", "/nonexistent/m", "-src", "s"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("seqforge: error: model:"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 0.7, "epochs": 0}}"#).unwrap();
    let data = preprocess(dir.path());
    let prefix = dir.path().join("m");
    let base = [
        "train", "-config", cfg.to_str().unwrap(), "-data", data.to_str().unwrap(), "-save_model", prefix.to_str().unwrap(),
    ];
    let resolved = |o: &std::process::Output| -> serde_json::Value {
        let s = stderr(o);
        let line = s.lines().find_map(|l| l.split_once("resolved config: ")).expect("echo").1.to_string();
        serde_json::from_str(&line).unwrap()
    };
    let o = run(&base);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(resolved(&o)["train"]["learning_rate"], 0.7);
    let mut with_flag = base.to_vec();
    with_flag.extend(["-lr", "0.3"]);
    let o = run(&with_flag);
    assert_eq!(resolved(&o)["train"]["learning_rate"], 0.3);
    assert_eq!(resolved(&o)["model"]["rnn_size"], 500);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    let o = train(dir.path(), &data, "0");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("model_epoch0.ckpt").exists());
    assert!(!dir.path().join("model_epoch1.ckpt").exists());
}

#[test]
fn train_log_resume_and_stable_serving() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    let o = train(dir.path(), &data, "1");
    assert!(o.status.success(), "{}", stderr(&o));
    let log = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].len(), 5);
    assert_eq!(rows[0][0], "1");

    let first = dir.path().join("model_epoch1.ckpt");
    let prefix = dir.path().join("model");
    let mut args = vec![
        "train",
        "-data", data.to_str().unwrap(),
        "-save_model", prefix.to_str().unwrap(),
        "-epochs", "2",
        "-train_from", first.to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = String::from_utf8(o.stdout).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("2\t"));

    let ckpt = dir.path().join("model_epoch2.ckpt");
    let req = r#"{"src": "a￨DET old￨ADJ fox￨NOUN likes￨VERB the￨DET child￨NOUN", "n_best": 2}"#;
    let a = Server::start(&ckpt).connect().ask(req);
    let b = Server::start(&ckpt).connect().ask(req);
    assert_eq!(a, b);
    assert!(a.contains("\"translations\""));
}

#[test]
fn serve_keeps_connection_after_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let data = preprocess(dir.path());
    assert!(train(dir.path(), &data, "0").status.success());
    let server = Server::start(&dir.path().join("model_epoch0.ckpt"));
    let mut conn = server.connect();
    assert!(conn.ask("not json").contains("\"error\""));
    assert!(conn.ask(r#"{"src": "   "}"#).contains("empty source"));
    assert!(conn.ask(r#"{"src": "the￨DET cat"}"#).contains("\"error\""));
    assert!(conn.ask(r#"{"src": "the￨DET cat￨NOUN", "n_best": 1}"#).contains("\"translations\""));
}
