#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seqforge"));
    c.env("RUST_LOG", "info");
    c
}

pub fn toy(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy").join(name)
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn preprocess(dir: &Path) -> PathBuf {
    let data = dir.join("toy.data");
    let o = run(&[
        "preprocess",
        "-train_src", toy("train.src").to_str().unwrap(),
        "-train_tgt", toy("train.tgt").to_str().unwrap(),
        "-valid_src", toy("valid.src").to_str().unwrap(),
        "-valid_tgt", toy("valid.tgt").to_str().unwrap(),
        "-save_data", data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "preprocess failed: {}", stderr(&o));
    data
}

/// Small, fast model flags.
pub const SMALL: [&str; 10] = [
    "-layers", "1", "-rnn_size", "16", "-word_vec_size", "8", "-feat_vec_size", "3", "-batch_size", "16",
];

pub fn train(dir: &Path, data: &Path, epochs: &str) -> Output {
    let prefix = dir.join("model");
    let mut args = vec![
        "train",
        "-data", data.to_str().unwrap(),
        "-save_model", prefix.to_str().unwrap(),
        "-epochs", epochs,
    ];
    args.extend(SMALL);
    run(&args)
}

pub struct Server {
    pub child: Child,
    pub addr: String,
}

impl Server {
    pub fn start(model: &Path) -> Server {
        let mut child = bin()
            .args(["serve", "-model", model.to_str().unwrap(), "-port", "0", "-beam_size", "3"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
        Server { child, addr }
    }

    pub fn connect(&self) -> Conn {
        let s = TcpStream::connect(&self.addr).unwrap();
        Conn {
            reader: BufReader::new(s.try_clone().unwrap()),
            writer: s,
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    pub fn ask(&mut self, req: &str) -> String {
        writeln!(self.writer, "{req}").unwrap();
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        line
    }
}

/// Parses an n-best file into groups of (score, text).
pub fn parse_nbest(text: &str) -> Result<Vec<Vec<(f64, String)>>, String> {
    let mut groups = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            if cur.is_empty() {
                return Err(format!("line {}: empty group", i + 1));
            }
            groups.push(std::mem::take(&mut cur));
            continue;
        }
        let (score, body) = line.split_once('\t').ok_or(format!("line {}: no tab", i + 1))?;
        let score: f64 = score.parse().map_err(|e| format!("line {}: {e}", i + 1))?;
        if !score.is_finite() {
            return Err(format!("line {}: non-finite score", i + 1));
        }
        cur.push((score, body.to_string()));
    }
    if !cur.is_empty() {
        return Err("last group not terminated by a blank line".into());
    }
    Ok(groups)
}
