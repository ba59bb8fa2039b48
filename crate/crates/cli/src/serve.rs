//! Line-delimited JSON translation server.
//!
//! Request: `{"src": "a b", "n_best": 2}`; response:
//! `{"translations": [{"text": ..., "score": ...}, ...]}` or
//! `{"error": ...}`. One thread per connection.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use serde::Deserialize;
use serde_json::{json, Value};

use seqforge::checkpoint::{self, Vocabs};
use seqforge::decoder::{translate_batch, DecodeOptions};
use seqforge::model::Seq2Seq;

use crate::config::{existing, RunConfig};
use crate::ServeArgs;

struct Shared {
    model: Seq2Seq,
    vocabs: Vocabs,
    opts: DecodeOptions,
    separator: char,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    src: String,
    n_best: Option<usize>,
}

fn respond(shared: &Shared, line: &str) -> Value {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return json!({ "error": format!("malformed request: {e}") }),
    };
    if req.src.trim().is_empty() {
        return json!({ "error": "empty source" });
    }
    let mut opts = shared.opts.clone();
    if let Some(n) = req.n_best {
        if n == 0 {
            return json!({ "error": "n_best must be >= 1" });
        }
        opts.n_best = n;
        opts.beam_size = opts.beam_size.max(n);
    }
    match translate_batch(
        &shared.model,
        &[req.src],
        &shared.vocabs.src,
        &shared.vocabs.tgt,
        shared.separator,
        &opts,
    ) {
        Ok(mut out) => json!({ "translations": out.remove(0) }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn handle(shared: &Shared, stream: TcpStream) -> std::io::Result<()> {
    let peer = stream.peer_addr()?;
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = respond(shared, &line);
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    log::debug!("{peer} closed");
    Ok(())
}

pub fn run(a: &ServeArgs, cfg: &RunConfig) -> Result<(), String> {
    let path = existing("model", &a.model).map_err(|e| e.to_string())?;
    let ckpt = checkpoint::checkpoint_load(&path).map_err(|e| format!("model: {e}"))?;
    let (model, vocabs) = ckpt.into_model().map_err(|e| format!("model: {e}"))?;
    let shared = Arc::new(Shared {
        model,
        vocabs,
        opts: cfg.decode.clone(),
        separator: cfg.data.feature_separator,
    });
    let listener = TcpListener::bind((a.host.as_str(), a.port)).map_err(|e| format!("port: {e}"))?;
    let addr = listener.local_addr().map_err(|e| format!("port: {e}"))?;
    println!("listening on {addr}");
    std::io::stdout().flush().map_err(|e| e.to_string())?;
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            if let Err(e) = handle(&shared, stream) {
                log::warn!("connection error: {e}");
            }
        });
    }
    Ok(())
}
