#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub struct Run {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(self) -> Self {
        assert_eq!(self.status, 0, "stderr: {}\nstdout: {}", self.stderr, self.stdout);
        self
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::from_str(self.stdout.trim()).expect("summary line is JSON")
    }

    pub fn error(&self) -> serde_json::Value {
        let line = self.stderr.lines().last().expect("an error line");
        serde_json::from_str(line).expect("error line is JSON")
    }
}

pub fn sidrec(out: &Path, args: &[&str]) -> Run {
    let o: Output = Command::new(env!("CARGO_BIN_EXE_sidrec"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs");
    Run {
        status: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

pub const SMALL_DATA: &[&str] = &["gen-data", "--n-items", "300", "--n-users", "240"];
pub const SMALL_TOKENIZE: &[&str] = &["tokenize", "--k", "16", "--iters", "10", "--top-n", "20"];
pub const SMALL_TRAIN: &[&str] = &["train", "--k", "16", "--layers", "1", "--steps", "12", "--batch-size", "32"];

/// Data, SIDs and a briefly trained model in `dir`.
pub fn trained_fixture(dir: &Path) {
    sidrec(dir, SMALL_DATA).ok();
    sidrec(dir, SMALL_TOKENIZE).ok();
    sidrec(dir, SMALL_TRAIN).ok();
}

/// Relative path → file bytes, recursively.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}
