mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{ok, toremi, tree};
use tempfile::TempDir;

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn stdout(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small labeled corpus in `dir/gen`.
fn small_corpus(dir: &Path) -> PathBuf {
    ok(dir, &["gen-corpus", "--out", "gen", "--samples-per-topic", "20", "--seed", "1"]);
    dir.join("gen/corpus.jsonl")
}

fn resolved(dir: &Path) -> toml::Table {
    fs::read_to_string(dir.join("config.resolved.toml")).unwrap().parse().unwrap()
}

#[test]
fn training_twice_gives_identical_trees() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    let config = default_config();
    let config = config.to_str().unwrap();
    for out in ["a", "b"] {
        ok(
            dir,
            &[
                "train", "--config", config, "--input", "gen/corpus.jsonl", "--out", out, "--strategy", "toremi",
                "--seed", "7", "--total-steps", "1000", "--transition", "500",
            ],
        );
    }
    let (a, b) = (tree(&dir.join("a")), tree(&dir.join("b")));
    assert!(a.iter().any(|(p, _)| p == Path::new("trace.jsonl")));
    assert_eq!(a, b);
}

#[test]
fn flag_precedence_matrix() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.toml"), "[reweighter]\nbeta = 7.0\n[synthetic]\nsamples_per_topic = 3\n").unwrap();
    let mut case = 0;
    for use_file in [false, true] {
        for use_set in [false, true] {
            for use_flag in [false, true] {
                case += 1;
                let out = format!("case{case}");
                // gen-corpus has a typed flag for samples_per_topic; beta is
                // only reachable through the file and --set here
                let mut args: Vec<String> = ["gen-corpus", "--out", &out].map(String::from).to_vec();
                if use_file {
                    args.extend(["--config".into(), "cfg.toml".into()]);
                }
                if use_set {
                    args.extend(["--set".into(), "synthetic.samples_per_topic=4".into()]);
                    args.extend(["--set".into(), "reweighter.beta=8".into()]);
                }
                if use_flag {
                    args.extend(["--samples-per-topic".into(), "5".into()]);
                }
                let argv: Vec<&str> = args.iter().map(String::as_str).collect();
                ok(dir, &argv);
                let cfg = resolved(&dir.join(&out));
                let n = cfg["synthetic"]["samples_per_topic"].as_integer().unwrap();
                let beta = cfg["reweighter"]["beta"].as_float().unwrap();
                let want_n = if use_flag {
                    5
                } else if use_set {
                    4
                } else if use_file {
                    3
                } else {
                    500
                };
                let want_beta = if use_set {
                    8.0
                } else if use_file {
                    7.0
                } else {
                    5.0
                };
                assert_eq!((n, beta), (want_n, want_beta), "file {use_file} set {use_set} flag {use_flag}");
                let lines = fs::read_to_string(dir.join(&out).join("corpus.jsonl")).unwrap().lines().count();
                assert_eq!(lines as i64, 2 * want_n);
            }
        }
    }

    // typed train flags beat --set beats the file
    small_corpus(dir);
    ok(
        dir,
        &[
            "train", "--config", "cfg.toml", "--set", "reweighter.beta=8", "--beta", "9", "--input",
            "gen/corpus.jsonl", "--out", "t", "--total-steps", "100",
        ],
    );
    assert_eq!(resolved(&dir.join("t"))["reweighter"]["beta"].as_float(), Some(9.0));
}

#[test]
fn unlabeled_corpus_is_rejected_by_name() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-corpus", "--out", "gen", "--samples-per-topic", "5", "--unlabeled"]);
    let out = toremi(dir, &["train", "--strategy", "toremi", "--input", "gen/corpus.jsonl", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("A-00000"), "{}", stderr(&out));
    assert!(!dir.join("run").exists());
}

#[test]
fn corrupt_leaves_other_lines_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let input = small_corpus(dir);
    ok(dir, &["corrupt", "--input", "gen/corpus.jsonl", "--topic", "B", "--seed", "3", "--out", "bad"]);
    let before = fs::read_to_string(&input).unwrap();
    let after = fs::read_to_string(dir.join("bad/corpus.jsonl")).unwrap();
    assert_eq!(before.len(), after.len());
    let mut changed = 0;
    for (a, b) in before.lines().zip(after.lines()) {
        if a.contains(r#""labels":["B"]"#) {
            changed += usize::from(a != b);
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(changed > 0);

    let out = toremi(dir, &["corrupt", "--input", "gen/corpus.jsonl", "--topic", "Technology", "--out", "none"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Technology"));
    assert!(!dir.join("none").exists());

    let out = toremi(dir, &["corrupt", "--input", "gen/corpus.jsonl", "--topic", "B", "--out", "gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_to_string(&input).unwrap(), before);
}

#[test]
fn commands_write_only_below_out() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let work = root.join("work");
    fs::create_dir(&work).unwrap();
    let mut expected_dirs: Vec<&str> = Vec::new();
    let mut check = |args: &[&str], out: &'static str| {
        let before = tree(root);
        ok(&work, args);
        expected_dirs.push(out);
        let after = tree(root);
        for (path, bytes) in &after {
            let inside = path.starts_with(Path::new("work").join(out));
            if !inside {
                let old = before.iter().find(|(p, _)| p == path);
                assert_eq!(old.map(|(_, b)| b), Some(bytes), "{args:?} touched {}", path.display());
            }
        }
        assert!(before.iter().all(|(p, _)| after.iter().any(|(q, _)| q == p)));
    };
    check(&["gen-corpus", "--out", "gen", "--samples-per-topic", "15"], "gen");
    check(&["corrupt", "--input", "gen/corpus.jsonl", "--topic", "B", "--out", "bad"], "bad");
    check(&["annotate", "--input", "bad/corpus.jsonl", "--mock-labeler", "--k", "3", "--out", "ann"], "ann");
    check(&["train", "--input", "bad/corpus.jsonl", "--out", "run", "--total-steps", "200", "--transition", "100"], "run");
    check(
        &["train", "--input", "bad/corpus.jsonl", "--out", "std", "--total-steps", "200", "--strategy", "standard"],
        "std",
    );
    check(&["eval", "--run", "run", "--out", "ev"], "ev");
    check(&["compare", "--run", "std=std", "--run", "toremi=run", "--out", "cmp"], "cmp");
    for (path, _) in tree(root) {
        let top = path.strip_prefix("work").unwrap().iter().next().unwrap().to_str().unwrap().to_owned();
        assert!(expected_dirs.contains(&top.as_str()), "unexpected {}", path.display());
    }
}

#[test]
fn inspect_reports_constant_clips_and_transition() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    ok(
        dir,
        &["train", "--input", "gen/corpus.jsonl", "--out", "std", "--strategy", "standard", "--total-steps", "400"],
    );
    let out = stdout(&ok(dir, &["inspect", "--trace", "std/trace.jsonl"]));
    assert!(out.contains("A: constant 1 over 4 interval(s)"), "{out}");
    assert!(out.contains("B: constant 1 over 4 interval(s)"), "{out}");
    assert!(out.contains("stage transition: none"), "{out}");

    // the shuffled topic stays well above average, so a large step size
    // drives it to the cap within stage 1
    ok(dir, &["corrupt", "--input", "gen/corpus.jsonl", "--topic", "B", "--out", "bad"]);
    ok(
        dir,
        &[
            "train", "--input", "bad/corpus.jsonl", "--out", "clip", "--alpha", "100", "--total-steps", "400",
            "--transition", "400",
        ],
    );
    let out = stdout(&ok(dir, &["inspect", "--trace", "clip/trace.jsonl"]));
    let clips: usize = out
        .lines()
        .find_map(|l| l.strip_prefix("beta clips (w = 5): "))
        .and_then(|n| n.parse().ok())
        .unwrap_or_else(|| panic!("{out}"));
    assert!(clips >= 1, "{out}");

    let config = default_config();
    ok(
        dir,
        &[
            "train", "--config", config.to_str().unwrap(), "--input", "gen/corpus.jsonl", "--out", "def",
            "--total-steps", "4100",
        ],
    );
    let out = stdout(&ok(dir, &["inspect", "--trace", "def/trace.jsonl"]));
    assert!(out.contains("stage transition: interval 40"), "{out}");
}

#[test]
fn corrupt_trace_reports_byte_offset() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    ok(dir, &["train", "--input", "gen/corpus.jsonl", "--out", "run", "--total-steps", "200"]);
    let mut bytes = fs::read(dir.join("run/trace.jsonl")).unwrap();
    let first_line = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    bytes.splice(first_line..first_line, b"{\"step\": oops}\n".iter().copied());
    fs::write(dir.join("broken.jsonl"), &bytes).unwrap();
    let out = toremi(dir, &["inspect", "--trace", "broken.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    let offset = format!("byte offset {}", first_line + 9);
    assert!(err.contains(&offset), "{err} (wanted {offset})");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(toremi(dir, &["--help"]).status.code(), Some(0));
    assert_eq!(toremi(dir, &["--version"]).status.code(), Some(0));
    assert_eq!(toremi(dir, &[]).status.code(), Some(1));
    let out = toremi(dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(toremi(dir, &["gen-corpus", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(toremi(dir, &["gen-corpus", "--out", "x", "--set", "reweighter.nope=1"]).status.code(), Some(1));
    assert_eq!(toremi(dir, &["gen-corpus", "--out", "x", "--set", "reweighter.gamma=3"]).status.code(), Some(1));
    assert!(!dir.join("x").exists());

    small_corpus(dir);
    let out = toremi(
        dir,
        &[
            "train", "--input", "gen/corpus.jsonl", "--out", "nan", "--strategy", "standard", "--total-steps", "200",
            "--learning-rate", "1e308",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));

    // no endpoint configured and no mock
    let out = toremi(dir, &["annotate", "--input", "gen/corpus.jsonl", "--out", "ann"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("TOREMI_LABELER_URL"));
}

#[test]
fn annotate_uses_endpoint_from_environment() {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-corpus", "--out", "gen", "--samples-per-topic", "6", "--unlabeled"]);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let server = std::thread::spawn(move || {
        let mut served = 0;
        while served < 2 {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            reader.read_exact(&mut vec![0; length]).unwrap();
            let body = r#"{"text": "[\"Letters\"]"}"#;
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            served += 1;
        }
    });
    let out = std::process::Command::new(common::bin())
        .args(["annotate", "--input", "gen/corpus.jsonl", "--out", "ann", "--k", "2"])
        .current_dir(dir)
        .env("TOREMI_LABELER_URL", &url)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    server.join().unwrap();
    let text = fs::read_to_string(dir.join("ann/corpus.jsonl")).unwrap();
    assert_eq!(text.matches(r#""labels":["Letters"]"#).count(), 12);
}
