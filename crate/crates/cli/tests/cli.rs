use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use s2m::data::DialogueSample;
use s2m::metrics::{aggregate, EvalSession};
use s2m::synthetic::{overfit_corpus, TopicTask};
use s2m_cli::RunConfig;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = s2m_cli::run(std::iter::once("s2m").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_lines(path: &Path, samples: &[DialogueSample]) {
    let text: String = samples.iter().map(|s| s.to_line() + "\n").collect();
    fs::write(path, text).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let task = TopicTask {
            topics: 6,
            candidates: 4,
            ..TopicTask::default()
        };
        let test: Vec<DialogueSample> = task.sessions(5, 2).concat();
        write_lines(&root.join("test.txt"), &test);
        let mut train = overfit_corpus(12, 15, 1);
        train.extend(test.iter().cloned());
        write_lines(&root.join("train.txt"), &train);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn model_flags(&self) -> Vec<String> {
        [
            "--vocab", &self.path("vocab.txt"),
            "--checkpoint", &self.path("model.ckpt"),
            "--dim", "6",
            "--stacks", "2",
            "--max-turns", "4",
            "--max-len", "8",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn build_vocab(&self) {
        let (code, _, err) = run(&["build-vocab", "--train", &self.path("train.txt"), "--vocab", &self.path("vocab.txt")]);
        assert_eq!(code, 0, "{err}");
    }

    fn train(&self, extra: &[&str]) {
        self.build_vocab();
        let flags = self.model_flags();
        let train = self.path("train.txt");
        let mut args: Vec<&str> = vec!["train", "--train", &train];
        args.extend(flags.iter().map(String::as_str));
        args.extend(extra);
        let (code, _, err) = run(&args);
        assert_eq!(code, 0, "{err}");
    }

    fn evaluate(&self, extra: &[&str]) -> (i32, String, String) {
        let flags = self.model_flags();
        let test = self.path("test.txt");
        let mut args: Vec<&str> = vec!["evaluate", "--test", &test];
        if !extra.contains(&"--group-size") {
            args.extend(["--group-size", "4"]);
        }
        args.extend(flags.iter().map(String::as_str));
        args.extend(extra);
        run(&args)
    }

    fn rank(&self, context: &str, candidates: &[&str]) -> (i32, String, String) {
        let path = self.path("candidates.txt");
        fs::write(&path, candidates.join("\n")).unwrap();
        let flags = self.model_flags();
        let mut args: Vec<&str> = vec!["rank", "--context", context, "--candidates", &path];
        args.extend(flags.iter().map(String::as_str));
        run(&args)
    }
}

#[test]
fn vocabulary_is_frequency_ordered_and_idempotent() {
    let fx = Fixture::new();
    fx.build_vocab();
    let first = fs::read(fx.path("vocab.txt")).unwrap();
    fx.build_vocab();
    assert_eq!(fs::read(fx.path("vocab.txt")).unwrap(), first);

    // reference: count every token, sort by count descending then token
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in fs::read_to_string(fx.path("train.txt")).unwrap().lines() {
        for field in line.split('\t').skip(1) {
            for tok in field.split_whitespace() {
                *counts.entry(tok.to_owned()).or_default() += 1;
            }
        }
    }
    let mut expect: Vec<(String, usize)> = counts.into_iter().collect();
    expect.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let written: Vec<String> = String::from_utf8(first).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(written, expect.into_iter().map(|(t, _)| t).collect::<Vec<_>>());
    assert!(!written.iter().any(|t| t == "<pad>" || t == "<unk>"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let fx = Fixture::new();
    let (code, _, err) = run(&["build-vocab", "--train", &fx.path("nope.txt"), "--vocab", &fx.path("v.txt")]);
    assert_eq!(code, 2);
    assert!(err.contains("nope.txt"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["train", "--bogus"]).0, 1);
    assert_eq!(run(&["train", "--integration", "i9", "--train", "x"]).0, 1);
    assert_eq!(run(&["train", "--learning-rate", "0"]).0, 1);
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn zero_epochs_write_an_initial_checkpoint() {
    let fx = Fixture::new();
    fx.train(&["--epochs", "0"]);
    let (model, _) = s2m::checkpoint::load::<f32>(Path::new(&fx.path("model.ckpt")), None).unwrap();
    assert_eq!(model.config.stacks, 2);
}

#[test]
fn seeded_training_logs_are_identical() {
    let fx = Fixture::new();
    fx.train(&["--epochs", "2", "--seed", "5", "--batch-size", "4"]);
    let log_a = fs::read(fx.path("model.ckpt.log")).unwrap();
    let ckpt_a = fs::read(fx.path("model.ckpt")).unwrap();
    fx.train(&["--epochs", "2", "--seed", "5", "--batch-size", "4"]);
    assert_eq!(fs::read(fx.path("model.ckpt.log")).unwrap(), log_a);
    assert_eq!(fs::read(fx.path("model.ckpt")).unwrap(), ckpt_a);
    let text = String::from_utf8(log_a).unwrap();
    assert!(text.lines().next().unwrap().starts_with("step=0 lr=5.000000e-4 loss="), "{text}");
}

#[test]
fn evaluation_report_matches_recomputed_metrics() {
    let fx = Fixture::new();
    fx.train(&["--epochs", "1"]);
    let scores = fx.path("scores.tsv");
    let kv = fx.path("report.txt");
    let (code, table, err) = fx.evaluate(&["--scores", &scores, "--report", &kv]);
    assert_eq!(code, 0, "{err}");

    let mut sessions: Vec<(String, Vec<(f64, u8)>)> = Vec::new();
    for line in fs::read_to_string(&scores).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let stacks: f64 = f[4].split(',').map(|x| x.parse::<f64>().unwrap()).sum();
        let total: f64 = f[3].parse().unwrap();
        assert_eq!(total, stacks);
        match sessions.last_mut() {
            Some((id, c)) if id == f[0] => c.push((total, f[2].parse().unwrap())),
            _ => sessions.push((f[0].to_owned(), vec![(total, f[2].parse().unwrap())])),
        }
    }
    assert_eq!(sessions.len(), 5);
    let test_text = fs::read_to_string(fx.path("test.txt")).unwrap();
    let turns: Vec<usize> = test_text.lines().step_by(4).map(|l| l.split('\t').count() - 2).collect();
    let evals: Vec<EvalSession> = sessions
        .into_iter()
        .zip(turns)
        .map(|((id, c), t)| EvalSession::new(id, c, t))
        .collect();
    let recomputed = aggregate(&evals).unwrap();
    assert_eq!(recomputed.to_table(), table);
    assert_eq!(recomputed.to_key_values(), fs::read_to_string(&kv).unwrap());
}

#[test]
fn evaluation_input_errors() {
    let fx = Fixture::new();
    fx.train(&["--epochs", "0"]);
    let (code, _, _) = fx.evaluate(&["--group-size", "3"]);
    assert_eq!(code, 2);
    fs::write(fx.path("test.txt"), "").unwrap();
    assert_eq!(fx.evaluate(&[]).0, 2);
    // the checkpoint is pure; asking for another strategy is refused
    fs::write(fx.path("test.txt"), "1\ta\tb\n0\ta\tc\n1\ta\tb\n0\ta\tc\n").unwrap();
    assert_eq!(fx.evaluate(&[]).0, 0);
    assert_ne!(fx.evaluate(&["--integration", "i3"]).0, 0);
}

#[test]
fn ranking_sorts_and_agrees_with_evaluation() {
    let fx = Fixture::new();
    fx.train(&["--epochs", "1"]);

    let (code, out, err) = fx.rank("w1 w2 ||| w3", &["w4 w5"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("1\t"));
    assert_eq!(out.lines().count(), 1);
    assert_eq!(fx.rank("w1", &[]).0, 2);

    // candidates of the first test session, ranked alone
    let test_text = fs::read_to_string(fx.path("test.txt")).unwrap();
    let first: Vec<Vec<&str>> = test_text.lines().take(4).map(|l| l.split('\t').collect()).collect();
    let context = first[0][1..first[0].len() - 1].join(" ||| ");
    let responses: Vec<&str> = first.iter().map(|f| *f.last().unwrap()).collect();
    let (code, out, err) = fx.rank(&context, &responses);
    assert_eq!(code, 0, "{err}");
    let ranked: Vec<(f64, &str)> = out
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].parse().unwrap(), f[3])
        })
        .collect();
    assert!(ranked.windows(2).all(|w| w[0].0 >= w[1].0));

    let scores = fx.path("scores.tsv");
    assert_eq!(fx.evaluate(&["--scores", &scores]).0, 0);
    let exported: Vec<f64> = fs::read_to_string(&scores)
        .unwrap()
        .lines()
        .skip(1)
        .take(4)
        .map(|l| l.split('\t').nth(3).unwrap().parse().unwrap())
        .collect();
    for (i, r) in responses.iter().enumerate() {
        let (score, _) = ranked.iter().find(|(_, text)| text == r).unwrap();
        assert_eq!(score.to_bits(), exported[i].to_bits(), "candidate {i}");
    }
}

#[test]
fn grad_check_passes_and_catches_a_fault() {
    let args = ["grad-check", "--integration", "i1", "--self-rep", "gru", "--pooling", "mean"];
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("i1/gru/mean: ok"), "{out}");
    let mut faulty = args.to_vec();
    faulty.extend(["--inject-fault", "1.5"]);
    let (code, out, _) = run(&faulty);
    assert_eq!(code, 3);
    assert!(out.contains("FAILED"), "{out}");
}

#[test]
fn config_precedence_matrix() {
    // (key, flag name, file value, flag value, default)
    let cases = [
        ("stacks", "--stacks", "3", "5", "7"),
        ("learning_rate", "--learning-rate", "0.01", "0.02", "0.0005"),
        ("seed", "--seed", "11", "12", "0"),
        ("integration", "--integration", "i1", "i3", "pure"),
        ("batch_size", "--batch-size", "8", "16", "20"),
    ];
    let dir = tempfile::tempdir().unwrap();
    let get = |c: &RunConfig, key: &str| match key {
        "stacks" => c.model.stacks.to_string(),
        "learning_rate" => c.learning_rate.to_string(),
        "seed" => c.seed.to_string(),
        "integration" => c.model.integration.to_string(),
        "batch_size" => c.batch_size.to_string(),
        _ => unreachable!(),
    };
    for (key, flag, file_v, flag_v, default) in cases {
        for (in_file, in_flag) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg_path = dir.path().join("run.conf");
            let body = if in_file { format!("# test\n{key} = {file_v}\n") } else { "# empty\n".into() };
            fs::write(&cfg_path, body).unwrap();
            let mut args = vec!["s2m".to_string(), "train".into(), "--config".into(), cfg_path.display().to_string()];
            if in_flag {
                args.extend([flag.to_string(), flag_v.to_string()]);
            }
            let cli = <s2m_cli::Cli as clap::Parser>::try_parse_from(&args).unwrap();
            let s2m_cli::Command::Train(opts) = cli.command else { unreachable!() };
            let cfg = opts.resolve().unwrap();
            let expect = if in_flag { flag_v } else if in_file { file_v } else { default };
            let expect = match key {
                "learning_rate" => expect.parse::<f64>().unwrap().to_string(),
                _ => expect.to_string(),
            };
            assert_eq!(get(&cfg, key), expect, "{key} file={in_file} flag={in_flag}");
        }
    }
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_s2m");
    let status = Command::new(bin).args(["evaluate", "--nonsense"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let status = Command::new(bin)
        .args(["build-vocab", "--train", "/nonexistent/train.txt", "--vocab", "/tmp/v.txt"])
        .env("S2M_LOG", "debug")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
