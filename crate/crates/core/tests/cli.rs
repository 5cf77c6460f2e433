use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mtcrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtcrec"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = mtcrec(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// Synthetic corpus plus a cold-playlists split.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        ok(&[
            "synth",
            "--n-users",
            "10",
            "--n-playlists",
            "40",
            "--n-songs",
            "120",
            "--dim",
            "5",
            "--seed",
            "1",
            "--out",
            &f.p("data"),
        ]);
        let mut args = vec!["split".to_string()];
        args.extend(f.corpus());
        args.extend(["--setting", "cold-playlists", "--seed", "3", "--out"].map(String::from));
        args.push(f.p("split"));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        f
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn corpus(&self) -> Vec<String> {
        vec![
            "--songs".into(),
            self.p("data/songs.csv"),
            "--playlists".into(),
            self.p("data/playlists.csv"),
            "--users".into(),
            self.p("data/users.csv"),
        ]
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.corpus());
        args.push("--split".into());
        args.push(self.p("split"));
        args.extend(extra.iter().map(|s| s.to_string()));
        mtcrec(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn poprank_eval_reports_auc() {
    let f = Fixture::new();
    let out = f.run("eval", &["--method", "poprank", "--out", &f.p("eval")]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = read(f.p("eval/report.txt"));
    assert!(text.contains("method=poprank\n"));
    assert!(text.contains("setting=cold_playlists\n"));
    let json: serde_json::Value = serde_json::from_str(&read(f.p("eval/report.json"))).unwrap();
    let auc = json["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(json["hitrate"]["100"].is_number());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let f = Fixture::new();
    for run in ["a", "b"] {
        let out = f.run(
            "train",
            &["--max-iters", "60", "--out", &f.p(&format!("model_{run}"))],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let model = f.p(&format!("model_{run}/model.bin"));
        let out = f.run(
            "eval",
            &[
                "--model",
                &model,
                "--topk",
                "1,5,10",
                "--out",
                &f.p(&format!("eval_{run}")),
            ],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        std::fs::read(f.p("model_a/model.bin")).unwrap(),
        std::fs::read(f.p("model_b/model.bin")).unwrap()
    );
    assert_eq!(
        read(f.p("eval_a/report.json")),
        read(f.p("eval_b/report.json"))
    );
    assert_eq!(
        read(f.p("eval_a/report.txt")),
        read(f.p("eval_b/report.txt"))
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let f = Fixture::new();
    for t in ["1", "3"] {
        let mut args = vec!["--threads", t];
        let out_dir = f.p(&format!("model_t{t}"));
        args.extend(["--max-iters", "40", "--out", &out_dir]);
        let out = f.run("train", &args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        std::fs::read(f.p("model_t1/model.bin")).unwrap(),
        std::fs::read(f.p("model_t3/model.bin")).unwrap()
    );
}

#[test]
fn missing_playlists_file_is_a_data_error() {
    let f = Fixture::new();
    let missing = f.p("data/nope.csv");
    let out = mtcrec(&[
        "split",
        "--songs",
        &f.p("data/songs.csv"),
        "--playlists",
        &missing,
        "--setting",
        "cold_users",
        "--out",
        &f.p("x"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn usage_errors_exit_with_one() {
    let f = Fixture::new();
    assert_eq!(mtcrec(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        f.run("eval", &["--method", "knn", "--out", &f.p("e")])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        f.run(
            "eval",
            &["--method", "poprank", "--topk", "10,5", "--out", &f.p("e")]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        f.run("eval", &["--method", "mtc", "--out", &f.p("e")])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        f.run("train", &["--lambda1", "-1", "--out", &f.p("m")])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(mtcrec(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_split_reports_line() {
    let f = Fixture::new();
    let test_file = f.root.join("split/test_playlists.txt");
    let mut text = read(&test_file);
    text.push_str("no-such-playlist\n");
    std::fs::write(&test_file, text).unwrap();
    let out = f.run("eval", &["--method", "poprank", "--out", &f.p("e")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("test_playlists.txt:"), "{err}");
    assert!(err.contains("no-such-playlist"), "{err}");
}

#[test]
fn replay_reproduces_and_detects_changed_inputs() {
    let f = Fixture::new();
    let manifest = f.p("split/split.manifest.json");
    let before = read(f.p("split/train_playlists.txt"));
    ok(&["replay", "--manifest", &manifest]);
    assert_eq!(read(f.p("split/train_playlists.txt")), before);

    let out = f.run("eval", &["--method", "cagh", "--out", &f.p("eval")]);
    assert!(out.status.success());
    let eval_manifest = f.p("eval/eval.manifest.json");
    let m: serde_json::Value = serde_json::from_str(&read(&eval_manifest)).unwrap();
    assert_eq!(m["subcommand"], "eval");
    assert!(m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .all(|d| d["sha256"].as_str().unwrap().len() == 64));
    ok(&["replay", "--manifest", &eval_manifest]);

    let songs = f.root.join("data/songs.csv");
    let mut text = read(&songs);
    text.push_str("# edited\n");
    std::fs::write(&songs, text).unwrap();
    let out = mtcrec(&["replay", "--manifest", &eval_manifest]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("songs.csv"));
}

#[test]
fn recommend_writes_ranked_songs() {
    let f = Fixture::new();
    let test_playlist = read(f.p("split/test_playlists.txt"))
        .lines()
        .find(|l| !l.starts_with('#'))
        .unwrap()
        .to_string();
    let out = f.run(
        "recommend",
        &[
            "--method",
            "sagh",
            "--playlist",
            &test_playlist,
            "--k",
            "7",
            "--out",
            &f.p("rec"),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = read(f.p("rec/recommendations.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rank,song_id,score");
    assert_eq!(lines.len(), 8);
    let scores: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let out = f.run(
        "recommend",
        &[
            "--method",
            "sagh",
            "--playlist",
            "p99999",
            "--out",
            &f.p("rec2"),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn features_command_writes_matrix() {
    let f = Fixture::new();
    let out = f.run("features", &["--out", &f.p("feat")]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = read(f.p("feat/features.csv"));
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("song_id,"));
    assert!(header.ends_with(",bias"));
    let songs = read(f.p("data/songs.csv"))
        .lines()
        .filter(|l| !l.is_empty())
        .count();
    assert_eq!(csv.lines().count(), songs);
}
