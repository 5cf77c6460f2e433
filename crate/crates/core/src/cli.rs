//! Command-line driver.
//!
//! Every subcommand writes its outputs plus `<subcommand>.manifest.json` into
//! the `--out` directory. The manifest records the argument vector, the seed
//! and SHA-256 digests of all inputs and outputs; `mtcrec replay --manifest F`
//! checks the inputs, re-runs the command and checks that the outputs are
//! byte-identical.
//!
//! Output files:
//! - `synth`: songs.csv, playlists.csv, users.csv
//! - `split`: setting.txt, train_playlists.txt, test_playlists.txt, held_songs.txt
//! - `features`: features.csv (song_id then one column per feature)
//! - `train`: model.bin, training.json
//! - `eval`: report.txt (`key=value` lines: method, setting, n_test_playlists,
//!   n_skipped, auc, spread, hitrate@K, novelty@K) and report.json (the same
//!   fields with `hitrate` and `novelty` as objects keyed by K, plus
//!   `per_playlist_auc`)
//! - `recommend`: recommendations.csv (`rank,song_id,score`)
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! data errors (unreadable or malformed inputs).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::experiment::{EvalConfig, Evaluator, Method, DEFAULT_KNN};
use crate::features::{build_features, EmbeddingTable, FeatureMatrix, GenreTable};
use crate::losses::Hyperparams;
use crate::model::{recommend, train, RecommendMode, TrainedModel};
use crate::owlqn::OwlqnConfig;
use crate::splits::synthetic::{generate_synthetic, SyntheticSpec};
use crate::splits::{split, Setting, SplitResult, SplitSpec};

const SPLIT_FILES: [&str; 4] = [
    "setting.txt",
    "train_playlists.txt",
    "test_playlists.txt",
    "held_songs.txt",
];

#[derive(Debug, Parser)]
#[command(name = "mtcrec", version, about = "Cold-start playlist recommendation")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// `song_id,artist_id,release_year,<metadata...>` with a header row.
    #[arg(long)]
    songs: PathBuf,
    /// `playlist_id,user_id,song_ids` with `;`-separated song ids.
    #[arg(long)]
    playlists: PathBuf,
    /// `user_id,<attributes...>` with a header row.
    #[arg(long)]
    users: Option<PathBuf>,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        load_corpus(&self.songs, &self.playlists, self.users.as_deref())
    }

    fn paths(&self) -> Vec<PathBuf> {
        let mut v = vec![self.songs.clone(), self.playlists.clone()];
        v.extend(self.users.clone());
        v
    }
}

#[derive(Debug, Args)]
struct FeatureArgs {
    /// Split directory written by `split`.
    #[arg(long)]
    split: PathBuf,
    /// `song_id,genre_label` rows.
    #[arg(long)]
    genres: Option<PathBuf>,
    /// `artist_id,<values...>` rows; id `*` is the fallback row.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl FeatureArgs {
    fn paths(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = SPLIT_FILES.iter().map(|f| self.split.join(f)).collect();
        v.extend(self.genres.clone());
        v.extend(self.embeddings.clone());
        v
    }

    fn build(&self, corpus: &Corpus) -> Result<(SplitResult, FeatureMatrix<f64>)> {
        let s = SplitResult::read_dir(corpus, &self.split)?;
        let genres = self.genres.as_deref().map(GenreTable::load).transpose()?;
        let embeddings = self
            .embeddings
            .as_deref()
            .map(EmbeddingTable::load)
            .transpose()?;
        let x = build_features(
            corpus,
            &s.training_set(corpus),
            genres.as_ref(),
            embeddings.as_ref(),
        )?;
        Ok((s, x))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-4)]
    lambda1: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda2: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda3: f64,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long, default_value_t = 10)]
    memory: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 50)]
        n_users: usize,
        #[arg(long, default_value_t = 200)]
        n_playlists: usize,
        #[arg(long, default_value_t = 500)]
        n_songs: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split playlists into training and test sets.
    Split {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_parser = parse_setting)]
        setting: Setting,
        /// Latest released songs to hold out (cold songs).
        #[arg(long)]
        new_songs: Option<usize>,
        #[arg(long)]
        user_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the song feature matrix.
    Features {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multitask model.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        features: FeatureArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a method on the test playlists of a split.
    Eval {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, value_parser = parse_method, default_value = "mtc")]
        method: Method,
        /// Model file (mtc only).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_KNN)]
        knn: usize,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,30,50,100")]
        topk: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recommend songs for one test playlist.
    Recommend {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, value_parser = parse_method, default_value = "mtc")]
        method: Method,
        #[arg(long)]
        model: Option<PathBuf>,
        /// External id of a test playlist.
        #[arg(long)]
        playlist: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_KNN)]
        knn: usize,
        /// Draw from softmax(scores) without replacement instead of top-K.
        #[arg(long)]
        sampled: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a recorded command and verify its outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// What a finished command read and wrote.
struct Outcome {
    name: &'static str,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    out_dir: PathBuf,
    outputs: Vec<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let strings: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli, &strings) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest);
    }
    let outcome = match cli.threads {
        Some(0) => return Err(Error::InvalidArgument("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| dispatch(cli.command))?,
        None => dispatch(cli.command)?,
    };
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        subcommand: outcome.name.into(),
        argv: argv.to_vec(),
        seed: outcome.seed,
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
    };
    let path = outcome
        .out_dir
        .join(format!("{}.manifest.json", outcome.name));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    write(&path, text.as_bytes())
}

fn replay(path: &Path) -> Result<()> {
    let manifest = Manifest::load(path)?;
    for d in &manifest.inputs {
        let found = sha256_file(&d.path)?;
        if found != d.sha256 {
            return Err(Error::Data(format!(
                "input {} changed since the recorded run",
                d.path.display()
            )));
        }
    }
    let cli = Cli::try_parse_from(&manifest.argv)
        .map_err(|e| Error::InvalidArgument(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::InvalidArgument("cannot replay a replay".into()));
    }
    execute(cli, &manifest.argv)?;
    for d in &manifest.outputs {
        let found = sha256_file(&d.path)?;
        if found != d.sha256 {
            return Err(Error::Data(format!(
                "output {} differs from the recorded run",
                d.path.display()
            )));
        }
    }
    println!(
        "replayed {}: {} outputs identical",
        manifest.subcommand,
        manifest.outputs.len()
    );
    Ok(())
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Synth {
            n_users,
            n_playlists,
            n_songs,
            dim,
            noise,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                n_users,
                n_playlists,
                n_songs,
                dim,
                noise,
                seed,
                ..SyntheticSpec::default()
            };
            let data = generate_synthetic(&spec)?;
            data.write_files(&out)?;
            println!(
                "{} users, {} playlists, {} songs ({} unused songs dropped)",
                data.corpus.n_users(),
                data.corpus.n_playlists(),
                data.corpus.n_songs(),
                data.n_pruned
            );
            Ok(Outcome {
                name: "synth",
                seed: Some(seed),
                inputs: vec![],
                outputs: ["songs.csv", "playlists.csv", "users.csv"]
                    .iter()
                    .map(|f| out.join(f))
                    .collect(),
                out_dir: out,
            })
        }
        Command::Split {
            corpus,
            setting,
            new_songs,
            user_fraction,
            seed,
            out,
        } => {
            let c = corpus.load()?;
            let mut spec = SplitSpec::new(setting, seed);
            if let Some(n) = new_songs {
                spec = spec.with_new_songs(n);
            } else if setting == Setting::ColdSongs {
                return Err(Error::InvalidArgument(
                    "--new-songs is required for cold_songs".into(),
                ));
            }
            if let Some(f) = user_fraction {
                spec.user_fraction = f;
            }
            let s = split(&c, &spec)?;
            s.write_dir(&c, &out)?;
            println!(
                "{}: {} training playlists, {} test playlists, {} held songs",
                setting,
                s.train_playlists.len(),
                s.test.len(),
                s.held_songs.len()
            );
            Ok(Outcome {
                name: "split",
                seed: Some(seed),
                inputs: corpus.paths(),
                outputs: SPLIT_FILES.iter().map(|f| out.join(f)).collect(),
                out_dir: out,
            })
        }
        Command::Features {
            corpus,
            features,
            out,
        } => {
            let c = corpus.load()?;
            let (_, x) = features.build(&c)?;
            let path = out.join("features.csv");
            write(&path, x.to_csv(&c).as_bytes())?;
            println!("{} songs x {} features", x.n_rows(), x.dim());
            Ok(Outcome {
                name: "features",
                seed: None,
                inputs: [corpus.paths(), features.paths()].concat(),
                outputs: vec![path],
                out_dir: out,
            })
        }
        Command::Train {
            corpus,
            features,
            train: t,
            out,
        } => {
            let c = corpus.load()?;
            let (s, x) = features.build(&c)?;
            let hp = Hyperparams {
                lambda1: t.lambda1,
                lambda2: t.lambda2,
                lambda3: t.lambda3,
                p: t.p,
            };
            let cfg = OwlqnConfig {
                memory: t.memory,
                max_iters: t.max_iters,
                grad_tol: t.grad_tol,
                ..OwlqnConfig::default()
            };
            cfg.validate()?;
            let model = train(
                &s.training_set(&c),
                &x,
                c.n_users(),
                c.n_playlists(),
                &hp,
                &cfg,
            )?;
            let model_path = out.join("model.bin");
            write(&model_path, &model.to_bytes())?;
            let summary = model.summary.as_ref().expect("fresh model has a summary");
            let summary_path = out.join("training.json");
            let text = serde_json::to_string_pretty(summary).expect("summary serialises") + "\n";
            write(&summary_path, text.as_bytes())?;
            println!(
                "objective {:.6} -> {:.6} after {} iterations ({:?})",
                summary.initial_objective,
                summary.objective,
                summary.iterations,
                summary.termination
            );
            Ok(Outcome {
                name: "train",
                seed: None,
                inputs: [corpus.paths(), features.paths()].concat(),
                outputs: vec![model_path, summary_path],
                out_dir: out,
            })
        }
        Command::Eval {
            corpus,
            features,
            method,
            model,
            knn,
            topk,
            out,
        } => {
            let cfg = EvalConfig { ks: topk, knn };
            cfg.validate()?;
            let c = corpus.load()?;
            let (s, x) = features.build(&c)?;
            let m = load_model(method, model.as_deref())?;
            let ev = Evaluator::new(&c, &s, Some(&x), m.as_ref(), knn)?;
            let report = ev.evaluate(method, &s.test, &cfg)?;
            let text_path = out.join("report.txt");
            let json_path = out.join("report.json");
            write(&text_path, report.to_text().as_bytes())?;
            write(&json_path, report.to_json().as_bytes())?;
            print!("{}", report.to_text());
            let mut inputs = [corpus.paths(), features.paths()].concat();
            inputs.extend(model);
            Ok(Outcome {
                name: "eval",
                seed: None,
                inputs,
                outputs: vec![text_path, json_path],
                out_dir: out,
            })
        }
        Command::Recommend {
            corpus,
            features,
            method,
            model,
            playlist,
            k,
            knn,
            sampled,
            seed,
            out,
        } => {
            let c = corpus.load()?;
            let (s, x) = features.build(&c)?;
            let m = load_model(method, model.as_deref())?;
            let pid = c
                .find_playlist(&playlist)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown playlist {playlist}")))?;
            let case = s.test.iter().find(|t| t.playlist == pid).ok_or_else(|| {
                Error::InvalidArgument(format!("{playlist} is not a test playlist of this split"))
            })?;
            let ev = Evaluator::new(&c, &s, Some(&x), m.as_ref(), knn)?;
            let scores = ev.score(method, case)?;
            let mode = if sampled {
                RecommendMode::Sampled
            } else {
                RecommendMode::TopK
            };
            let rec = recommend(ArrayView1::from(&scores[..]), k, mode, seed)?;
            let mut csv = String::from("rank,song_id,score\n");
            for (rank, (j, score)) in rec.items.iter().enumerate() {
                let song = &c.song(ev.candidates()[*j]).external_id;
                csv.push_str(&format!("{},{song},{score:?}\n", rank + 1));
            }
            let path = out.join("recommendations.csv");
            write(&path, csv.as_bytes())?;
            print!("{csv}");
            let mut inputs = [corpus.paths(), features.paths()].concat();
            inputs.extend(model);
            Ok(Outcome {
                name: "recommend",
                seed: Some(seed),
                inputs,
                outputs: vec![path],
                out_dir: out,
            })
        }
        Command::Replay { .. } => unreachable!("handled before dispatch"),
    }
}

fn load_model(method: Method, path: Option<&Path>) -> Result<Option<TrainedModel<f64>>> {
    match (method, path) {
        (Method::Mtc, None) => Err(Error::InvalidArgument(
            "--model is required for method mtc".into(),
        )),
        (Method::Mtc, Some(p)) => Ok(Some(TrainedModel::load(p)?)),
        _ => Ok(None),
    }
}
