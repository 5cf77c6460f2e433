//! Cold-start train/test partitions.
//!
//! * cold playlists: some playlists of ~20% of users are held out; those
//!   users keep at least one training playlist.
//! * cold users: every playlist of ~30% of users is held out.
//! * cold songs: the most recently released songs are removed from every
//!   playlist and become the candidates to recommend.
//!
//! In all settings every song that can appear in a test playlist also
//! appears in at least one training playlist (except the held-out new songs).

pub mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{data_lines, read_text, write_text, Corpus, PlaylistId, SongId, UserId};
use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ColdPlaylists,
    ColdUsers,
    ColdSongs,
}

impl Setting {
    pub const ALL: [Setting; 3] = [
        Setting::ColdPlaylists,
        Setting::ColdUsers,
        Setting::ColdSongs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::ColdPlaylists => "cold_playlists",
            Setting::ColdUsers => "cold_users",
            Setting::ColdSongs => "cold_songs",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "cold_playlists" => Ok(Setting::ColdPlaylists),
            "cold_users" => Ok(Setting::ColdUsers),
            "cold_songs" => Ok(Setting::ColdSongs),
            other => Err(Error::InvalidArgument(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: Setting,
    /// Fraction of users sampled for testing (cold playlists / cold users).
    pub user_fraction: f64,
    /// Number of latest released songs held out (cold songs).
    pub n_new_songs: usize,
    /// Corpus-wide playlist support each test song must have (cold playlists).
    pub min_song_support: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(setting: Setting, seed: u64) -> Self {
        Self {
            setting,
            user_fraction: match setting {
                Setting::ColdUsers => 0.30,
                _ => 0.20,
            },
            n_new_songs: 0,
            min_song_support: 5,
            seed,
        }
    }

    pub fn with_new_songs(mut self, n: usize) -> Self {
        self.n_new_songs = n;
        self
    }

    fn validate(&self, corpus: &Corpus) -> Result<()> {
        if !(self.user_fraction > 0.0 && self.user_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "user fraction {} outside (0, 1)",
                self.user_fraction
            )));
        }
        if self.setting == Setting::ColdSongs
            && (self.n_new_songs == 0 || self.n_new_songs >= corpus.n_songs())
        {
            return Err(Error::InvalidArgument(format!(
                "number of new songs must be in [1, {}), got {}",
                corpus.n_songs(),
                self.n_new_songs
            )));
        }
        Ok(())
    }
}

/// One held-out query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TestCase {
    pub playlist: PlaylistId,
    pub user: UserId,
    /// Observed (training) part of the playlist; only non-empty for cold songs.
    pub seed_songs: Vec<SongId>,
    /// Songs that should be recommended.
    pub positives: Vec<SongId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitResult {
    pub setting: Setting,
    pub train_playlists: Vec<PlaylistId>,
    pub test: Vec<TestCase>,
    /// Held-out new songs (cold songs only), ascending.
    pub held_songs: Vec<SongId>,
}

/// A training playlist restricted to the songs visible during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPlaylist {
    pub id: PlaylistId,
    pub owner: UserId,
    pub members: Vec<SongId>,
}

/// Everything a learner may see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSet {
    pub setting: Setting,
    pub playlists: Vec<TrainingPlaylist>,
    held: Vec<bool>,
}

impl TrainingSet {
    pub fn n_songs(&self) -> usize {
        self.held.len()
    }

    pub fn is_held(&self, song: SongId) -> bool {
        self.held[song.0]
    }

    /// Songs visible at training time, ascending.
    pub fn visible_songs(&self) -> Vec<SongId> {
        (0..self.held.len())
            .filter(|&m| !self.held[m])
            .map(SongId)
            .collect()
    }

    pub fn held_songs(&self) -> Vec<SongId> {
        (0..self.held.len())
            .filter(|&m| self.held[m])
            .map(SongId)
            .collect()
    }

    /// Number of training playlists containing each song.
    pub fn song_playcounts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.held.len()];
        for p in &self.playlists {
            for m in &p.members {
                counts[m.0] += 1;
            }
        }
        counts
    }

    /// Ascending ids of users that own at least one training playlist.
    pub fn users(&self) -> Vec<UserId> {
        let mut u: Vec<UserId> = self.playlists.iter().map(|p| p.owner).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    pub fn playlists_of(&self, user: UserId) -> impl Iterator<Item = &TrainingPlaylist> {
        self.playlists.iter().filter(move |p| p.owner == user)
    }

    pub fn find(&self, id: PlaylistId) -> Option<&TrainingPlaylist> {
        self.playlists
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.playlists[i])
    }
}

impl SplitResult {
    pub fn training_set(&self, corpus: &Corpus) -> TrainingSet {
        let mut held = vec![false; corpus.n_songs()];
        for s in &self.held_songs {
            held[s.0] = true;
        }
        let playlists = self
            .train_playlists
            .iter()
            .map(|&id| {
                let p = corpus.playlist(id);
                TrainingPlaylist {
                    id,
                    owner: p.owner,
                    members: p.members.iter().copied().filter(|m| !held[m.0]).collect(),
                }
            })
            .collect();
        TrainingSet {
            setting: self.setting,
            playlists,
            held,
        }
    }

    pub fn test_users(&self) -> Vec<UserId> {
        let mut u: Vec<UserId> = self.test.iter().map(|t| t.user).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    /// Verifies the setting's integrity constraints; returns the list of violations.
    pub fn check(&self, corpus: &Corpus, spec: &SplitSpec) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let train: HashSet<PlaylistId> = self.train_playlists.iter().copied().collect();
        if train.len() != self.train_playlists.len() {
            problems.push("duplicate training playlist".to_string());
        }
        if self.train_playlists.is_empty() {
            problems.push("no training playlists".to_string());
        }
        if self.test.is_empty() {
            problems.push("no test playlists".to_string());
        }
        let ts = self.training_set(corpus);
        let counts = ts.song_playcounts();
        let held: HashSet<SongId> = self.held_songs.iter().copied().collect();

        match self.setting {
            Setting::ColdPlaylists | Setting::ColdUsers => {
                let support = corpus_support(corpus);
                let test_users: HashSet<UserId> = self.test.iter().map(|t| t.user).collect();
                for t in &self.test {
                    if train.contains(&t.playlist) {
                        problems.push(format!("{} is both train and test", t.playlist));
                    }
                    if t.positives != corpus.playlist(t.playlist).members {
                        problems.push(format!("{} positives differ from its members", t.playlist));
                    }
                    for m in &t.positives {
                        if counts[m.0] == 0 {
                            problems.push(format!("{m} of {} absent from training", t.playlist));
                        }
                        if self.setting == Setting::ColdPlaylists
                            && support[m.0] < spec.min_song_support
                        {
                            problems.push(format!(
                                "{m} of {} has support {} < {}",
                                t.playlist, support[m.0], spec.min_song_support
                            ));
                        }
                    }
                }
                for u in test_users {
                    let n_train = ts.playlists_of(u).count();
                    match self.setting {
                        Setting::ColdPlaylists if n_train == 0 => {
                            problems.push(format!("test {u} has no training playlist"))
                        }
                        Setting::ColdUsers if n_train > 0 => {
                            problems.push(format!("cold {u} still has training playlists"))
                        }
                        _ => {}
                    }
                }
                let covered = self.train_playlists.len() + self.test.len();
                if covered != corpus.n_playlists() {
                    problems.push(format!(
                        "{covered} playlists assigned, corpus has {}",
                        corpus.n_playlists()
                    ));
                }
            }
            Setting::ColdSongs => {
                for p in &ts.playlists {
                    if p.members.is_empty() {
                        problems.push(format!("training {} has only held songs", p.id));
                    }
                }
                for m in corpus.songs().iter().enumerate().map(|(i, _)| SongId(i)) {
                    if held.contains(&m) && counts[m.0] > 0 {
                        problems.push(format!("held {m} visible in training"));
                    }
                }
                for t in &self.test {
                    if !train.contains(&t.playlist) {
                        problems.push(format!("test {} has no training seed", t.playlist));
                    }
                    if t.positives.is_empty() || t.positives.iter().any(|m| !held.contains(m)) {
                        problems.push(format!("test {} positives are not held songs", t.playlist));
                    }
                    if t.seed_songs.iter().any(|m| held.contains(m)) {
                        problems.push(format!("test {} seed contains held songs", t.playlist));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Writes the partition as plain text files into `dir`.
    pub fn write_dir(&self, corpus: &Corpus, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("setting.txt"), &format!("{}\n", self.setting))?;
        let mut train = String::new();
        for p in &self.train_playlists {
            train.push_str(&corpus.playlist(*p).external_id);
            train.push('\n');
        }
        write_text(&dir.join("train_playlists.txt"), &train)?;
        let mut test = String::from("# playlist_id,held positives (cold songs only)\n");
        for t in &self.test {
            test.push_str(&corpus.playlist(t.playlist).external_id);
            if self.setting == Setting::ColdSongs {
                let ids: Vec<&str> = t
                    .positives
                    .iter()
                    .map(|m| corpus.song(*m).external_id.as_str())
                    .collect();
                test.push(',');
                test.push_str(&ids.join(";"));
            }
            test.push('\n');
        }
        write_text(&dir.join("test_playlists.txt"), &test)?;
        let mut held = String::new();
        for s in &self.held_songs {
            held.push_str(&corpus.song(*s).external_id);
            held.push('\n');
        }
        write_text(&dir.join("held_songs.txt"), &held)
    }

    pub fn read_dir(corpus: &Corpus, dir: &Path) -> Result<Self> {
        let setting_path = dir.join("setting.txt");
        let setting: Setting = read_text(&setting_path)?.trim().parse()?;
        let lookup_playlist = |path: &Path, line: usize, id: &str| {
            corpus
                .find_playlist(id)
                .ok_or_else(|| Error::parse(path, line, format!("unknown playlist id {id}")))
        };
        let path = dir.join("held_songs.txt");
        let mut held_songs = Vec::new();
        for (line, id) in data_lines(&read_text(&path)?) {
            let id = id.trim();
            held_songs.push(
                corpus
                    .find_song(id)
                    .ok_or_else(|| Error::parse(&path, line, format!("unknown song id {id}")))?,
            );
        }
        held_songs.sort_unstable();
        let held: HashSet<SongId> = held_songs.iter().copied().collect();

        let path = dir.join("train_playlists.txt");
        let mut train_playlists = Vec::new();
        for (line, id) in data_lines(&read_text(&path)?) {
            train_playlists.push(lookup_playlist(&path, line, id.trim())?);
        }
        train_playlists.sort_unstable();

        let path = dir.join("test_playlists.txt");
        let mut test = Vec::new();
        for (line, row) in data_lines(&read_text(&path)?) {
            let id = row.split(',').next().unwrap_or("").trim();
            let pid = lookup_playlist(&path, line, id)?;
            let p = corpus.playlist(pid);
            let (seed_songs, positives) = match setting {
                Setting::ColdSongs => p.members.iter().copied().partition(|m| !held.contains(m)),
                _ => (Vec::new(), p.members.clone()),
            };
            test.push(TestCase {
                playlist: pid,
                user: p.owner,
                seed_songs,
                positives,
            });
        }
        Ok(Self {
            setting,
            train_playlists,
            test,
            held_songs,
        })
    }
}

fn corpus_support(corpus: &Corpus) -> Vec<usize> {
    let mut support = vec![0; corpus.n_songs()];
    for p in corpus.playlists() {
        for m in &p.members {
            support[m.0] += 1;
        }
    }
    support
}

/// Dispatches to the split procedure of `spec.setting`.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitResult> {
    match spec.setting {
        Setting::ColdPlaylists => split_cold_playlists(corpus, spec),
        Setting::ColdUsers => split_cold_users(corpus, spec),
        Setting::ColdSongs => split_cold_songs(corpus, spec),
    }
}

fn target_users(corpus: &Corpus, fraction: f64) -> usize {
    ((corpus.n_users() as f64 * fraction).round() as usize).max(1)
}

fn shuffled_users(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Vec<UserId> {
    let mut users: Vec<UserId> = (0..corpus.n_users()).map(UserId).collect();
    users.shuffle(rng);
    users
}

fn finish(corpus: &Corpus, setting: Setting, is_test: &[bool]) -> SplitResult {
    let mut train_playlists = Vec::new();
    let mut test = Vec::new();
    for (i, p) in corpus.playlists().iter().enumerate() {
        if is_test[i] {
            test.push(TestCase {
                playlist: PlaylistId(i),
                user: p.owner,
                seed_songs: Vec::new(),
                positives: p.members.clone(),
            });
        } else {
            train_playlists.push(PlaylistId(i));
        }
    }
    SplitResult {
        setting,
        train_playlists,
        test,
        held_songs: Vec::new(),
    }
}

/// Holds out part of the playlists of about `user_fraction` of the users.
///
/// A playlist is eligible when every one of its songs has corpus-wide support
/// of at least `min_song_support` and would still appear in some training
/// playlist. Each sampled user keeps at least one training playlist; at most
/// half of a user's playlists (rounded up, but never all) are held.
pub fn split_cold_playlists(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let support = corpus_support(corpus);
    if support.iter().all(|&s| s < spec.min_song_support) {
        return Err(Error::Data(format!(
            "no song is included in at least {} playlists",
            spec.min_song_support
        )));
    }
    let mut train_count = support.clone();
    let mut is_test = vec![false; corpus.n_playlists()];
    let target = target_users(corpus, spec.user_fraction);
    let mut n_test_users = 0;
    for u in shuffled_users(corpus, &mut rng) {
        if n_test_users == target {
            break;
        }
        let owned = corpus.user_playlists(u);
        if owned.len() < 2 {
            continue;
        }
        let quota = owned.len().div_ceil(2).min(owned.len() - 1);
        let mut candidates: Vec<PlaylistId> = owned
            .iter()
            .copied()
            .filter(|&p| {
                corpus
                    .playlist(p)
                    .members
                    .iter()
                    .all(|m| support[m.0] >= spec.min_song_support)
            })
            .collect();
        candidates.shuffle(&mut rng);
        let mut held = 0;
        for p in candidates {
            if held == quota {
                break;
            }
            let members = &corpus.playlist(p).members;
            if members.iter().any(|m| train_count[m.0] <= 1) {
                continue;
            }
            for m in members {
                train_count[m.0] -= 1;
            }
            is_test[p.0] = true;
            held += 1;
        }
        if held > 0 {
            n_test_users += 1;
        }
    }
    if n_test_users == 0 {
        return Err(Error::Data(
            "cold playlists constraints cannot be satisfied for this corpus".into(),
        ));
    }
    Ok(finish(corpus, Setting::ColdPlaylists, &is_test))
}

/// Holds out all playlists of about `user_fraction` of the users, skipping
/// users whose removal would leave some song without a training playlist.
pub fn split_cold_users(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_count = corpus_support(corpus);
    let mut is_test = vec![false; corpus.n_playlists()];
    let target = target_users(corpus, spec.user_fraction);
    let mut n_test_users = 0;
    for u in shuffled_users(corpus, &mut rng) {
        if n_test_users == target {
            break;
        }
        let owned = corpus.user_playlists(u);
        let mut removal = vec![0usize; 0];
        for p in owned {
            removal.extend(corpus.playlist(*p).members.iter().map(|m| m.0));
        }
        removal.sort_unstable();
        let orphans = removal
            .chunk_by(|a, b| a == b)
            .any(|run| train_count[run[0]] <= run.len());
        if orphans {
            continue;
        }
        for m in removal {
            train_count[m] -= 1;
        }
        for p in owned {
            is_test[p.0] = true;
        }
        n_test_users += 1;
    }
    if n_test_users == 0 || n_test_users == corpus.n_users() {
        return Err(Error::Data(
            "cold users split is degenerate for this corpus".into(),
        ));
    }
    Ok(finish(corpus, Setting::ColdUsers, &is_test))
}

/// Holds out the `n_new_songs` most recently released songs (ties broken by
/// ascending song id). Playlists made only of held songs are dropped; every
/// other playlist keeps its remaining songs for training and, when it lost
/// any, becomes a test query whose positives are the held songs.
pub fn split_cold_songs(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate(corpus)?;
    let mut order: Vec<SongId> = (0..corpus.n_songs()).map(SongId).collect();
    order.sort_by(|a, b| {
        corpus
            .song(*b)
            .release_year
            .cmp(&corpus.song(*a).release_year)
            .then(a.cmp(b))
    });
    let mut held_songs: Vec<SongId> = order[..spec.n_new_songs].to_vec();
    held_songs.sort_unstable();
    let mut held = vec![false; corpus.n_songs()];
    for s in &held_songs {
        held[s.0] = true;
    }
    let mut train_playlists = Vec::new();
    let mut test = Vec::new();
    for (i, p) in corpus.playlists().iter().enumerate() {
        let (positives, seed_songs): (Vec<SongId>, Vec<SongId>) =
            p.members.iter().partition(|m| held[m.0]);
        if seed_songs.is_empty() {
            continue;
        }
        train_playlists.push(PlaylistId(i));
        if !positives.is_empty() {
            test.push(TestCase {
                playlist: PlaylistId(i),
                user: p.owner,
                seed_songs,
                positives,
            });
        }
    }
    if test.is_empty() {
        return Err(Error::Data(
            "no playlist contains both held and kept songs".into(),
        ));
    }
    Ok(SplitResult {
        setting: Setting::ColdSongs,
        train_playlists,
        test,
        held_songs,
    })
}
