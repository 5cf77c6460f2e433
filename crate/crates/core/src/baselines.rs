//! Popularity and artist-overlap baselines.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{ArtistId, Corpus, SongId};
use crate::splits::{Setting, TestCase, TrainingSet};

/// Number of most popular artists used as context for cold users.
pub const COLD_USER_CONTEXT_ARTISTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    /// Training playlists containing each song.
    pub song_playcount: Vec<u64>,
    /// Sum of the playcounts of each artist's songs.
    pub artist_playcount: Vec<u64>,
}

impl PopularityTable {
    pub fn from_training(corpus: &Corpus, training: &TrainingSet) -> Self {
        let song_playcount: Vec<u64> = training
            .song_playcounts()
            .into_iter()
            .map(|c| c as u64)
            .collect();
        let mut artist_playcount = vec![0; corpus.n_artists()];
        for (s, c) in song_playcount.iter().enumerate() {
            artist_playcount[corpus.artist_of(SongId(s)).0] += c;
        }
        Self {
            song_playcount,
            artist_playcount,
        }
    }

    /// Popularity a song is ranked by in `setting`.
    pub fn base(&self, corpus: &Corpus, song: SongId, setting: Setting) -> u64 {
        match setting {
            Setting::ColdSongs => self.artist_playcount[corpus.artist_of(song).0],
            _ => self.song_playcount[song.0],
        }
    }

    /// Most popular artists, ties by ascending id.
    pub fn top_artists(&self, n: usize) -> Vec<ArtistId> {
        let mut order: Vec<usize> = (0..self.artist_playcount.len()).collect();
        order.sort_by(|&a, &b| {
            self.artist_playcount[b]
                .cmp(&self.artist_playcount[a])
                .then(a.cmp(&b))
        });
        order.into_iter().take(n).map(ArtistId).collect()
    }
}

/// Symmetric counts of training playlists containing both artists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollocationMatrix {
    counts: BTreeMap<(usize, usize), u64>,
}

impl CollocationMatrix {
    pub fn from_training(corpus: &Corpus, training: &TrainingSet) -> Self {
        let mut counts = BTreeMap::new();
        for p in &training.playlists {
            let artists: Vec<usize> = p
                .members
                .iter()
                .map(|m| corpus.artist_of(*m).0)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for (i, &a) in artists.iter().enumerate() {
                for &b in &artists[i..] {
                    *counts.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
        Self { counts }
    }

    pub fn get(&self, a: ArtistId, b: ArtistId) -> u64 {
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn scale(&mut self, factor: u64) {
        for v in self.counts.values_mut() {
            *v *= factor;
        }
    }
}

/// Context artists of a test query: the user's training artists for cold
/// playlists, the most popular artists for cold users, the seed playlist's
/// artists for cold songs.
pub fn context_artists(
    corpus: &Corpus,
    training: &TrainingSet,
    pop: &PopularityTable,
    case: &TestCase,
) -> Vec<ArtistId> {
    let set: BTreeSet<ArtistId> = match training.setting {
        Setting::ColdPlaylists => training
            .playlists_of(case.user)
            .flat_map(|p| p.members.iter().map(|m| corpus.artist_of(*m)))
            .collect(),
        Setting::ColdUsers => pop
            .top_artists(COLD_USER_CONTEXT_ARTISTS)
            .into_iter()
            .collect(),
        Setting::ColdSongs => case
            .seed_songs
            .iter()
            .map(|m| corpus.artist_of(*m))
            .collect(),
    };
    set.into_iter().collect()
}

pub fn poprank_scores(
    pop: &PopularityTable,
    corpus: &Corpus,
    candidates: &[SongId],
    setting: Setting,
) -> Vec<f64> {
    candidates
        .iter()
        .map(|&s| pop.base(corpus, s, setting) as f64)
        .collect()
}

/// Popularity for songs whose artist is in `context`, zero otherwise.
pub fn sagh_scores(
    pop: &PopularityTable,
    corpus: &Corpus,
    candidates: &[SongId],
    context: &[ArtistId],
    setting: Setting,
) -> Vec<f64> {
    candidates
        .iter()
        .map(|&s| {
            if context.binary_search(&corpus.artist_of(s)).is_ok() {
                pop.base(corpus, s, setting) as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Popularity times the summed collocation of the song's artist with the context artists.
pub fn cagh_scores(
    pop: &PopularityTable,
    colloc: &CollocationMatrix,
    corpus: &Corpus,
    candidates: &[SongId],
    context: &[ArtistId],
    setting: Setting,
) -> Vec<f64> {
    candidates
        .iter()
        .map(|&s| {
            let a = corpus.artist_of(s);
            let weight: u64 = context.iter().map(|&c| colloc.get(a, c)).sum();
            pop.base(corpus, s, setting) as f64 * weight as f64
        })
        .collect()
}
