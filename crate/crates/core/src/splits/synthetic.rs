//! Planted-model corpus generator for desk-scale experiments.
//!
//! Users are drawn around a few taste clusters, so their attribute vectors
//! (a noisy cluster indicator) carry information about their weights. Songs
//! share feature structure with the other songs of their artist, and all
//! song feature vectors have the same norm. Each
//! playlist holds the top-L songs under its planted weights, with each
//! position swapped for a random song with probability `noise`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::corpus::{Corpus, PlaylistRecord, SongRecord, UserRecord};
use crate::error::{Error, Result};
use crate::features::{ColumnOrigin, ColumnSpec, FeatureMatrix, FeatureSchema};
use crate::losses::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_playlists: usize,
    pub n_songs: usize,
    /// Feature dimension including the trailing constant column.
    pub dim: usize,
    /// Probability that a playlist position holds a random song instead.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub n_clusters: usize,
    pub songs_per_artist: usize,
    /// Euclidean norm of every song's non-constant features.
    pub feature_norm: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_playlists: 200,
            n_songs: 500,
            dim: 20,
            noise: 0.1,
            min_len: 10,
            max_len: 30,
            n_clusters: 5,
            songs_per_artist: 5,
            feature_norm: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n_users == 0 || self.n_playlists < self.n_users {
            return bad("need at least one playlist per user");
        }
        if self.n_songs < 2 || self.n_songs > 2000 {
            return bad("song count must be in [2, 2000]");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2 (features plus constant)");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1]");
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len >= self.n_songs {
            return bad("playlist lengths must satisfy 1 <= min <= max < songs");
        }
        if !(self.feature_norm > 0.0 && self.feature_norm.is_finite()) {
            return bad("feature norm must be positive");
        }
        if self.n_clusters == 0 || self.songs_per_artist == 0 {
            return bad("clusters and songs per artist must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    /// Planted song features; the last column is the constant 1.0.
    pub features: FeatureMatrix<f64>,
    pub planted: ModelParams<f64>,
    /// Planted positives per playlist before label noise, as corpus song ids.
    pub planted_positives: Vec<Vec<usize>>,
    /// Songs dropped because no playlist selected them.
    pub n_pruned: usize,
}

impl SyntheticData {
    /// Writes songs, playlists and users files into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.write_files(
            &dir.join("songs.csv"),
            &dir.join("playlists.csv"),
            Some(&dir.join("users.csv")),
        )
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = |s: f64| Normal::new(0.0, s).expect("positive std");
    let (u, n, m, d) = (spec.n_users, spec.n_playlists, spec.n_songs, spec.dim);
    let k = d - 1;

    let centers = Array2::from_shape_fn((spec.n_clusters, k), |_| std(1.5).sample(&mut rng));
    let cluster: Vec<usize> = (0..u).map(|i| i % spec.n_clusters).collect();
    let mut planted = ModelParams::<f64>::zeros(u, n, d);
    {
        let mut alpha = planted.alpha_mut();
        for (i, &c) in cluster.iter().enumerate() {
            for j in 0..k {
                alpha[[i, j]] = centers[[c, j]] + std(0.3).sample(&mut rng);
            }
        }
    }
    {
        let mut beta = planted.beta_mut();
        for v in beta.iter_mut() {
            *v = std(0.3).sample(&mut rng);
        }
    }
    {
        let mut mu = planted.mu_mut();
        for j in 0..k {
            mu[j] = std(0.5).sample(&mut rng);
        }
    }

    let n_artists = m.div_ceil(spec.songs_per_artist);
    let artist_centers = Array2::from_shape_fn((n_artists, k), |_| std(1.0).sample(&mut rng));
    let artist_of: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_artists)).collect();
    let mut x = Array2::<f64>::ones((m, d));
    for s in 0..m {
        for j in 0..k {
            x[[s, j]] = 0.6 * artist_centers[[artist_of[s], j]] + 0.8 * std(1.0).sample(&mut rng);
        }
        let norm = (0..k).map(|j| x[[s, j]] * x[[s, j]]).sum::<f64>().sqrt();
        for j in 0..k {
            x[[s, j]] *= spec.feature_norm / norm;
        }
    }
    let years: Vec<i32> = (0..m).map(|_| 1980 + rng.random_range(0..40)).collect();

    // each user owns at least one playlist
    let owner: Vec<usize> = (0..n)
        .map(|i| if i < u { i } else { rng.random_range(0..u) })
        .collect();
    let mut planted_positives = Vec::with_capacity(n);
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let w: Array1<f64> = &planted.alpha().row(owner[i]) + &planted.beta().row(i) + planted.mu();
        let scores = x.dot(&w);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let top: Vec<usize> = order[..len].to_vec();
        let mut chosen = top.clone();
        for slot in 0..len {
            if rng.random_bool(spec.noise) {
                let outside: Vec<usize> = order[len..]
                    .iter()
                    .copied()
                    .filter(|c| !chosen.contains(c))
                    .collect();
                if !outside.is_empty() {
                    chosen[slot] = outside[rng.random_range(0..outside.len())];
                }
            }
        }
        chosen.sort_unstable();
        let mut top = top;
        top.sort_unstable();
        planted_positives.push(top);
        members.push(chosen);
    }

    let mut covered = vec![false; m];
    for ms in &members {
        for &s in ms {
            covered[s] = true;
        }
    }
    let kept: Vec<usize> = (0..m).filter(|&s| covered[s]).collect();
    let mut new_index = vec![usize::MAX; m];
    for (new, &old) in kept.iter().enumerate() {
        new_index[old] = new;
    }
    let remap = |v: &Vec<usize>| v.iter().map(|&s| new_index[s]).collect::<Vec<_>>();
    let planted_positives: Vec<Vec<usize>> = planted_positives
        .iter()
        .map(|p| remap(&p.iter().copied().filter(|&s| covered[s]).collect()))
        .collect();
    let members: Vec<Vec<usize>> = members.iter().map(remap).collect();
    let x = x.select(ndarray::Axis(0), &kept);

    let song_name = |s: usize| format!("s{s:05}");
    let songs = kept
        .iter()
        .enumerate()
        .map(|(new, &old)| SongRecord {
            song_id: song_name(new),
            artist_id: format!("a{:04}", artist_of[old]),
            release_year: years[old],
            metadata: (0..k).map(|j| Some(x[[new, j]])).collect(),
        })
        .collect();
    let playlists = members
        .iter()
        .enumerate()
        .map(|(i, ms)| PlaylistRecord {
            playlist_id: format!("p{i:05}"),
            user_id: format!("u{:04}", owner[i]),
            song_ids: ms.iter().map(|&s| song_name(s)).collect(),
            line: 0,
        })
        .collect();
    let n_attr = spec.n_clusters + 3;
    let users = (0..u)
        .map(|i| UserRecord {
            user_id: format!("u{i:04}"),
            attributes: (0..n_attr)
                .map(|a| {
                    let signal = if a == cluster[i] { 1.0 } else { 0.0 };
                    Some(signal + std(0.3).sample(&mut rng))
                })
                .collect(),
        })
        .collect();
    let corpus = Corpus::from_records(
        (0..k).map(|j| format!("f{j}")).collect(),
        songs,
        playlists,
        Some(((0..n_attr).map(|a| format!("attr{a}")).collect(), users)),
        Path::new("<synthetic>"),
    )?;

    let mut columns: Vec<ColumnSpec> = (0..k)
        .map(|j| ColumnSpec {
            name: format!("f{j}"),
            origin: ColumnOrigin::Metadata,
            shift: 0.0,
            scale: 1.0,
        })
        .collect();
    columns.push(ColumnSpec {
        name: "bias".into(),
        origin: ColumnOrigin::Bias,
        shift: 0.0,
        scale: 1.0,
    });
    let features = FeatureMatrix::new(x, FeatureSchema { columns })?;
    Ok(SyntheticData {
        corpus,
        features,
        planted,
        planted_positives,
        n_pruned: m - kept.len(),
    })
}
