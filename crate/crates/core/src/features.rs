//! Song feature matrix assembly.
//!
//! Column order: metadata, genre one-hot, artist embedding, song popularity
//! (absent for cold songs), artist popularity, constant bias. Metadata,
//! embedding and popularity columns are standardised with statistics of the
//! training songs only; genre and bias columns are left as is.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{data_lines, parse_optional_number, read_text, Corpus, SongId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::splits::{Setting, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrigin {
    Metadata,
    GenreOnehot,
    ArtistEmbedding,
    SongPopularity,
    ArtistPopularity,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub origin: ColumnOrigin,
    /// Stored value is `(raw - shift) / scale`.
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn has_origin(&self, origin: ColumnOrigin) -> bool {
        self.columns.iter().any(|c| c.origin == origin)
    }

    pub fn bias_column(&self) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.origin == ColumnOrigin::Bias)
    }

    /// First 8 bytes of the SHA-256 of the JSON encoding, big-endian.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("schema serialises");
        let digest = Sha256::digest(&json);
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Dense song-by-feature matrix with its column schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    values: Array2<T>,
    schema: FeatureSchema,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(values: Array2<T>, schema: FeatureSchema) -> Result<Self> {
        if values.ncols() != schema.len() {
            return Err(Error::Dimension(format!(
                "{} columns but schema describes {}",
                values.ncols(),
                schema.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::Dimension(
                "feature matrix needs at least one column".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self { values, schema })
    }

    /// Wraps a raw matrix with an identity schema of metadata columns.
    pub fn from_raw(values: Array2<T>) -> Self {
        let schema = FeatureSchema {
            columns: (0..values.ncols())
                .map(|j| ColumnSpec {
                    name: format!("x{j}"),
                    origin: ColumnOrigin::Metadata,
                    shift: 0.0,
                    scale: 1.0,
                })
                .collect(),
        };
        Self { values, schema }
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, song: SongId) -> Result<ArrayView1<'_, T>> {
        if song.0 >= self.values.nrows() {
            return Err(Error::InvalidArgument(format!(
                "{song} out of range for {} rows",
                self.values.nrows()
            )));
        }
        Ok(self.values.row(song.0))
    }

    /// Matrix restricted to the given rows, in order.
    pub fn select(&self, songs: &[SongId]) -> Result<Self> {
        if let Some(s) = songs.iter().find(|s| s.0 >= self.n_rows()) {
            return Err(Error::InvalidArgument(format!("{s} out of range")));
        }
        let idx: Vec<usize> = songs.iter().map(|s| s.0).collect();
        Ok(Self {
            values: self.values.select(ndarray::Axis(0), &idx),
            schema: self.schema.clone(),
        })
    }

    /// Renders the matrix as CSV with a header row.
    pub fn to_csv(&self, corpus: &Corpus) -> String {
        let mut out = String::from("song_id");
        for c in &self.schema.columns {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for (m, row) in self.values.outer_iter().enumerate() {
            out.push_str(&corpus.song(SongId(m)).external_id);
            for v in row {
                out.push_str(&format!(",{:?}", v.to_f64_lossy()));
            }
            out.push('\n');
        }
        out
    }
}

/// `song_id,genre_label` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenreTable {
    labels: HashMap<String, String>,
}

impl GenreTable {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        Self {
            labels: pairs
                .into_iter()
                .map(|(a, b)| (a.into(), b.into()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut labels = HashMap::new();
        for (idx, (line, row)) in data_lines(&text).enumerate() {
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            if idx == 0 && fields.first() == Some(&"song_id") {
                continue;
            }
            if fields.len() != 2 || fields[0].is_empty() {
                return Err(Error::parse(path, line, "expected song_id,genre_label"));
            }
            if fields[1].is_empty() || fields[1] == "?" {
                continue;
            }
            if labels
                .insert(fields[0].to_string(), fields[1].to_string())
                .is_some()
            {
                return Err(Error::parse(
                    path,
                    line,
                    format!("duplicate song id {}", fields[0]),
                ));
            }
        }
        Ok(Self { labels })
    }

    pub fn label(&self, song_id: &str) -> Option<&str> {
        self.labels.get(song_id).map(String::as_str)
    }
}

/// Precomputed artist vectors: `artist_id,v1,...,vk`. A row with id `*`
/// is used for artists without their own row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
}

pub const EMBEDDING_FALLBACK_ID: &str = "*";

impl EmbeddingTable {
    pub fn new(rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Data("embedding table is empty".into()));
        }
        let mut map = HashMap::new();
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "embedding for {id} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if map.insert(id.clone(), v).is_some() {
                return Err(Error::Data(format!("duplicate embedding for {id}")));
            }
        }
        Ok(Self { dim, rows: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut rows = Vec::new();
        let mut dim = None;
        for (line, row) in data_lines(&text) {
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            let values = fields[1..]
                .iter()
                .map(|f| {
                    parse_optional_number(path, line, f)?
                        .ok_or_else(|| Error::parse(path, line, "missing embedding value"))
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::parse(
                        path,
                        line,
                        format!("embedding dimension mismatch: {} vs {d}", values.len()),
                    ))
                }
                _ => {}
            }
            rows.push((fields[0].to_string(), values));
        }
        Self::new(rows).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, artist: &str) -> Option<&[f64]> {
        self.rows
            .get(artist)
            .or_else(|| self.rows.get(EMBEDDING_FALLBACK_ID))
            .map(Vec::as_slice)
    }
}

/// Raw column before standardisation.
struct RawColumn {
    name: String,
    origin: ColumnOrigin,
    values: Vec<f64>,
    standardise: bool,
}

/// Builds the feature matrix for every corpus song.
///
/// Statistics (imputation means, standardisation, genre vocabulary,
/// popularity counts) come from the training playlists only.
pub fn build_features<T: Scalar>(
    corpus: &Corpus,
    training: &TrainingSet,
    genres: Option<&GenreTable>,
    embeddings: Option<&EmbeddingTable>,
) -> Result<FeatureMatrix<T>> {
    if training.playlists.is_empty() {
        return Err(Error::InvalidArgument(
            "training set has no playlists".into(),
        ));
    }
    if training.n_songs() != corpus.n_songs() {
        return Err(Error::Dimension(
            "training set does not match corpus".into(),
        ));
    }
    let m = corpus.n_songs();
    let playcount = training.song_playcounts();
    let train_songs: Vec<usize> = (0..m).filter(|&s| playcount[s] > 0).collect();
    if train_songs.is_empty() {
        return Err(Error::InvalidArgument("training set has no songs".into()));
    }
    let mut columns = Vec::new();

    for (j, name) in corpus.metadata_columns().iter().enumerate() {
        let raw: Vec<Option<f64>> = corpus.songs().iter().map(|s| s.metadata[j]).collect();
        let known: Vec<f64> = train_songs.iter().filter_map(|&s| raw[s]).collect();
        if known.is_empty() {
            return Err(Error::Data(format!(
                "metadata column {name} has no values among training songs"
            )));
        }
        let fill = known.iter().sum::<f64>() / known.len() as f64;
        columns.push(RawColumn {
            name: name.clone(),
            origin: ColumnOrigin::Metadata,
            values: raw.into_iter().map(|v| v.unwrap_or(fill)).collect(),
            standardise: true,
        });
    }

    if let Some(table) = genres {
        let song_labels: Vec<Option<&str>> = corpus
            .songs()
            .iter()
            .map(|s| table.label(&s.external_id))
            .collect();
        let vocab: BTreeSet<&str> = train_songs.iter().filter_map(|&s| song_labels[s]).collect();
        let vocab: Vec<&str> = vocab.into_iter().collect();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &s in &train_songs {
            if let Some(l) = song_labels[s] {
                *counts.entry(l).or_default() += 1;
            }
        }
        let labelled: usize = counts.values().sum();
        for g in &vocab {
            let mean = counts[g] as f64 / labelled as f64;
            let values = song_labels
                .iter()
                .map(|l| match l {
                    Some(l) if vocab.binary_search(l).is_ok() => (l == g) as u8 as f64,
                    _ => mean,
                })
                .collect();
            columns.push(RawColumn {
                name: format!("genre={g}"),
                origin: ColumnOrigin::GenreOnehot,
                values,
                standardise: false,
            });
        }
    }

    if let Some(table) = embeddings {
        let mut rows = Vec::with_capacity(m);
        for s in corpus.songs() {
            let artist = corpus.artist_name(s.artist);
            rows.push(table.get(artist).ok_or_else(|| {
                Error::Data(format!(
                    "no embedding for artist {artist} and no fallback row"
                ))
            })?);
        }
        for k in 0..table.dim() {
            columns.push(RawColumn {
                name: format!("artist_emb{k}"),
                origin: ColumnOrigin::ArtistEmbedding,
                values: rows.iter().map(|r| r[k]).collect(),
                standardise: true,
            });
        }
    }

    if training.setting != Setting::ColdSongs {
        columns.push(RawColumn {
            name: "song_popularity".into(),
            origin: ColumnOrigin::SongPopularity,
            values: playcount.iter().map(|&c| c as f64).collect(),
            standardise: true,
        });
    }
    let mut artist_count = vec![0usize; corpus.n_artists()];
    for (s, c) in playcount.iter().enumerate() {
        artist_count[corpus.artist_of(SongId(s)).0] += c;
    }
    columns.push(RawColumn {
        name: "artist_popularity".into(),
        origin: ColumnOrigin::ArtistPopularity,
        values: corpus
            .songs()
            .iter()
            .map(|s| artist_count[s.artist.0] as f64)
            .collect(),
        standardise: true,
    });
    columns.push(RawColumn {
        name: "bias".into(),
        origin: ColumnOrigin::Bias,
        values: vec![1.0; m],
        standardise: false,
    });

    let mut specs = Vec::with_capacity(columns.len());
    let mut values = Array2::<T>::zeros((m, columns.len()));
    for (j, col) in columns.into_iter().enumerate() {
        let (shift, scale) = if col.standardise {
            let n = train_songs.len() as f64;
            let mean = train_songs.iter().map(|&s| col.values[s]).sum::<f64>() / n;
            let var = train_songs
                .iter()
                .map(|&s| (col.values[s] - mean).powi(2))
                .sum::<f64>()
                / n;
            if var > 0.0 {
                (mean, var.sqrt())
            } else {
                (0.0, 1.0)
            }
        } else {
            (0.0, 1.0)
        };
        for (s, v) in col.values.iter().enumerate() {
            values[[s, j]] = T::of((v - shift) / scale);
        }
        specs.push(ColumnSpec {
            name: col.name,
            origin: col.origin,
            shift,
            scale,
        });
    }
    FeatureMatrix::new(values, FeatureSchema { columns: specs })
}

/// Row of the feature matrix for one song.
pub fn feature_row<T: Scalar>(x: &FeatureMatrix<T>, song: SongId) -> Result<ArrayView1<'_, T>> {
    x.row(song)
}
