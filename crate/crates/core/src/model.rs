//! Multitask classification model: training, cold-start scoring rules,
//! recommendation lists and the binary model file.

use std::cell::Cell;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PlaylistId, UserId};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::losses::{mtc_risk_grad, regulariser, Hyperparams, ModelParams, Problem};
use crate::owlqn::{minimize, OwlqnConfig, Termination};
use crate::scalar::Scalar;
use crate::splits::TrainingSet;

const MAGIC: &[u8; 8] = b"MTCMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub objective: f64,
    pub initial_objective: f64,
    pub pg_norm: f64,
    /// Scores clamped across all objective evaluations.
    pub clamped_scores: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub theta: ModelParams<T>,
    pub hp: Hyperparams,
    pub schema_hash: u64,
    /// Rows of the feature matrix the model was trained with.
    pub n_songs: usize,
    /// `None` for models read back from disk.
    pub summary: Option<TrainingSummary>,
}

/// Minimises regulariser plus classification risk over the training playlists.
/// Parameters start at zero; the problem is convex.
pub fn train<T: Scalar>(
    training: &TrainingSet,
    x: &FeatureMatrix<T>,
    n_users: usize,
    n_playlists: usize,
    hp: &Hyperparams,
    cfg: &OwlqnConfig,
) -> Result<TrainedModel<T>> {
    hp.validate()?;
    let problem = Problem::from_training(training, x, n_users, n_playlists)?;
    let (theta, summary) = fit(&problem, hp, cfg)?;
    Ok(TrainedModel {
        theta,
        hp: *hp,
        schema_hash: x.schema().hash(),
        n_songs: x.n_rows(),
        summary: Some(summary),
    })
}

/// Fits parameters on an explicit problem.
pub fn fit<T: Scalar>(
    problem: &Problem<T>,
    hp: &Hyperparams,
    cfg: &OwlqnConfig,
) -> Result<(ModelParams<T>, TrainingSummary)> {
    hp.validate()?;
    let (u, n, d) = (problem.n_users(), problem.n_playlists(), problem.dim());
    let theta0 = ModelParams::<T>::zeros(u, n, d);
    let l1 = regulariser(&theta0, hp)?.l1_weights;
    let p = T::of(hp.p);
    let clamped = Cell::new(0usize);
    let objective = |flat: &Array1<T>| -> Result<(T, Array1<T>)> {
        let theta = ModelParams::from_flat(u, n, d, flat.clone())?;
        let (risk, grad) = mtc_risk_grad(&theta, problem, p)?;
        let reg = regulariser(&theta, hp)?;
        clamped.set(clamped.get() + risk.clamped);
        Ok((
            risk.total + reg.smooth_value,
            grad.into_flat() + reg.smooth_grad.flat(),
        ))
    };
    let report = minimize(objective, &l1, theta0.into_flat(), cfg)?;
    let summary = TrainingSummary {
        iterations: report.iterations,
        evaluations: report.evaluations,
        termination: report.termination,
        objective: report.value.to_f64_lossy(),
        initial_objective: report.trace[0].to_f64_lossy(),
        pg_norm: report.pg_norm.to_f64_lossy(),
        clamped_scores: clamped.get(),
    };
    Ok((ModelParams::from_flat(u, n, d, report.x)?, summary))
}

impl<T: Scalar> TrainedModel<T> {
    fn check_features(&self, x: &FeatureMatrix<T>) -> Result<()> {
        let found = x.schema().hash();
        if found != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: self.schema_hash,
                found,
            });
        }
        if x.dim() != self.theta.dim() {
            return Err(Error::Dimension(format!(
                "features have {} columns, model {}",
                x.dim(),
                self.theta.dim()
            )));
        }
        Ok(())
    }

    fn check_user(&self, u: UserId) -> Result<()> {
        if u.0 >= self.theta.n_users() {
            return Err(Error::InvalidArgument(format!("unknown {u}")));
        }
        Ok(())
    }

    fn scores_with(&self, x: &FeatureMatrix<T>, w: &Array1<T>) -> Result<Array1<T>> {
        self.check_features(x)?;
        Ok(x.values().dot(w))
    }

    /// New playlist of a known user: `(alpha_u + mu) . x_m`.
    pub fn score_cold_playlist(&self, x: &FeatureMatrix<T>, u: UserId) -> Result<Array1<T>> {
        self.check_user(u)?;
        let w = &self.theta.alpha().row(u.0) + &self.theta.mu();
        self.scores_with(x, &w)
    }

    /// New user with attributes: mean user weights of the `k` training users
    /// with the highest cosine similarity (ties by ascending id), plus `mu`.
    pub fn score_cold_user(
        &self,
        x: &FeatureMatrix<T>,
        corpus: &Corpus,
        candidates: &[UserId],
        attrs: &[f64],
        k: usize,
    ) -> Result<Array1<T>> {
        let neighbours = nearest_users(corpus, candidates, attrs, k)?;
        for u in &neighbours {
            self.check_user(*u)?;
        }
        let mut w = Array1::<T>::zeros(self.theta.dim());
        for u in &neighbours {
            w += &self.theta.alpha().row(u.0);
        }
        w /= T::of(neighbours.len() as f64);
        w += &self.theta.mu();
        self.scores_with(x, &w)
    }

    /// New user without attributes: `mu . x_m`.
    pub fn score_cold_user_anonymous(&self, x: &FeatureMatrix<T>) -> Result<Array1<T>> {
        self.scores_with(x, &self.theta.mu().to_owned())
    }

    /// New songs for a known playlist `i` of user `u`: `(alpha_u + beta_i + mu) . x`.
    pub fn score_cold_song(
        &self,
        x_new: &FeatureMatrix<T>,
        corpus: &Corpus,
        u: UserId,
        i: PlaylistId,
    ) -> Result<Array1<T>> {
        if i.0 >= corpus.n_playlists() || corpus.playlist(i).owner != u {
            return Err(Error::InvalidArgument(format!("{i} is not owned by {u}")));
        }
        let w = self.theta.combined(u, i)?;
        self.scores_with(x_new, &w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Header then row-major alpha, beta, mu as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.theta;
        let mut out = Vec::with_capacity(80 + t.flat().len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.n_songs, t.n_playlists(), t.n_users(), t.dim()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in [self.hp.lambda1, self.hp.lambda2, self.hp.lambda3, self.hp.p] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.schema_hash.to_le_bytes());
        for v in t.flat() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let n_songs = r.u64()? as usize;
        let n = r.u64()? as usize;
        let u = r.u64()? as usize;
        let d = r.u64()? as usize;
        let hp = Hyperparams {
            lambda1: r.f64()?,
            lambda2: r.f64()?,
            lambda3: r.f64()?,
            p: r.f64()?,
        };
        let schema_hash = r.u64()?;
        let len = u
            .checked_add(n)
            .and_then(|v| v.checked_add(1))
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if bytes.len() - r.pos != len * 8 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                len * 8,
                bytes.len() - r.pos
            )));
        }
        let mut flat = Array1::<T>::zeros(len);
        for v in flat.iter_mut() {
            *v = T::of(r.f64()?);
        }
        Ok(Self {
            theta: ModelParams::from_flat(u, n, d, flat)?,
            hp,
            schema_hash,
            n_songs,
            summary: None,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated model file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` candidates most cosine-similar to `attrs`; missing attributes count as 0.
pub fn nearest_users(
    corpus: &Corpus,
    candidates: &[UserId],
    attrs: &[f64],
    k: usize,
) -> Result<Vec<UserId>> {
    if !corpus.has_user_attributes() {
        return Err(Error::InvalidArgument(
            "no user attributes available; use the anonymous cold-user scorer".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if attrs.len() != corpus.user_attribute_columns().len() {
        return Err(Error::Dimension(format!(
            "{} attributes given, corpus has {}",
            attrs.len(),
            corpus.user_attribute_columns().len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate neighbours".into()));
    }
    let mut sims: Vec<(f64, UserId)> = candidates
        .iter()
        .map(|&u| {
            let v: Vec<f64> = corpus
                .user(u)
                .attributes
                .iter()
                .map(|a| a.unwrap_or(0.0))
                .collect();
            (cosine(attrs, &v), u)
        })
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(sims.into_iter().take(k).map(|(_, u)| u).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendMode {
    TopK,
    /// K distinct items drawn without replacement with softmax(score) probabilities.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation<T> {
    /// `(candidate index, score)` in recommendation order.
    pub items: Vec<(usize, T)>,
    pub mode: RecommendMode,
}

impl<T> Recommendation<T> {
    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|(i, _)| *i).collect()
    }
}

/// Candidate indices sorted by score descending, ties by ascending index.
pub fn ranking<T: Scalar>(scores: ArrayView1<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn recommend<T: Scalar>(
    scores: ArrayView1<T>,
    k: usize,
    mode: RecommendMode,
    seed: u64,
) -> Result<Recommendation<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} exceeds {} candidates",
            scores.len()
        )));
    }
    let order = match mode {
        RecommendMode::TopK => ranking(scores),
        RecommendMode::Sampled => {
            // Gumbel-top-k: sorting score + Gumbel noise draws without
            // replacement from the softmax distribution
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys: Array1<f64> = scores.mapv(|s| {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                s.to_f64_lossy() - (-u.ln()).ln()
            });
            ranking(keys.view())
        }
    };
    Ok(Recommendation {
        items: order.into_iter().take(k).map(|i| (i, scores[i])).collect(),
        mode,
    })
}

/// Picks the hyperparameters with the highest validation score (first wins ties).
pub fn grid_search<F>(grid: &[Hyperparams], mut evaluate: F) -> Result<(Hyperparams, f64)>
where
    F: FnMut(&Hyperparams) -> Result<f64>,
{
    let mut best: Option<(Hyperparams, f64)> = None;
    for hp in grid {
        hp.validate()?;
        let score = evaluate(hp)?;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((*hp, score));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty hyperparameter grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn model(
        alpha: Array2<f64>,
        beta: Array2<f64>,
        mu: Array1<f64>,
        x: &FeatureMatrix<f64>,
    ) -> TrainedModel<f64> {
        TrainedModel {
            theta: ModelParams::from_parts(alpha.view(), beta.view(), mu.view()).unwrap(),
            hp: Hyperparams::default(),
            schema_hash: x.schema().hash(),
            n_songs: x.n_rows(),
            summary: None,
        }
    }

    fn two_user_corpus() -> Corpus {
        use crate::corpus::{PlaylistRecord, SongRecord, UserRecord};
        let songs = vec![SongRecord {
            song_id: "s".into(),
            artist_id: "a".into(),
            release_year: 1,
            metadata: vec![],
        }];
        let pl = |p: &str, u: &str| PlaylistRecord {
            playlist_id: p.into(),
            user_id: u.into(),
            song_ids: vec!["s".into()],
            line: 0,
        };
        let users = vec![
            UserRecord {
                user_id: "u0".into(),
                attributes: vec![Some(1.0), Some(0.0)],
            },
            UserRecord {
                user_id: "u1".into(),
                attributes: vec![Some(0.0), Some(1.0)],
            },
        ];
        Corpus::from_records(
            vec![],
            songs,
            vec![pl("p0", "u0"), pl("p1", "u1")],
            Some((vec!["a".into(), "b".into()], users)),
            Path::new("t"),
        )
        .unwrap()
    }

    #[test]
    fn cold_playlist_scores() {
        let x = FeatureMatrix::from_raw(array![[2.0, 3.0]]);
        let m = model(array![[1.0, 0.0]], array![[7.0, 7.0]], array![0.0, 1.0], &x);
        assert_eq!(m.score_cold_playlist(&x, UserId(0)).unwrap()[0], 5.0);
        let m2 = model(
            array![[1.0, 0.0]],
            array![[-3.0, 1.0]],
            array![0.0, 1.0],
            &x,
        );
        assert_eq!(
            m.score_cold_playlist(&x, UserId(0)).unwrap(),
            m2.score_cold_playlist(&x, UserId(0)).unwrap()
        );
        let cancel = model(
            array![[1.0, -2.0]],
            array![[1.0, 1.0]],
            array![-1.0, 2.0],
            &x,
        );
        assert_eq!(cancel.score_cold_playlist(&x, UserId(0)).unwrap()[0], 0.0);
        assert!(m.score_cold_playlist(&x, UserId(3)).is_err());
    }

    #[test]
    fn cold_user_scores() {
        let c = two_user_corpus();
        let x = FeatureMatrix::from_raw(array![[1.0, 1.0]]);
        let m = model(
            array![[1.0, 0.0], [0.0, 1.0]],
            Array2::zeros((2, 2)),
            array![1.0, 1.0],
            &x,
        );
        let users = [UserId(0), UserId(1)];
        assert_eq!(
            m.score_cold_user(&x, &c, &users, &[0.5, 0.5], 2).unwrap()[0],
            3.0
        );
        // k = 1 reduces to the neighbour's cold-playlist scores
        let one = m.score_cold_user(&x, &c, &users, &[0.2, 0.9], 1).unwrap();
        assert_eq!(one, m.score_cold_playlist(&x, UserId(1)).unwrap());
        assert_eq!(
            nearest_users(&c, &users, &[1.0, 0.0], 1).unwrap(),
            vec![UserId(0)]
        );
        assert!(m.score_cold_user(&x, &c, &users, &[1.0], 1).is_err());
        assert!(m.score_cold_user(&x, &c, &users, &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn anonymous_and_cold_song_scores() {
        let x = FeatureMatrix::from_raw(array![[1.0, 1.0], [3.0, 1.0]]);
        let c = two_user_corpus();
        let m = model(
            array![[1.0, 0.0], [0.0, 0.0]],
            array![[0.0, 1.0], [0.0, 0.0]],
            array![1.0, 1.0],
            &x,
        );
        assert_eq!(
            m.score_cold_song(&x, &c, UserId(0), PlaylistId(0)).unwrap()[0],
            4.0
        );
        assert!(m.score_cold_song(&x, &c, UserId(1), PlaylistId(0)).is_err());
        let bias_only = model(
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            array![0.0, 2.0],
            &x,
        );
        let s = bias_only.score_cold_user_anonymous(&x).unwrap();
        assert_eq!(s[0], s[1]);
        let zero = model(
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            array![0.0, 0.0],
            &x,
        );
        assert!(zero
            .score_cold_user_anonymous(&x)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        // beta = 0 reduces the cold-song rule to the cold-playlist rule
        let nb = model(
            array![[1.0, 2.0], [0.0, 0.0]],
            Array2::zeros((2, 2)),
            array![0.5, 0.0],
            &x,
        );
        assert_eq!(
            nb.score_cold_song(&x, &c, UserId(0), PlaylistId(0))
                .unwrap(),
            nb.score_cold_playlist(&x, UserId(0)).unwrap()
        );
    }

    #[test]
    fn recommend_top_k_and_errors() {
        let s = array![3.0, 1.0, 2.0];
        let r = recommend(s.view(), 2, RecommendMode::TopK, 0).unwrap();
        assert_eq!(r.indices(), vec![0, 2]);
        let all = recommend(s.view(), 3, RecommendMode::Sampled, 4).unwrap();
        let mut idx = all.indices();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(recommend(s.view(), 0, RecommendMode::TopK, 0).is_err());
        assert!(recommend(s.view(), 4, RecommendMode::TopK, 0).is_err());
        let ties = array![1.0, 1.0, 1.0];
        assert_eq!(
            recommend(ties.view(), 2, RecommendMode::TopK, 0)
                .unwrap()
                .indices(),
            vec![0, 1]
        );
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let x = FeatureMatrix::from_raw(array![[1.0, 0.1]]);
        let m = model(
            array![[0.1, -0.2]],
            array![[1e-300, 3.5]],
            array![f64::MIN_POSITIVE, -0.0],
            &x,
        );
        let bytes = m.to_bytes();
        let back = TrainedModel::<f64>::from_bytes(&bytes).unwrap();
        let bits = |t: &ModelParams<f64>| t.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.theta), bits(&m.theta));
        assert_eq!(back.schema_hash, m.schema_hash);
        assert_eq!(back.hp, m.hp);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TrainedModel::<f64>::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(TrainedModel::<f64>::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(TrainedModel::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn schema_mismatch_is_explicit() {
        let x = FeatureMatrix::from_raw(array![[1.0, 0.1]]);
        let m = model(
            array![[0.1, -0.2]],
            array![[0.0, 0.0]],
            array![0.0, 0.0],
            &x,
        );
        let mut schema = x.schema().clone();
        schema.columns[0].shift = 0.5;
        let other = FeatureMatrix::new(x.values().to_owned(), schema).unwrap();
        assert!(matches!(
            m.score_cold_playlist(&other, UserId(0)),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn grid_search_picks_best() {
        let grid = [
            Hyperparams::unregularised(1.0),
            Hyperparams::unregularised(2.0),
            Hyperparams::unregularised(3.0),
        ];
        let (best, score) = grid_search(&grid, |hp| Ok(-(hp.p - 2.0).powi(2))).unwrap();
        assert_eq!(best.p, 2.0);
        assert_eq!(score, 0.0);
        assert!(grid_search(&[], |_| Ok(0.0)).is_err());
    }
}
