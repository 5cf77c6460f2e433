//! Scores test queries with a method and aggregates the metrics of a split.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    cagh_scores, context_artists, poprank_scores, sagh_scores, CollocationMatrix, PopularityTable,
};
use crate::corpus::{Corpus, SongId};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::metrics::{
    auc, hit_rate_at_k, mean_scores, novelty_at_k, popularity_distribution, spread, EvalReport,
    UserRecommendations,
};
use crate::model::{ranking, TrainedModel};
use crate::splits::{Setting, SplitResult, TestCase, TrainingSet};

pub const DEFAULT_KNN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mtc,
    PopRank,
    Sagh,
    Cagh,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mtc, Method::PopRank, Method::Sagh, Method::Cagh];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mtc => "mtc",
            Method::PopRank => "poprank",
            Method::Sagh => "sagh",
            Method::Cagh => "cagh",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown method '{s}' (mtc, poprank, sagh, cagh)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfig {
    /// Cut-offs for HitRate and Novelty, ascending.
    pub ks: Vec<usize>,
    /// Neighbours averaged for cold users with attributes.
    pub knn: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20, 30, 50, 100],
            knn: DEFAULT_KNN,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidArgument(
                "K list must be non-empty and positive".into(),
            ));
        }
        if !self.ks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "K list must be strictly ascending".into(),
            ));
        }
        if self.knn == 0 {
            return Err(Error::InvalidArgument("knn must be >= 1".into()));
        }
        Ok(())
    }
}

/// What a method may rank for a split: held songs for cold songs, every song otherwise.
pub fn candidate_songs(training: &TrainingSet) -> Vec<SongId> {
    match training.setting {
        Setting::ColdSongs => training.held_songs(),
        _ => (0..training.n_songs()).map(SongId).collect(),
    }
}

/// Shared state for scoring the test queries of one split.
pub struct Evaluator<'a> {
    corpus: &'a Corpus,
    training: TrainingSet,
    candidates: Vec<SongId>,
    pop: PopularityTable,
    colloc: CollocationMatrix,
    x: Option<&'a FeatureMatrix<f64>>,
    x_candidates: Option<FeatureMatrix<f64>>,
    model: Option<&'a TrainedModel<f64>>,
    knn: usize,
}

impl<'a> Evaluator<'a> {
    /// `x` and `model` are required for the MTC method only.
    pub fn new(
        corpus: &'a Corpus,
        split: &SplitResult,
        x: Option<&'a FeatureMatrix<f64>>,
        model: Option<&'a TrainedModel<f64>>,
        knn: usize,
    ) -> Result<Self> {
        let training = split.training_set(corpus);
        let candidates = candidate_songs(&training);
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("no candidate songs".into()));
        }
        let pop = PopularityTable::from_training(corpus, &training);
        let colloc = CollocationMatrix::from_training(corpus, &training);
        let x_candidates = match (x, training.setting) {
            (Some(x), Setting::ColdSongs) => Some(x.select(&candidates)?),
            _ => None,
        };
        Ok(Self {
            corpus,
            training,
            candidates,
            pop,
            colloc,
            x,
            x_candidates,
            model,
            knn,
        })
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn candidates(&self) -> &[SongId] {
        &self.candidates
    }

    pub fn setting(&self) -> Setting {
        self.training.setting
    }

    /// Laplace-smoothed popularity over the candidates.
    pub fn candidate_popularity(&self) -> Vec<f64> {
        let setting = self.setting();
        let counts: Vec<u64> = self
            .candidates
            .iter()
            .map(|&s| self.pop.base(self.corpus, s, setting))
            .collect();
        popularity_distribution(&counts)
    }

    /// Scores of every candidate for one test query.
    pub fn score(&self, method: Method, case: &TestCase) -> Result<Vec<f64>> {
        let setting = self.setting();
        let c = self.corpus;
        match method {
            Method::PopRank => Ok(poprank_scores(&self.pop, c, &self.candidates, setting)),
            Method::Sagh => {
                let ctx = context_artists(c, &self.training, &self.pop, case);
                Ok(sagh_scores(&self.pop, c, &self.candidates, &ctx, setting))
            }
            Method::Cagh => {
                let ctx = context_artists(c, &self.training, &self.pop, case);
                Ok(cagh_scores(
                    &self.pop,
                    &self.colloc,
                    c,
                    &self.candidates,
                    &ctx,
                    setting,
                ))
            }
            Method::Mtc => {
                let (x, model) = match (self.x, self.model) {
                    (Some(x), Some(m)) => (x, m),
                    _ => {
                        return Err(Error::InvalidArgument(
                            "mtc needs features and a trained model".into(),
                        ))
                    }
                };
                let scores = match setting {
                    Setting::ColdPlaylists => model.score_cold_playlist(x, case.user)?,
                    Setting::ColdUsers if c.has_user_attributes() => {
                        let attrs: Vec<f64> = c
                            .user(case.user)
                            .attributes
                            .iter()
                            .map(|a| a.unwrap_or(0.0))
                            .collect();
                        model.score_cold_user(x, c, &self.training.users(), &attrs, self.knn)?
                    }
                    Setting::ColdUsers => model.score_cold_user_anonymous(x)?,
                    Setting::ColdSongs => {
                        let xc = self.x_candidates.as_ref().expect("built with features");
                        model.score_cold_song(xc, c, case.user, case.playlist)?
                    }
                };
                Ok(scores.to_vec())
            }
        }
    }

    /// Positive flags over the candidates.
    pub fn labels(&self, case: &TestCase) -> Vec<bool> {
        self.candidates
            .iter()
            .map(|s| case.positives.binary_search(s).is_ok())
            .collect()
    }

    pub fn evaluate(
        &self,
        method: Method,
        test: &[TestCase],
        cfg: &EvalConfig,
    ) -> Result<EvalReport> {
        cfg.validate()?;
        if test.is_empty() {
            return Err(Error::InvalidArgument("no test playlists".into()));
        }
        struct CaseResult {
            scores: Vec<f64>,
            order: Vec<usize>,
            truth: Vec<usize>,
            auc: Option<f64>,
        }
        let results: Vec<CaseResult> = test
            .par_iter()
            .map(|case| -> Result<CaseResult> {
                let scores = self.score(method, case)?;
                let labels = self.labels(case);
                let truth: Vec<usize> = (0..labels.len()).filter(|&j| labels[j]).collect();
                let auc = if truth.is_empty() || truth.len() == labels.len() {
                    None
                } else {
                    Some(auc(&scores, &labels)?)
                };
                let order = ranking(ArrayView1::from(&scores[..]));
                Ok(CaseResult {
                    scores,
                    order,
                    truth,
                    auc,
                })
            })
            .collect::<Result<_>>()?;

        let scored: Vec<(&TestCase, &CaseResult)> = test
            .iter()
            .zip(&results)
            .filter(|(_, r)| r.auc.is_some())
            .collect();
        if scored.is_empty() {
            return Err(Error::Data(
                "no test playlist has both positives and negatives among the candidates".into(),
            ));
        }
        let per_playlist_auc: Vec<f64> = scored
            .iter()
            .map(|(_, r)| r.auc.expect("filtered"))
            .collect();
        let mean_auc = per_playlist_auc.iter().sum::<f64>() / per_playlist_auc.len() as f64;

        let pop = self.candidate_popularity();
        let recs: Vec<UserRecommendations> = scored
            .iter()
            .map(|(case, r)| UserRecommendations {
                user: case.user,
                items: r.order.clone(),
            })
            .collect();
        let mut hitrate = BTreeMap::new();
        let mut novelty = BTreeMap::new();
        for &k in &cfg.ks {
            let mut hr = 0.0;
            for (_, r) in &scored {
                hr += hit_rate_at_k(&r.order, &r.truth, k)?;
            }
            hitrate.insert(k, hr / scored.len() as f64);
            novelty.insert(k, novelty_at_k(&recs, &pop, k)?);
        }
        let all: Vec<Vec<f64>> = scored.iter().map(|(_, r)| r.scores.clone()).collect();
        let spread = spread(&mean_scores(&all)?)?;
        Ok(EvalReport {
            method: method.to_string(),
            setting: self.setting().to_string(),
            n_test_playlists: scored.len(),
            n_skipped: test.len() - scored.len(),
            auc: mean_auc,
            hitrate,
            novelty,
            spread,
            per_playlist_auc,
        })
    }
}

/// Evaluates `method` on the test queries of `split`.
pub fn evaluate(
    method: Method,
    corpus: &Corpus,
    split: &SplitResult,
    x: Option<&FeatureMatrix<f64>>,
    model: Option<&TrainedModel<f64>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let ev = Evaluator::new(corpus, split, x, model, cfg.knn)?;
    ev.evaluate(method, &split.test, cfg)
}
