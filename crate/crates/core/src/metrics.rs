//! Accuracy and beyond-accuracy metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::UserId;
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Fraction of the playlist's songs found in the first `k` recommendations.
/// `truth` must be sorted.
pub fn hit_rate_at_k(recommended: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    }
    let hits = recommended
        .iter()
        .take(k)
        .filter(|r| truth.binary_search(r).is_ok())
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Probability that a positive outscores a negative, ties counting one half.
/// `labels[j]` marks candidate `j` as positive.
pub fn auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs positives and negatives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // twice the number of correctly ordered pairs, so ties stay integral
    let mut twice_correct: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&r| labels[r]).count() as u128;
        let neg = group.len() as u128 - pos;
        twice_correct += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok((twice_correct as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Laplace-smoothed popularity mass `(c_m + 1) / (sum c + M)`.
pub fn popularity_distribution(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum::<u64>() + counts.len() as u64;
    counts
        .iter()
        .map(|&c| (c + 1) as f64 / total as f64)
        .collect()
}

/// One recommendation list of a test playlist.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecommendations {
    pub user: UserId,
    /// Candidate indices in rank order.
    pub items: Vec<usize>,
}

/// Mean over users of the mean over their test playlists of
/// `sum_{m in top K} -log2(pop_m) / K`.
pub fn novelty_at_k(recs: &[UserRecommendations], pop: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if recs.is_empty() {
        return Err(Error::InvalidArgument("no test playlists".into()));
    }
    let mut per_user: BTreeMap<UserId, (f64, usize)> = BTreeMap::new();
    for r in recs {
        let mut total = 0.0;
        for &m in r.items.iter().take(k) {
            let p = *pop.get(m).ok_or_else(|| {
                Error::InvalidArgument(format!("candidate {m} has no popularity"))
            })?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "popularity {p} outside (0, 1]"
                )));
            }
            total -= p.log2();
        }
        let e = per_user.entry(r.user).or_insert((0.0, 0));
        e.0 += total / k as f64;
        e.1 += 1;
    }
    let users = per_user.len() as f64;
    Ok(per_user.values().map(|(s, n)| s / *n as f64).sum::<f64>() / users)
}

/// Entropy (natural log) of `softmax(scores)`.
pub fn spread<T: Scalar>(scores: &[T]) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let lse = log_sum_exp(scores.iter().copied());
    let h = scores
        .iter()
        .map(|&s| {
            let log_p = s - lse;
            -log_p.exp() * log_p
        })
        .sum::<T>();
    Ok(h.max(T::zero()))
}

/// Element-wise mean of equally long score vectors.
pub fn mean_scores<T: Scalar>(all: &[Vec<T>]) -> Result<Vec<T>> {
    let first = all
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score vectors".into()))?;
    let mut acc = vec![T::zero(); first.len()];
    for v in all {
        if v.len() != acc.len() {
            return Err(Error::Dimension("score vectors differ in length".into()));
        }
        for (a, &s) in acc.iter_mut().zip(v) {
            *a += s;
        }
    }
    let n = T::of(all.len() as f64);
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Metric values of one method in one setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub setting: String,
    pub n_test_playlists: usize,
    /// Test playlists without negatives or positives among the candidates.
    pub n_skipped: usize,
    /// Macro-average of the per-playlist AUC.
    pub auc: f64,
    pub hitrate: BTreeMap<usize, f64>,
    pub novelty: BTreeMap<usize, f64>,
    pub spread: f64,
    pub per_playlist_auc: Vec<f64>,
}

impl EvalReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "method={}\nsetting={}\nn_test_playlists={}\nn_skipped={}\nauc={:?}\nspread={:?}\n",
            self.method, self.setting, self.n_test_playlists, self.n_skipped, self.auc, self.spread
        );
        for (k, v) in &self.hitrate {
            out.push_str(&format!("hitrate@{k}={v:?}\n"));
        }
        for (k, v) in &self.novelty {
            out.push_str(&format!("novelty@{k}={v:?}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}
