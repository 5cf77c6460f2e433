//! Risk functions for the multitask linear scorer
//! `f(m, u, i) = (alpha_u + beta_i + mu) . x_m`.
//!
//! * [`bottom_push_risk`]: fraction of negatives scored at or above the
//!   lowest scored positive of a playlist.
//! * [`rank_risk_surrogate`]: the exponential upper bound of the above.
//! * [`rank_risk_lse`]: the surrogate with the minimum over positives replaced
//!   by a soft minimum of sharpness `p`.
//! * [`mtc_risk`] / [`mtc_risk_grad`]: the classification risk whose
//!   minimisers also minimise [`rank_risk_lse`]; this is what training uses.
//!
//! All sums of exponentials are accumulated in the log domain with the
//! maximum shifted out. Scores are clamped to `[-SCORE_CLAMP, SCORE_CLAMP]`
//! before exponentiation; a clamped score contributes no gradient and is
//! counted in [`RiskBreakdown::clamped`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Membership, PlaylistId, UserId};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::scalar::{log_sum_exp, Scalar};
use crate::splits::TrainingSet;

pub const SCORE_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub p: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-4,
            lambda3: 1e-4,
            p: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn unregularised(p: f64) -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.p.is_finite() || self.p <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "p must be finite and > 0, got {}",
                self.p
            )));
        }
        Ok(())
    }
}

/// User weights, playlist weights and shared weights stored contiguously
/// (alpha row-major, then beta row-major, then mu) so the optimiser can work
/// on the flat vector directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    n_users: usize,
    n_playlists: usize,
    dim: usize,
    data: Array1<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(n_users: usize, n_playlists: usize, dim: usize) -> Self {
        Self {
            n_users,
            n_playlists,
            dim,
            data: Array1::zeros((n_users + n_playlists + 1) * dim),
        }
    }

    pub fn from_flat(
        n_users: usize,
        n_playlists: usize,
        dim: usize,
        data: Array1<T>,
    ) -> Result<Self> {
        let expected = (n_users + n_playlists + 1) * dim;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            n_users,
            n_playlists,
            dim,
            data,
        })
    }

    /// Assembles parameters from the three blocks.
    pub fn from_parts(
        alpha: ArrayView2<T>,
        beta: ArrayView2<T>,
        mu: ArrayView1<T>,
    ) -> Result<Self> {
        let dim = mu.len();
        if alpha.ncols() != dim || beta.ncols() != dim {
            return Err(Error::Dimension(format!(
                "alpha has {} columns, beta {}, mu {}",
                alpha.ncols(),
                beta.ncols(),
                dim
            )));
        }
        let mut p = Self::zeros(alpha.nrows(), beta.nrows(), dim);
        p.alpha_mut().assign(&alpha);
        p.beta_mut().assign(&beta);
        p.mu_mut().assign(&mu);
        Ok(p)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_playlists(&self) -> usize {
        self.n_playlists
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn flat(&self) -> &Array1<T> {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut Array1<T> {
        &mut self.data
    }

    pub fn into_flat(self) -> Array1<T> {
        self.data
    }

    fn beta_offset(&self) -> usize {
        self.n_users * self.dim
    }

    fn mu_offset(&self) -> usize {
        (self.n_users + self.n_playlists) * self.dim
    }

    pub fn alpha(&self) -> ArrayView2<'_, T> {
        self.data
            .slice(s![..self.beta_offset()])
            .into_shape_with_order((self.n_users, self.dim))
            .expect("contiguous")
    }

    pub fn beta(&self) -> ArrayView2<'_, T> {
        self.data
            .slice(s![self.beta_offset()..self.mu_offset()])
            .into_shape_with_order((self.n_playlists, self.dim))
            .expect("contiguous")
    }

    pub fn mu(&self) -> ArrayView1<'_, T> {
        self.data.slice(s![self.mu_offset()..])
    }

    pub fn alpha_mut(&mut self) -> ArrayViewMut2<'_, T> {
        let (end, u, d) = (self.beta_offset(), self.n_users, self.dim);
        self.data
            .slice_mut(s![..end])
            .into_shape_with_order((u, d))
            .expect("contiguous")
    }

    pub fn beta_mut(&mut self) -> ArrayViewMut2<'_, T> {
        let (start, end, n, d) = (
            self.beta_offset(),
            self.mu_offset(),
            self.n_playlists,
            self.dim,
        );
        self.data
            .slice_mut(s![start..end])
            .into_shape_with_order((n, d))
            .expect("contiguous")
    }

    pub fn mu_mut(&mut self) -> ArrayViewMut1<'_, T> {
        let start = self.mu_offset();
        self.data.slice_mut(s![start..])
    }

    /// `alpha_u + beta_i + mu`.
    pub fn combined(&self, user: UserId, playlist: PlaylistId) -> Result<Array1<T>> {
        self.check_ids(user, playlist)?;
        Ok(&self.alpha().row(user.0) + &self.beta().row(playlist.0) + self.mu())
    }

    fn check_ids(&self, user: UserId, playlist: PlaylistId) -> Result<()> {
        if user.0 >= self.n_users || playlist.0 >= self.n_playlists {
            return Err(Error::InvalidArgument(format!(
                "{user}/{playlist} out of range ({} users, {} playlists)",
                self.n_users, self.n_playlists
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One playlist's labels in the row space of a [`Problem`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaylistTask {
    pub user: UserId,
    pub playlist: PlaylistId,
    /// Sorted row indices of the positive songs.
    pub positives: Vec<usize>,
}

/// Feature rows of the candidate songs plus the labelled playlists.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    features: Array2<T>,
    tasks: Vec<PlaylistTask>,
    n_users: usize,
    n_playlists: usize,
}

impl<T: Scalar> Problem<T> {
    pub fn new(
        features: Array2<T>,
        tasks: Vec<PlaylistTask>,
        n_users: usize,
        n_playlists: usize,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("problem has no playlists".into()));
        }
        let m = features.nrows();
        for t in &tasks {
            if t.user.0 >= n_users || t.playlist.0 >= n_playlists {
                return Err(Error::InvalidArgument(format!(
                    "{}/{} out of range",
                    t.user, t.playlist
                )));
            }
            if t.positives.is_empty() || t.positives.len() >= m {
                return Err(Error::InvalidArgument(format!(
                    "{} needs at least one positive and one negative ({} of {m})",
                    t.playlist,
                    t.positives.len()
                )));
            }
            if t.positives.windows(2).any(|w| w[0] >= w[1]) || *t.positives.last().unwrap() >= m {
                return Err(Error::InvalidArgument(format!(
                    "{} positives must be sorted, unique and < {m}",
                    t.playlist
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            tasks,
            n_users,
            n_playlists,
        })
    }

    /// Problem over the songs visible in `training`, one task per training
    /// playlist. Parameter dimensions follow the full corpus.
    pub fn from_training(
        training: &TrainingSet,
        x: &FeatureMatrix<T>,
        n_users: usize,
        n_playlists: usize,
    ) -> Result<Self> {
        if x.n_rows() != training.n_songs() {
            return Err(Error::Dimension(format!(
                "feature matrix has {} rows, corpus has {} songs",
                x.n_rows(),
                training.n_songs()
            )));
        }
        let visible = training.visible_songs();
        let mut row_of = vec![usize::MAX; training.n_songs()];
        for (r, s) in visible.iter().enumerate() {
            row_of[s.0] = r;
        }
        let features = x.values().select(
            ndarray::Axis(0),
            &visible.iter().map(|s| s.0).collect::<Vec<_>>(),
        );
        let tasks = training
            .playlists
            .iter()
            .map(|p| PlaylistTask {
                user: p.owner,
                playlist: p.id,
                positives: p.members.iter().map(|m| row_of[m.0]).collect(),
            })
            .collect();
        Self::new(features, tasks, n_users, n_playlists)
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn tasks(&self) -> &[PlaylistTask] {
        &self.tasks
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_playlists(&self) -> usize {
        self.n_playlists
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_songs(&self) -> usize {
        self.features.nrows()
    }

    pub fn membership(&self, task: &PlaylistTask) -> Membership {
        Membership {
            positives: task
                .positives
                .iter()
                .map(|&r| crate::corpus::SongId(r))
                .collect(),
            n_songs: self.n_songs(),
        }
    }

    fn check_params(&self, theta: &ModelParams<T>) -> Result<()> {
        if theta.n_users != self.n_users
            || theta.n_playlists != self.n_playlists
            || theta.dim != self.dim()
        {
            return Err(Error::Dimension(format!(
                "parameters are {}x{}x{}, problem is {}x{}x{}",
                theta.n_users,
                theta.n_playlists,
                theta.dim,
                self.n_users,
                self.n_playlists,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Raw scores of every row for one task.
    pub fn scores(&self, theta: &ModelParams<T>, task: &PlaylistTask) -> Result<Array1<T>> {
        let w = theta.combined(task.user, task.playlist)?;
        Ok(self.features.dot(&w))
    }
}

/// Per-playlist risk values and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskBreakdown<T> {
    pub total: T,
    pub per_playlist: Vec<T>,
    /// Number of scores clamped during the evaluation.
    pub clamped: usize,
}

impl<T: Scalar> RiskBreakdown<T> {
    fn from_terms(terms: Vec<(T, usize)>) -> Self {
        let n = T::of(terms.len() as f64);
        let mut total = T::zero();
        let mut clamped = 0;
        let mut per_playlist = Vec::with_capacity(terms.len());
        for (v, c) in terms {
            total += v;
            clamped += c;
            per_playlist.push(v);
        }
        Self {
            total: total / n,
            per_playlist,
            clamped,
        }
    }
}

/// Clamped score and whether it was clamped.
fn clamp<T: Scalar>(s: T) -> (T, bool) {
    let c = T::of(SCORE_CLAMP);
    if s > c {
        (c, true)
    } else if s < -c {
        (-c, true)
    } else if s.is_nan() {
        (s, true)
    } else {
        (s, false)
    }
}

/// Scores of one task split into positives and negatives, post clamping.
struct Split<T> {
    scores: Vec<T>,
    clamped: Vec<bool>,
    is_pos: Vec<bool>,
    n_clamped: usize,
}

impl<T: Scalar> Split<T> {
    fn new(problem: &Problem<T>, theta: &ModelParams<T>, task: &PlaylistTask) -> Result<Self> {
        let raw = problem.scores(theta, task)?;
        let mut is_pos = vec![false; raw.len()];
        for &r in &task.positives {
            is_pos[r] = true;
        }
        let mut n_clamped = 0;
        let mut scores = Vec::with_capacity(raw.len());
        let mut clamped = Vec::with_capacity(raw.len());
        for &s in raw.iter() {
            if s.is_nan() {
                return Err(Error::Overflow(format!(
                    "score of {} is NaN",
                    task.playlist
                )));
            }
            let (v, c) = clamp(s);
            n_clamped += c as usize;
            scores.push(v);
            clamped.push(c);
        }
        Ok(Self {
            scores,
            clamped,
            is_pos,
            n_clamped,
        })
    }

    fn pos(&self) -> impl Iterator<Item = T> + Clone + '_ {
        self.scores
            .iter()
            .zip(&self.is_pos)
            .filter(|(_, &p)| p)
            .map(|(&s, _)| s)
    }

    fn neg(&self) -> impl Iterator<Item = T> + Clone + '_ {
        self.scores
            .iter()
            .zip(&self.is_pos)
            .filter(|(_, &p)| !p)
            .map(|(&s, _)| s)
    }

    fn n_pos(&self) -> T {
        T::of(self.is_pos.iter().filter(|&&p| p).count() as f64)
    }

    fn n_neg(&self) -> T {
        T::of(self.is_pos.iter().filter(|&&p| !p).count() as f64)
    }
}

fn finite<T: Scalar>(v: T, what: &str, task: &PlaylistTask) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Overflow(format!(
            "{what} of {} is not finite",
            task.playlist
        )))
    }
}

/// `f(m, u, i)` for a single song row.
pub fn score<T: Scalar>(
    theta: &ModelParams<T>,
    x: &FeatureMatrix<T>,
    song: crate::corpus::SongId,
    user: UserId,
    playlist: PlaylistId,
) -> Result<T> {
    let row = x.row(song)?;
    if row.len() != theta.dim() {
        return Err(Error::Dimension(format!(
            "feature dimension {} != parameter dimension {}",
            row.len(),
            theta.dim()
        )));
    }
    Ok(theta.combined(user, playlist)?.dot(&row))
}

/// Fraction of negatives whose score is at least the minimum positive score.
pub fn bottom_push_risk<T: Scalar>(scores: &[T], membership: &Membership) -> Result<T> {
    if scores.len() != membership.n_songs {
        return Err(Error::Dimension(format!(
            "{} scores for {} songs",
            scores.len(),
            membership.n_songs
        )));
    }
    if membership.n_positive() == 0 || membership.n_negative() == 0 {
        return Err(Error::InvalidArgument(
            "playlist needs positives and negatives".into(),
        ));
    }
    let labels = membership.labels();
    let lowest = membership
        .positives
        .iter()
        .map(|m| scores[m.0])
        .fold(T::infinity(), T::min);
    let violations = scores
        .iter()
        .zip(&labels)
        .filter(|(&s, &pos)| !pos && lowest <= s)
        .count();
    Ok(T::of(violations as f64) / T::of(membership.n_negative() as f64))
}

fn per_task<T, F>(problem: &Problem<T>, theta: &ModelParams<T>, f: F) -> Result<Vec<(T, usize)>>
where
    T: Scalar,
    F: Fn(&PlaylistTask, &Split<T>) -> Result<T> + Sync,
{
    problem.check_params(theta)?;
    problem
        .tasks
        .par_iter()
        .map(|task| {
            let split = Split::new(problem, theta, task)?;
            Ok((f(task, &split)?, split.n_clamped))
        })
        .collect()
}

/// Exponential upper bound of the bottom-push risk, averaged over playlists.
pub fn rank_risk_surrogate<T: Scalar>(
    theta: &ModelParams<T>,
    problem: &Problem<T>,
) -> Result<RiskBreakdown<T>> {
    let terms = per_task(problem, theta, |task, sp| {
        let lowest = sp.pos().fold(T::infinity(), T::min);
        let log_term = log_sum_exp(sp.neg()) - lowest - sp.n_neg().ln();
        finite(log_term.exp(), "surrogate", task)
    })?;
    Ok(RiskBreakdown::from_terms(terms))
}

/// Soft-minimum approximation of [`rank_risk_surrogate`]:
/// `(1/M-) (sum_pos exp(-p f))^(1/p) sum_neg exp(f)` per playlist.
pub fn rank_risk_lse<T: Scalar>(
    theta: &ModelParams<T>,
    problem: &Problem<T>,
    p: T,
) -> Result<RiskBreakdown<T>> {
    check_p(p)?;
    let terms = per_task(problem, theta, |task, sp| {
        let log_term =
            log_sum_exp(sp.pos().map(|s| -p * s)) / p + log_sum_exp(sp.neg()) - sp.n_neg().ln();
        finite(log_term.exp(), "soft-min risk", task)
    })?;
    Ok(RiskBreakdown::from_terms(terms))
}

/// Classification risk used for training.
pub fn mtc_risk<T: Scalar>(
    theta: &ModelParams<T>,
    problem: &Problem<T>,
    p: T,
) -> Result<RiskBreakdown<T>> {
    check_p(p)?;
    let terms = per_task(problem, theta, |task, sp| {
        let (pos, neg) = mtc_parts(sp, p);
        finite(pos.exp() + neg.exp(), "classification risk", task)
    })?;
    Ok(RiskBreakdown::from_terms(terms))
}

/// Logs of the positive and negative parts of one playlist's classification term.
fn mtc_parts<T: Scalar>(sp: &Split<T>, p: T) -> (T, T) {
    let pos = log_sum_exp(sp.pos().map(|s| -p * s)) - (p * sp.n_pos()).ln();
    let neg = log_sum_exp(sp.neg()) - sp.n_neg().ln();
    (pos, neg)
}

fn check_p<T: Scalar>(p: T) -> Result<()> {
    if !(p > T::zero()) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "p must be finite and > 0, got {p}"
        )));
    }
    Ok(())
}

/// Accumulates per-task weight gradients `g_i` into the parameter layout:
/// `d/d beta_i = g_i`, `d/d alpha_u = sum over the user's playlists`, `d/d mu = sum of all`.
fn scatter<T: Scalar>(problem: &Problem<T>, per_task: &[Array1<T>]) -> ModelParams<T> {
    let mut grad = ModelParams::zeros(problem.n_users, problem.n_playlists, problem.dim());
    for (task, g) in problem.tasks.iter().zip(per_task) {
        {
            let mut a = grad.alpha_mut();
            let mut row = a.row_mut(task.user.0);
            row += g;
        }
        {
            let mut b = grad.beta_mut();
            let mut row = b.row_mut(task.playlist.0);
            row += g;
        }
        let mut mu = grad.mu_mut();
        mu += g;
    }
    grad
}

/// Weighted sum of feature rows, skipping clamped scores.
fn weighted_rows<T: Scalar>(
    problem: &Problem<T>,
    sp: &Split<T>,
    coef: impl Fn(usize) -> T,
) -> Array1<T> {
    let mut c = Array1::<T>::zeros(sp.scores.len());
    for (r, v) in c.iter_mut().enumerate() {
        if !sp.clamped[r] {
            *v = coef(r);
        }
    }
    problem.features.t().dot(&c)
}

/// Classification risk and its gradient with respect to every parameter.
pub fn mtc_risk_grad<T: Scalar>(
    theta: &ModelParams<T>,
    problem: &Problem<T>,
    p: T,
) -> Result<(RiskBreakdown<T>, ModelParams<T>)> {
    check_p(p)?;
    problem.check_params(theta)?;
    let n = T::of(problem.tasks.len() as f64);
    let results: Vec<(T, usize, Array1<T>)> = problem
        .tasks
        .par_iter()
        .map(|task| {
            let sp = Split::new(problem, theta, task)?;
            let (lpos, lneg) = mtc_parts(&sp, p);
            let value = finite(lpos.exp() + lneg.exp(), "classification risk", task)?;
            let ln_pos = sp.n_pos().ln();
            let ln_neg = sp.n_neg().ln();
            let g = weighted_rows(problem, &sp, |r| {
                let s = sp.scores[r];
                if sp.is_pos[r] {
                    -(-p * s - ln_pos).exp()
                } else {
                    (s - ln_neg).exp()
                }
            });
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow(format!(
                    "gradient of {} is not finite",
                    task.playlist
                )));
            }
            Ok((value, sp.n_clamped, g / n))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<Array1<T>> = results.iter().map(|r| r.2.clone()).collect();
    let risk = RiskBreakdown::from_terms(results.into_iter().map(|(v, c, _)| (v, c)).collect());
    Ok((risk, scatter(problem, &grads)))
}

/// Gradient of [`rank_risk_lse`]. Diagnostic only; training minimises
/// [`mtc_risk`] instead.
pub fn rank_risk_lse_grad<T: Scalar>(
    theta: &ModelParams<T>,
    problem: &Problem<T>,
    p: T,
) -> Result<(RiskBreakdown<T>, ModelParams<T>)> {
    check_p(p)?;
    problem.check_params(theta)?;
    let n = T::of(problem.tasks.len() as f64);
    let results: Vec<(T, usize, Array1<T>)> = problem
        .tasks
        .par_iter()
        .map(|task| {
            let sp = Split::new(problem, theta, task)?;
            let lpos = log_sum_exp(sp.pos().map(|s| -p * s));
            let lneg = log_sum_exp(sp.neg());
            let value = finite(
                (lpos / p + lneg - sp.n_neg().ln()).exp(),
                "soft-min risk",
                task,
            )?;
            // d/dw = value * (-softmax_pos(-p f) . x + softmax_neg(f) . x)
            let g = weighted_rows(problem, &sp, |r| {
                let s = sp.scores[r];
                if sp.is_pos[r] {
                    -(-p * s - lpos).exp()
                } else {
                    (s - lneg).exp()
                }
            }) * value;
            Ok((value, sp.n_clamped, g / n))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<Array1<T>> = results.iter().map(|r| r.2.clone()).collect();
    let risk = RiskBreakdown::from_terms(results.into_iter().map(|(v, c, _)| (v, c)).collect());
    Ok((risk, scatter(problem, &grads)))
}

/// Smooth part of the regulariser with its gradient, and per-coordinate L1 weights.
#[derive(Debug, Clone)]
pub struct Regularisation<T> {
    pub smooth_value: T,
    pub smooth_grad: ModelParams<T>,
    pub l1_weights: Array1<T>,
}

/// `lambda1 sum ||alpha_u||^2 + lambda2 sum ||beta_i||_1 + lambda3 ||mu||_1`,
/// split into the differentiable part and the L1 weights handed to the optimiser.
pub fn regulariser<T: Scalar>(
    theta: &ModelParams<T>,
    hp: &Hyperparams,
) -> Result<Regularisation<T>> {
    hp.validate()?;
    let l1 = T::of(hp.lambda1);
    let alpha = theta.alpha();
    let smooth_value = l1 * alpha.iter().map(|&a| a * a).sum::<T>();
    let mut smooth_grad = ModelParams::zeros(theta.n_users, theta.n_playlists, theta.dim);
    smooth_grad
        .alpha_mut()
        .assign(&alpha.mapv(|a| (l1 + l1) * a));
    let mut w = ModelParams::zeros(theta.n_users, theta.n_playlists, theta.dim);
    w.beta_mut().fill(T::of(hp.lambda2));
    w.mu_mut().fill(T::of(hp.lambda3));
    Ok(Regularisation {
        smooth_value,
        smooth_grad,
        l1_weights: w.into_flat(),
    })
}

/// Full value of the regulariser.
pub fn omega<T: Scalar>(theta: &ModelParams<T>, hp: &Hyperparams) -> Result<T> {
    let reg = regulariser(theta, hp)?;
    let l1: T = reg
        .l1_weights
        .iter()
        .zip(theta.flat().iter())
        .map(|(&c, &x)| c * x.abs())
        .sum();
    Ok(reg.smooth_value + l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SongId;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(features: Array2<f64>, positives: Vec<usize>) -> Problem<f64> {
        Problem::new(
            features,
            vec![PlaylistTask {
                user: UserId(0),
                playlist: PlaylistId(0),
                positives,
            }],
            1,
            1,
        )
        .unwrap()
    }

    /// Parameters whose combined weight vector for (0, 0) is `w`.
    fn with_mu(w: Array1<f64>) -> ModelParams<f64> {
        let mut t = ModelParams::zeros(1, 1, w.len());
        t.mu_mut().assign(&w);
        t
    }

    #[test]
    fn score_hand_values() {
        let alpha = array![[1.0, 0.0]];
        let beta = array![[0.0, 1.0]];
        let mu = array![1.0, 1.0];
        let theta = ModelParams::from_parts(alpha.view(), beta.view(), mu.view()).unwrap();
        let x = FeatureMatrix::from_raw(array![[1.0, 1.0], [2.0, 2.0]]);
        assert_eq!(
            score(&theta, &x, SongId(0), UserId(0), PlaylistId(0)).unwrap(),
            4.0
        );
        assert_eq!(
            score(&theta, &x, SongId(1), UserId(0), PlaylistId(0)).unwrap(),
            8.0
        );
        let zero = ModelParams::<f64>::zeros(1, 1, 2);
        assert_eq!(
            score(&zero, &x, SongId(1), UserId(0), PlaylistId(0)).unwrap(),
            0.0
        );
        let x3 = FeatureMatrix::from_raw(array![[1.0, 1.0, 1.0]]);
        assert!(score(&theta, &x3, SongId(0), UserId(0), PlaylistId(0)).is_err());
    }

    #[test]
    fn bottom_push_examples() {
        let m = Membership::new(vec![SongId(0)], 3).unwrap();
        assert_eq!(bottom_push_risk(&[2.0, 1.0, 3.0], &m).unwrap(), 0.5);
        assert_eq!(bottom_push_risk(&[5.0, 1.0, 3.0], &m).unwrap(), 0.0);
        assert_eq!(bottom_push_risk(&[1.0, 1.0, 1.0], &m).unwrap(), 1.0);
        let empty = Membership::new(vec![], 3).unwrap();
        assert!(bottom_push_risk(&[1.0, 1.0, 1.0], &empty).is_err());
        let full = Membership::new(vec![SongId(0), SongId(1)], 2).unwrap();
        assert!(bottom_push_risk(&[1.0, 1.0], &full).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let p = single(array![[1.0], [1.0], [1.0]], vec![0]);
        let r = rank_risk_surrogate(&ModelParams::zeros(1, 1, 1), &p).unwrap();
        assert!((r.total - 1.0).abs() < 1e-15);
        // positive scores 1, negative 0
        let p = single(array![[1.0], [0.0]], vec![0]);
        let r = rank_risk_surrogate(&with_mu(array![1.0]), &p).unwrap();
        assert!((r.total - (-1.0f64).exp()).abs() < 1e-15);
        let lse = rank_risk_lse(&with_mu(array![1.0]), &p, 1.0).unwrap();
        assert!((lse.total - r.total).abs() < 1e-15);
    }

    #[test]
    fn lse_with_equal_scores() {
        let p = single(Array2::zeros((5, 1)), vec![0, 2, 3]);
        for pw in [1.0, 2.0, 7.5] {
            let r = rank_risk_lse(&ModelParams::zeros(1, 1, 1), &p, pw).unwrap();
            assert!((r.total - 3f64.powf(1.0 / pw)).abs() < 1e-12, "{pw}");
        }
    }

    #[test]
    fn mtc_examples() {
        let p = single(array![[1.0], [0.0]], vec![0]);
        let r = mtc_risk(&with_mu(array![1.0]), &p, 1.0).unwrap();
        assert!((r.total - ((-1.0f64).exp() + 1.0)).abs() < 1e-15);
        let z = single(Array2::zeros((4, 2)), vec![1]);
        let zero = ModelParams::zeros(1, 1, 2);
        assert!((mtc_risk(&zero, &z, 1.0).unwrap().total - 2.0).abs() < 1e-15);
        for pw in [0.5, 2.0, 4.0] {
            assert!((mtc_risk(&zero, &z, pw).unwrap().total - (1.0 / pw + 1.0)).abs() < 1e-14);
        }
        assert!(mtc_risk(&zero, &z, 0.0).is_err());
        assert!(mtc_risk(&zero, &z, -1.0).is_err());
    }

    #[test]
    fn zero_features_give_zero_gradient() {
        let problem = Problem::new(
            Array2::zeros((5, 3)),
            vec![
                PlaylistTask {
                    user: UserId(0),
                    playlist: PlaylistId(0),
                    positives: vec![1, 2],
                },
                PlaylistTask {
                    user: UserId(1),
                    playlist: PlaylistId(1),
                    positives: vec![0],
                },
            ],
            2,
            2,
        )
        .unwrap();
        let mut theta = ModelParams::zeros(2, 2, 3);
        theta.flat_mut().fill(0.3);
        let (risk, grad) = mtc_risk_grad(&theta, &problem, 2.0).unwrap();
        assert!(grad.flat().iter().all(|&g| g == 0.0));
        assert_eq!(risk.total, mtc_risk(&theta, &problem, 2.0).unwrap().total);
    }

    fn random_problem(
        rng: &mut ChaCha8Rng,
        users: usize,
        playlists: usize,
        m: usize,
        d: usize,
    ) -> Problem<f64> {
        let x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0));
        let tasks = (0..playlists)
            .map(|i| {
                let mut pos: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.3)).collect();
                if pos.is_empty() {
                    pos.push(i % m);
                }
                if pos.len() == m {
                    pos.pop();
                }
                PlaylistTask {
                    user: UserId(i % users),
                    playlist: PlaylistId(i),
                    positives: pos,
                }
            })
            .collect();
        Problem::new(x, tasks, users, playlists).unwrap()
    }

    #[test]
    fn symmetric_playlists_have_permuted_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let task = |u, i| PlaylistTask {
            user: UserId(u),
            playlist: PlaylistId(i),
            positives: vec![1, 4],
        };
        let problem = Problem::new(x, vec![task(0, 0), task(1, 1)], 2, 2).unwrap();
        let mut theta = ModelParams::zeros(2, 2, 3);
        theta.mu_mut().assign(&array![0.2, -0.1, 0.4]);
        let (_, g) = mtc_risk_grad(&theta, &problem, 1.5).unwrap();
        assert_eq!(g.beta().row(0), g.beta().row(1));
        assert_eq!(g.alpha().row(0), g.alpha().row(1));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let problem = random_problem(&mut rng, 2, 4, 10, 3);
        let mut theta = ModelParams::zeros(2, 4, 3);
        theta
            .flat_mut()
            .mapv_inplace(|_| rng.random_range(-0.5..0.5));
        for p in [1.0, 3.0] {
            let (_, g) = mtc_risk_grad(&theta, &problem, p).unwrap();
            let (_, gl) = rank_risk_lse_grad(&theta, &problem, p).unwrap();
            for j in 0..theta.flat().len() {
                let h = 1e-5;
                let mut plus = theta.clone();
                plus.flat_mut()[j] += h;
                let mut minus = theta.clone();
                minus.flat_mut()[j] -= h;
                let fd = (mtc_risk(&plus, &problem, p).unwrap().total
                    - mtc_risk(&minus, &problem, p).unwrap().total)
                    / (2.0 * h);
                assert!(
                    (fd - g.flat()[j]).abs() < 1e-8,
                    "mtc coord {j}: {fd} vs {}",
                    g.flat()[j]
                );
                let fd = (rank_risk_lse(&plus, &problem, p).unwrap().total
                    - rank_risk_lse(&minus, &problem, p).unwrap().total)
                    / (2.0 * h);
                assert!((fd - gl.flat()[j]).abs() < 1e-8, "lse coord {j}");
            }
        }
    }

    #[test]
    fn clamping_is_counted() {
        let p = single(array![[100.0], [0.0]], vec![1]);
        let r = mtc_risk(&with_mu(array![1.0]), &p, 1.0).unwrap();
        assert_eq!(r.clamped, 1);
        assert!(r.total.is_finite());
        let (_, g) = mtc_risk_grad(&with_mu(array![1.0]), &p, 1.0).unwrap();
        assert!(g.flat().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn regulariser_hand_values() {
        let theta = ModelParams::from_parts(
            array![[3.0, 4.0]].view(),
            array![[1.0, -2.0]].view(),
            array![0.5, 0.0].view(),
        )
        .unwrap();
        let hp = Hyperparams {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            p: 1.0,
        };
        let reg = regulariser(&theta, &hp).unwrap();
        assert_eq!(reg.smooth_value, 25.0);
        assert_eq!(reg.smooth_grad.alpha(), array![[6.0, 8.0]]);
        assert_eq!(reg.l1_weights.to_vec(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(omega(&theta, &hp).unwrap(), 28.5);
        assert_eq!(
            omega(&ModelParams::<f64>::zeros(1, 1, 2), &hp).unwrap(),
            0.0
        );
        let hp0 = Hyperparams { lambda1: 0.0, ..hp };
        assert_eq!(regulariser(&theta, &hp0).unwrap().smooth_value, 0.0);
        let bad = Hyperparams {
            lambda2: -1.0,
            ..hp
        };
        assert!(regulariser(&theta, &bad).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let p = Problem::<f32>::new(
            ndarray::array![[1.0f32], [0.0]],
            vec![PlaylistTask {
                user: UserId(0),
                playlist: PlaylistId(0),
                positives: vec![0],
            }],
            1,
            1,
        )
        .unwrap();
        let mut t = ModelParams::<f32>::zeros(1, 1, 1);
        t.mu_mut()[0] = 1.0;
        let r = mtc_risk(&t, &p, 1.0f32).unwrap();
        assert!((r.total - 1.3678794).abs() < 1e-6);
    }

    #[test]
    fn value_channel_matches_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let problem = random_problem(&mut rng, 3, 6, 20, 8);
        let mut theta = ModelParams::zeros(3, 6, 8);
        theta
            .flat_mut()
            .mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let a = mtc_risk(&theta, &problem, 2.0).unwrap();
        let (b, _) = mtc_risk_grad(&theta, &problem, 2.0).unwrap();
        assert!((a.total - b.total).abs() <= 1e-12 * a.total.abs());
        let mean = a.per_playlist.iter().sum::<f64>() / 6.0;
        assert!((mean - a.total).abs() <= 1e-12 * a.total);
    }
}
