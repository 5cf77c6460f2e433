//! Orthant-wise limited-memory quasi-Newton minimisation of
//! `smooth(x) + sum_j c_j |x_j|` with per-coordinate weights `c_j >= 0`.
//!
//! Coordinates with `c_j = 0` are treated exactly as plain L-BFGS would treat
//! them; with all weights zero the iterates coincide with L-BFGS using the
//! same backtracking line search.

use std::collections::VecDeque;

use ndarray::{Array1, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OwlqnConfig {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Convergence when `|pg|_inf <= grad_tol * max(1, |x|_inf)`.
    pub grad_tol: f64,
    /// Sufficient decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtracking step.
    pub shrink: f64,
    pub max_line_search: usize,
}

impl Default for OwlqnConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-6,
            armijo: 1e-4,
            shrink: 0.5,
            max_line_search: 50,
        }
    }
}

impl OwlqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::InvalidArgument("memory must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0)
            || !(self.armijo > 0.0 && self.armijo < 1.0)
            || !(self.shrink > 0.0 && self.shrink < 1.0)
        {
            return Err(Error::InvalidArgument(
                "tolerances must be > 0 and line search constants in (0, 1)".into(),
            ));
        }
        if self.max_line_search == 0 {
            return Err(Error::InvalidArgument(
                "max_line_search must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwlqnReport<T> {
    pub x: Array1<T>,
    /// Full objective including the L1 term.
    pub value: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<T>,
    /// Pseudo-gradient infinity norm at `x`.
    pub pg_norm: T,
}

fn l1_term<T: Scalar>(x: &Array1<T>, c: &Array1<T>) -> T {
    Zip::from(x)
        .and(c)
        .fold(T::zero(), |acc, &xj, &cj| acc + cj * xj.abs())
}

/// Minimum-norm subgradient of the L1-augmented objective.
pub fn pseudo_gradient<T: Scalar>(x: &Array1<T>, g: &Array1<T>, c: &Array1<T>) -> Array1<T> {
    Zip::from(x).and(g).and(c).map_collect(|&xj, &gj, &cj| {
        if cj == T::zero() {
            gj
        } else if xj > T::zero() {
            gj + cj
        } else if xj < T::zero() {
            gj - cj
        } else if gj + cj < T::zero() {
            gj + cj
        } else if gj - cj > T::zero() {
            gj - cj
        } else {
            T::zero()
        }
    })
}

fn inf_norm<T: Scalar>(v: &Array1<T>) -> T {
    v.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
}

struct Pair<T> {
    s: Array1<T>,
    y: Array1<T>,
    rho: T,
}

/// `H * v` by the two-loop recursion, with `H0 = (s'y / y'y) I` from the newest pair.
fn two_loop<T: Scalar>(v: &Array1<T>, history: &VecDeque<Pair<T>>) -> Array1<T> {
    let mut q = v.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * p.s.dot(&q);
        q.scaled_add(-a, &p.y);
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = last.s.dot(&last.y) / last.y.dot(&last.y);
        q *= gamma;
    }
    for (p, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * p.y.dot(&q);
        q.scaled_add(a - b, &p.s);
    }
    q
}

/// Minimises `objective(x) + sum_j l1_weights[j] * |x_j|` from `x0`.
///
/// `objective` returns the smooth value and its gradient. Errors from it at
/// `x0` are fatal; during a line search they are treated as a failed trial.
pub fn minimize<T, F>(
    mut objective: F,
    l1_weights: &Array1<T>,
    x0: Array1<T>,
    cfg: &OwlqnConfig,
) -> Result<OwlqnReport<T>>
where
    T: Scalar,
    F: FnMut(&Array1<T>) -> Result<(T, Array1<T>)>,
{
    cfg.validate()?;
    if l1_weights.len() != x0.len() {
        return Err(Error::Dimension(format!(
            "{} L1 weights for {} coordinates",
            l1_weights.len(),
            x0.len()
        )));
    }
    if l1_weights
        .iter()
        .any(|&c| !(c >= T::zero()) || !c.is_finite())
    {
        return Err(Error::InvalidArgument(
            "L1 weights must be finite and >= 0".into(),
        ));
    }
    let c = l1_weights;
    let mut x = x0;
    let (f0, mut g) = objective(&x)?;
    if !f0.is_finite() || g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow(
            "objective or gradient not finite at the start point".into(),
        ));
    }
    let mut value = f0 + l1_term(&x, c);
    let mut trace = vec![value];
    let mut evaluations = 1;
    let mut history: VecDeque<Pair<T>> = VecDeque::with_capacity(cfg.memory);
    let tol = T::of(cfg.grad_tol);
    let armijo = T::of(cfg.armijo);
    let shrink = T::of(cfg.shrink);

    let mut pg = pseudo_gradient(&x, &g, c);
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if inf_norm(&pg) <= tol * T::one().max(inf_norm(&x)) {
            termination = Termination::Converged;
            break;
        }
        let mut d = two_loop(&pg, &history).mapv(|v| -v);
        // keep only components that agree with steepest descent on L1 coordinates
        Zip::from(&mut d).and(&pg).and(c).for_each(|dj, &pj, &cj| {
            if cj > T::zero() && *dj * pj >= T::zero() {
                *dj = T::zero();
            }
        });
        let mut slope = d.dot(&pg);
        if !(slope < T::zero()) {
            history.clear();
            d = pg.mapv(|v| -v);
            slope = d.dot(&pg);
        }
        let orthant = Zip::from(&x).and(&pg).map_collect(|&xj, &pj| {
            if xj != T::zero() {
                xj.signum()
            } else if pj != T::zero() {
                -pj.signum()
            } else {
                T::zero()
            }
        });
        let mut step = if history.is_empty() {
            T::one().min(T::one() / pg.dot(&pg).sqrt())
        } else {
            T::one()
        };

        let mut accepted = None;
        for _ in 0..cfg.max_line_search {
            let mut trial = &x + &(&d * step);
            Zip::from(&mut trial)
                .and(&orthant)
                .and(c)
                .for_each(|tj, &oj, &cj| {
                    if cj > T::zero() && *tj * oj <= T::zero() {
                        *tj = T::zero();
                    }
                });
            evaluations += 1;
            if let Ok((f_new, g_new)) = objective(&trial) {
                let v_new = f_new + l1_term(&trial, c);
                let decrease = pg.dot(&(&trial - &x));
                if v_new.is_finite()
                    && g_new.iter().all(|v| v.is_finite())
                    && v_new <= value + armijo * decrease
                {
                    accepted = Some((trial, v_new, g_new));
                    break;
                }
            }
            step *= shrink;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            termination = Termination::LineSearchFailure;
            break;
        };
        iterations += 1;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > T::epsilon() * y.dot(&y) && sy > T::zero() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                s,
                y,
                rho: T::one() / sy,
            });
        }
        x = x_new;
        g = g_new;
        value = v_new;
        trace.push(value);
        pg = pseudo_gradient(&x, &g, c);
    }
    if termination == Termination::MaxIters && inf_norm(&pg) <= tol * T::one().max(inf_norm(&x)) {
        termination = Termination::Converged;
    }
    Ok(OwlqnReport {
        pg_norm: inf_norm(&pg),
        x,
        value,
        iterations,
        evaluations,
        termination,
        trace,
    })
}
