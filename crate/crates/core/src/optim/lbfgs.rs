//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iters: 1000,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_evals: 20,
        }
    }
}

impl LbfgsConfig {
    pub fn with_max_iters(max_iters: usize) -> Self {
        Self {
            max_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Wolfe constants need 0 < c1 ({}) < c2 ({}) < 1",
                self.c1, self.c2
            )));
        }
        if self.history == 0 || self.max_line_search_evals == 0 {
            return Err(Error::InvalidArgument(
                "history and line-search budget must be >= 1".into(),
            ));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 {
            return Err(Error::InvalidArgument("gradient tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// row 0 is the starting point, then one row per accepted iteration
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Objective<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective<F> {
    fn eval(&mut self, x: Vec<f64>) -> Result<Point> {
        self.evaluations += 1;
        let (f, g) = (self.f)(&x)?;
        if g.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "lbfgs",
                detail: format!("gradient of length {} for {} variables", g.len(), x.len()),
            });
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "objective returned non-finite value {f} (or gradient) at evaluation {}",
                self.evaluations
            )));
        }
        Ok(Point { x, f, g })
    }
}

/// Minimizer of the cubic interpolating two points and slopes, safeguarded
/// to the interior of the bracket.
fn interpolate(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mut t = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2))
    } else {
        f64::NAN
    };
    let margin = 0.1 * (hi - lo);
    if !t.is_finite() || t < lo + margin || t > hi - margin {
        t = 0.5 * (lo + hi);
    }
    t
}

/// Outcome of one line search: the accepted point, or the best trial point
/// with sufficient decrease when the search gave up.
enum Search {
    Accepted(Point),
    Failed(Option<Point>),
}

fn line_search<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>>(
    obj: &mut Objective<F>,
    cur: &Point,
    dir: &[f64],
    step0: f64,
    cfg: &LbfgsConfig,
) -> Result<Search> {
    let f0 = cur.f;
    let d0 = dot(&cur.g, dir);
    let mut evals = 0;
    let mut best: Option<Point> = None;
    let trial = |obj: &mut Objective<F>, alpha: f64, best: &mut Option<Point>| -> Result<(f64, f64, Point)> {
        let x: Vec<f64> = cur.x.iter().zip(dir).map(|(x, d)| x + alpha * d).collect();
        let p = obj.eval(x)?;
        let slope = dot(&p.g, dir);
        let improves = p.f <= f0 + cfg.c1 * alpha * d0 && p.f < f0;
        if improves && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Point {
                x: p.x.clone(),
                f: p.f,
                g: p.g.clone(),
            });
        }
        Ok((p.f, slope, p))
    };

    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, d0);
    let mut alpha = step0;
    let (mut lo, mut hi);
    loop {
        if evals >= cfg.max_line_search_evals {
            return Ok(Search::Failed(best));
        }
        evals += 1;
        let (f, d, p) = trial(obj, alpha, &mut best)?;
        if f > f0 + cfg.c1 * alpha * d0 || (evals > 1 && f >= f_prev) {
            lo = (a_prev, f_prev, d_prev);
            hi = (alpha, f, d);
            break;
        }
        if d.abs() <= -cfg.c2 * d0 {
            return Ok(Search::Accepted(p));
        }
        if d >= 0.0 {
            lo = (alpha, f, d);
            hi = (a_prev, f_prev, d_prev);
            break;
        }
        a_prev = alpha;
        f_prev = f;
        d_prev = d;
        alpha *= 2.0;
    }
    // zoom
    loop {
        if evals >= cfg.max_line_search_evals || (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
            return Ok(Search::Failed(best));
        }
        evals += 1;
        let a = interpolate(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        let (f, d, p) = trial(obj, a, &mut best)?;
        if f > f0 + cfg.c1 * a * d0 || f >= lo.1 {
            hi = (a, f, d);
        } else {
            if d.abs() <= -cfg.c2 * d0 {
                return Ok(Search::Accepted(p));
            }
            if d * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, f, d);
        }
    }
}

/// Minimizes `objective` from `x0`. The objective returns the value and the
/// gradient. The trace of accepted values is non-increasing.
pub fn lbfgs_minimize<F>(objective: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut obj = Objective {
        f: objective,
        evaluations: 0,
    };
    let mut cur = obj.eval(x0)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        loss: cur.f,
        grad_norm: norm(&cur.g),
    }];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iterations = 0;
    let finish = |cur: Point, trace, iterations, evaluations, stop| LbfgsResult {
        x: cur.x,
        value: cur.f,
        trace,
        iterations,
        evaluations,
        stop,
    };

    loop {
        if norm(&cur.g) <= cfg.grad_tol {
            return Ok(finish(
                cur,
                trace,
                iterations,
                obj.evaluations,
                StopReason::GradientTolerance,
            ));
        }
        if iterations >= cfg.max_iters {
            return Ok(finish(
                cur,
                trace,
                iterations,
                obj.evaluations,
                StopReason::MaxIterations,
            ));
        }

        // two-loop recursion
        let mut q: Vec<f64> = cur.g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir = q;
        let mut step0 = 1.0;
        if memory.is_empty() || dot(&dir, &cur.g) >= 0.0 {
            memory.clear();
            dir = cur.g.iter().map(|v| -v).collect();
            step0 = 1.0 / norm(&cur.g).max(1.0);
        }

        let next = match line_search(&mut obj, &cur, &dir, step0, cfg)? {
            Search::Accepted(p) => p,
            Search::Failed(best) => {
                if let Some(p) = best {
                    iterations += 1;
                    trace.push(TraceRow {
                        iteration: iterations,
                        loss: p.f,
                        grad_norm: norm(&p.g),
                    });
                    cur = p;
                }
                return Ok(finish(
                    cur,
                    trace,
                    iterations,
                    obj.evaluations,
                    StopReason::LineSearchFailed,
                ));
            }
        };
        iterations += 1;
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if memory.len() == cfg.history {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        trace.push(TraceRow {
            iteration: iterations,
            loss: next.f,
            grad_norm: norm(&next.g),
        });
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(c: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x| {
            let d: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            Ok((dot(&d, &d), d.iter().map(|v| 2.0 * v).collect()))
        }
    }

    #[test]
    fn shifted_sphere() {
        let r = lbfgs_minimize(quadratic(vec![1.0, 2.0, 3.0]), vec![0.0; 3], &LbfgsConfig::default()).unwrap();
        assert!(r.iterations <= 3, "{} iterations", r.iterations);
        for (x, c) in r.x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - c).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let cfg = LbfgsConfig {
            grad_tol: 1e-10,
            ..LbfgsConfig::default()
        };
        let r = lbfgs_minimize(f, vec![-1.2, 1.0], &cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1].loss <= w[0].loss));
    }

    #[test]
    fn zero_gradient_start_returns_immediately() {
        let r = lbfgs_minimize(quadratic(vec![1.0, 1.0]), vec![1.0, 1.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.x, vec![1.0, 1.0]);
        assert_eq!(r.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn non_finite_objective_aborts() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(matches!(
            lbfgs_minimize(f, vec![0.0], &LbfgsConfig::default()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn invalid_wolfe_constants() {
        let cfg = LbfgsConfig {
            c1: 0.9,
            c2: 0.5,
            ..LbfgsConfig::default()
        };
        assert!(lbfgs_minimize(quadratic(vec![0.0]), vec![1.0], &cfg).is_err());
    }

    #[test]
    fn max_iters_respected() {
        let f = |x: &[f64]| Ok((x[0].cosh(), vec![x[0].sinh()]));
        let r = lbfgs_minimize(
            f,
            vec![5.0],
            &LbfgsConfig {
                max_iters: 2,
                ..LbfgsConfig::default()
            },
        )
        .unwrap();
        assert!(r.iterations <= 2);
    }
}
