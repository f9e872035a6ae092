//! Robustness of an observation matrix against `m` adversaries.
//!
//! `A` is robust for `m` when for every non-zero `x` and every index set `K`
//! of size `m`, `sum_{K^c} |a_i^T x| > sum_K |a_i^T x|`. For a fixed `x` the
//! worst `K` is the set of the `m` largest magnitudes, so the condition is
//! equivalent to positivity of the top-`m` margin
//!
//! ```text
//! f(x) = sum_i |a_i^T x| - 2 * (sum of the m largest |a_i^T x|)
//! ```
//!
//! on the unit sphere. The exact checker decides the sign with one small LP
//! per (sign pattern, `K`) pair; the reported margin is the minimum of `f`
//! over the unit sphere, which for robust matrices is attained on an extreme
//! ray of some sign cone and is therefore computed by enumerating those rays.

pub mod simplex;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{AdversarySet, ObservationMatrix};
use crate::scalar::{norm, LpField, Scalar};
use simplex::{LinearProgram, LpOutcome, Relation};

/// Largest `p` accepted by the enumeration-based checkers.
pub const EXACT_LIMIT: usize = 12;

/// A point `x` and index set `K` at which the strict inequality fails (or is
/// closest to failing).
#[derive(Debug, Clone, PartialEq)]
pub struct Witness<T> {
    pub x: Vec<T>,
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessVerdict<T> {
    pub robust: bool,
    /// Minimum of the top-`m` margin over the unit sphere. Exact when
    /// positive; when non-positive it is the smallest value found, which
    /// certifies the sign.
    pub margin: T,
    pub witness: Option<Witness<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaEstimate<T> {
    /// `max(0, min_{|x|=1} phi(x))`
    pub eta: T,
    /// Raw minimum of `phi` found on the sphere; negative or zero means the
    /// condition fails for this adversary set.
    pub margin: T,
    pub argmin_x: Vec<T>,
    pub adversary_set: AdversarySet,
}

/// Outcome of the LP enumeration on an arbitrary ordered field.
#[derive(Debug, Clone, PartialEq)]
pub struct LpMargin<F> {
    /// Minimum of `sum_{K^c} |a_i^T x| - sum_K |a_i^T x|` over
    /// `{x : sum_i |a_i^T x| = 1}` and over the supplied index sets.
    pub value: F,
    pub x: Vec<F>,
    pub k: Vec<usize>,
}

impl<F: LpField> LpMargin<F> {
    pub fn is_positive(&self) -> bool {
        self.value > F::margin_tolerance()
    }
}

/// All `m`-subsets of `0..p` in lexicographic order.
pub fn subsets(p: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if m > p {
        return out;
    }
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        out.push(idx.clone());
        let Some(pos) = (0..m).rev().find(|&j| idx[j] < p - m + j) else {
            return out;
        };
        idx[pos] += 1;
        for j in pos + 1..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn row_dot<F: LpField>(row: &[F], x: &[F]) -> F {
    row.iter()
        .zip(x)
        .fold(F::zero(), |acc, (a, b)| acc + a.clone() * b.clone())
}

/// `sum_{K^c} |a_i^T x| - sum_K |a_i^T x|` for an explicit `K`.
pub fn condition_gap<F: LpField>(rows: &[Vec<F>], x: &[F], k: &[usize]) -> F {
    rows.iter().enumerate().fold(F::zero(), |acc, (i, row)| {
        let v = row_dot(row, x).magnitude();
        if k.contains(&i) {
            acc - v
        } else {
            acc + v
        }
    })
}

/// Minimise the condition gap over every sign cone and every `K` in
/// `index_sets` using one LP per pair.
///
/// For a sign pattern `s` the cone `{x : s_i a_i^T x >= 0}` is normalised by
/// `sum_i s_i a_i^T x = 1`; on it `|a_i^T x| = s_i a_i^T x`, so the gap is
/// linear. Patterns are enumerated with `s_0 = +1` since `s` and `-s` give
/// mirrored cones with identical objective values. Ties keep the first pair
/// in (pattern, subset) order, so the result is deterministic.
pub fn lp_min_margin<F: LpField>(
    rows: &[Vec<F>],
    d: usize,
    index_sets: &[Vec<usize>],
) -> Result<Option<LpMargin<F>>> {
    let p = rows.len();
    if p == 0 || p > 63 {
        return Err(Error::Dimension(format!("cannot enumerate sign patterns for p={p}")));
    }
    let mut best: Option<LpMargin<F>> = None;
    for mask in 0u64..(1u64 << (p - 1)) {
        let signed: Vec<Vec<F>> = rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let negative = i > 0 && (mask >> (i - 1)) & 1 == 1;
                row.iter()
                    .map(|v| if negative { -v.clone() } else { v.clone() })
                    .collect()
            })
            .collect();
        let total: Vec<F> = (0..d)
            .map(|c| signed.iter().fold(F::zero(), |acc, r| acc + r[c].clone()))
            .collect();
        for k in index_sets {
            let objective: Vec<F> = (0..d)
                .map(|c| {
                    signed.iter().enumerate().fold(F::zero(), |acc, (i, r)| {
                        if k.contains(&i) {
                            acc - r[c].clone()
                        } else {
                            acc + r[c].clone()
                        }
                    })
                })
                .collect();
            let mut lp = LinearProgram::new(objective).all_free();
            for r in &signed {
                lp.constrain(r.clone(), Relation::Ge, F::zero());
            }
            lp.constrain(total.clone(), Relation::Eq, F::one());
            match lp.solve()? {
                LpOutcome::Infeasible => break,
                LpOutcome::Unbounded => {
                    return Err(Error::Lp(
                        "normalised sign cone is unbounded; matrix lacks full column rank".into(),
                    ))
                }
                LpOutcome::Optimal { x, value } => {
                    if best.as_ref().is_none_or(|b| value < b.value) {
                        best = Some(LpMargin {
                            value,
                            x,
                            k: k.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Top-`m` margin `f(x)` together with the maximising `K` (ties broken by
/// lower index).
pub fn top_m_margin<T: Scalar>(a: &ObservationMatrix<T>, x: &[T], m: usize) -> (T, Vec<usize>) {
    let mags: Vec<T> = (0..a.p()).map(|i| a.project(i, x).abs()).collect();
    let mut order: Vec<usize> = (0..a.p()).collect();
    order.sort_by(|&i, &j| mags[j].partial_cmp(&mags[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut k: Vec<usize> = order.into_iter().take(m).collect();
    k.sort_unstable();
    (condition_gap(a.rows(), x, &k), k)
}

/// Unit directions spanning the extreme rays of every sign cone: null
/// vectors of each linearly independent (d-1)-subset of rows.
fn extreme_ray_candidates<T: Scalar>(a: &ObservationMatrix<T>) -> Vec<Vec<T>> {
    let d = a.d();
    if d == 1 {
        return vec![vec![T::one()]];
    }
    subsets(a.p(), d - 1)
        .into_iter()
        .filter_map(|set| {
            let rows: Vec<&[T]> = set.iter().map(|&i| a.row(i)).collect();
            linalg::null_direction(&rows, d).map(|v| v.into_iter().map(T::lit).collect())
        })
        .collect()
}

fn min_over_rays<T: Scalar>(
    a: &ObservationMatrix<T>,
    mut score: impl FnMut(&[T]) -> T,
) -> Option<(T, Vec<T>)> {
    let mut best: Option<(T, Vec<T>)> = None;
    for ray in extreme_ray_candidates(a) {
        let v = score(&ray);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, ray));
        }
    }
    best
}

fn check_limits<T: Scalar>(a: &ObservationMatrix<T>) -> Result<()> {
    if a.p() > EXACT_LIMIT {
        return Err(Error::TooLarge {
            p: a.p(),
            limit: EXACT_LIMIT,
        });
    }
    Ok(())
}

/// Exact decision of the robustness condition for `m` adversaries.
pub fn check_robust_exact<T: Scalar>(
    a: &ObservationMatrix<T>,
    m: usize,
) -> Result<RobustnessVerdict<T>> {
    if m >= a.p() {
        return Err(Error::AdversaryCount { m, p: a.p() });
    }
    check_limits(a)?;
    let tol = <T as LpField>::margin_tolerance();
    let lp = lp_min_margin(a.rows(), a.d(), &subsets(a.p(), m))?
        .ok_or_else(|| Error::Lp("no feasible sign cone".into()))?;
    let (ray_value, ray) = min_over_rays(a, |r| top_m_margin(a, r, m).0)
        .ok_or_else(|| Error::Lp("no extreme ray candidates".into()))?;

    if lp.value > tol && ray_value > tol {
        return Ok(RobustnessVerdict {
            robust: true,
            margin: ray_value,
            witness: None,
        });
    }
    let lp_norm = norm(&lp.x);
    let lp_sphere = lp.value / lp_norm;
    let (margin, witness) = if lp.value <= tol && lp_sphere <= ray_value {
        (lp_sphere, Witness { x: lp.x, k: lp.k })
    } else {
        let k = top_m_margin(a, &ray, m).1;
        (ray_value, Witness { x: ray, k })
    };
    Ok(RobustnessVerdict {
        robust: false,
        margin,
        witness: Some(witness),
    })
}

/// Closed form for `d = 1`: robust iff `sum |a_i| > 2 * (sum of the m largest |a_i|)`.
pub fn check_robust_d1<T: Scalar>(weights: &[T], m: usize) -> RobustnessVerdict<T> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        weights[j]
            .abs()
            .partial_cmp(&weights[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut k: Vec<usize> = order.into_iter().take(m).collect();
    k.sort_unstable();
    let total = weights.iter().fold(T::zero(), |acc, w| acc + w.abs());
    let top = k.iter().fold(T::zero(), |acc, &i| acc + weights[i].abs());
    let margin = total - top - top;
    let robust = margin > <T as LpField>::margin_tolerance();
    RobustnessVerdict {
        robust,
        margin,
        witness: (!robust).then(|| Witness {
            x: vec![T::one()],
            k,
        }),
    }
}

/// Randomised one-sided oracle: multistart projected subgradient descent on
/// the top-`m` margin over the sphere. A non-positive result certifies
/// non-robustness; a positive one is only evidence.
pub fn check_robust_sampled<T: Scalar, R: Rng + ?Sized>(
    a: &ObservationMatrix<T>,
    m: usize,
    trials: usize,
    rng: &mut R,
) -> RobustnessVerdict<T> {
    const ITERATIONS: usize = 150;
    let d = a.d();
    let trials = trials.max(1);
    let mut best: Option<(T, Vec<T>, Vec<usize>)> = None;
    let consider = |x: &[T], best: &mut Option<(T, Vec<T>, Vec<usize>)>| -> (T, Vec<usize>) {
        let (v, k) = top_m_margin(a, x, m);
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            *best = Some((v, x.to_vec(), k.clone()));
        }
        (v, k)
    };
    for _ in 0..trials {
        let mut x: Vec<T> = (0..d).map(|_| T::lit(rng.sample(StandardNormal))).collect();
        if !normalize(&mut x) {
            continue;
        }
        for it in 1..=ITERATIONS {
            let (_, k) = consider(&x, &mut best);
            // Subgradient of f at x.
            let mut g = vec![T::zero(); d];
            for i in 0..a.p() {
                let s = a.project(i, &x).signum();
                let w = if k.contains(&i) { -s } else { s };
                for (gc, &ac) in g.iter_mut().zip(a.row(i)) {
                    *gc = *gc + w * ac;
                }
            }
            let radial = g.iter().zip(&x).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
            for (gc, &xc) in g.iter_mut().zip(&x) {
                *gc = *gc - radial * xc;
            }
            let gn = norm(&g);
            if gn <= T::epsilon() {
                break;
            }
            let step = T::lit(0.5 / (it as f64).sqrt());
            for (xc, &gc) in x.iter_mut().zip(&g) {
                *xc = *xc - step * gc / gn;
            }
            if !normalize(&mut x) {
                break;
            }
        }
        consider(&x, &mut best);
    }
    let (margin, x, k) = best.expect("at least one trial");
    let robust = margin > <T as LpField>::margin_tolerance();
    RobustnessVerdict {
        robust,
        margin,
        witness: (!robust).then_some(Witness { x, k }),
    }
}

fn normalize<T: Scalar>(x: &mut [T]) -> bool {
    let n = norm(x);
    if n <= T::zero() || !n.is_finite() {
        return false;
    }
    x.iter_mut().for_each(|v| *v = *v / n);
    true
}

/// `phi(x) = (1/p) (sum_{M^c} |a_i^T x| - sum_M |a_i^T x|)`
pub fn phi<T: Scalar>(a: &ObservationMatrix<T>, adversaries: &AdversarySet, x: &[T]) -> T {
    let k: Vec<usize> = adversaries.iter().collect();
    condition_gap(a.rows(), x, &k) / T::from_usize_lossy(a.p())
}

/// Lower bound `eta` with `phi(x) >= eta ||x||` for a fixed adversary set,
/// computed by the same LP enumeration restricted to `K = M` plus the
/// extreme-ray minimisation on the sphere.
pub fn estimate_eta<T: Scalar>(
    a: &ObservationMatrix<T>,
    adversaries: &AdversarySet,
) -> Result<EtaEstimate<T>> {
    check_limits(a)?;
    if let Some(i) = adversaries.max_index() {
        a.check_node(i)?;
    }
    let tol = <T as LpField>::margin_tolerance();
    let k: Vec<usize> = adversaries.iter().collect();
    let lp = lp_min_margin(a.rows(), a.d(), std::slice::from_ref(&k))?
        .ok_or_else(|| Error::Lp("no feasible sign cone".into()))?;
    let (ray_value, ray) = min_over_rays(a, |r| phi(a, adversaries, r))
        .ok_or_else(|| Error::Lp("no extreme ray candidates".into()))?;

    let positive = lp.value > tol && ray_value > tol;
    let (margin, argmin_x) = if positive {
        (ray_value, ray)
    } else {
        let mut x = lp.x;
        normalize(&mut x);
        let v = phi(a, adversaries, &x);
        if v < ray_value {
            (v, x)
        } else {
            (ray_value, ray)
        }
    };
    Ok(EtaEstimate {
        eta: if positive { margin } else { T::zero() },
        margin,
        argmin_x,
        adversary_set: adversaries.clone(),
    })
}
