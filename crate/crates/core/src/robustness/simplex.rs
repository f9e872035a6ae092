//! Dense two-phase tableau simplex with Bland's anti-cycling rule.
//!
//! Generic over [`LpField`] so the same code pivots in `f64` (with a small
//! tolerance) or in exact rationals (tolerance zero).

use crate::error::{Error, Result};
use crate::scalar::LpField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint<F> {
    pub coeffs: Vec<F>,
    pub relation: Relation,
    pub rhs: F,
}

/// `minimize c^T x` subject to linear constraints; each variable is either
/// non-negative or free.
#[derive(Debug, Clone)]
pub struct LinearProgram<F> {
    pub objective: Vec<F>,
    pub constraints: Vec<Constraint<F>>,
    pub free: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome<F> {
    Optimal { x: Vec<F>, value: F },
    Infeasible,
    Unbounded,
}

impl<F: LpField> LinearProgram<F> {
    pub fn new(objective: Vec<F>) -> Self {
        let n = objective.len();
        Self {
            objective,
            constraints: Vec::new(),
            free: vec![false; n],
        }
    }

    pub fn all_free(mut self) -> Self {
        self.free.iter_mut().for_each(|f| *f = true);
        self
    }

    pub fn constrain(&mut self, coeffs: Vec<F>, relation: Relation, rhs: F) {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> Result<LpOutcome<F>> {
        Tableau::build(self)?.run(self)
    }
}

struct Tableau<F> {
    // rows[r] has `cols + 1` entries; the last is the right-hand side.
    rows: Vec<Vec<F>>,
    basis: Vec<usize>,
    cols: usize,
    // Columns >= `artificial_start` are phase-1 artificials.
    artificial_start: usize,
    // Standard-form column -> (original variable, sign).
    var_map: Vec<Option<(usize, bool)>>,
}

impl<F: LpField> Tableau<F> {
    fn build(lp: &LinearProgram<F>) -> Result<Self> {
        let n = lp.objective.len();
        if lp.free.len() != n {
            return Err(Error::Lp("free-variable mask has wrong length".into()));
        }
        if let Some(c) = lp.constraints.iter().find(|c| c.coeffs.len() != n) {
            return Err(Error::Lp(format!(
                "constraint has {} coefficients, expected {n}",
                c.coeffs.len()
            )));
        }

        // Structural columns: x_j (or x_j^+ and x_j^- when free).
        let mut var_map = Vec::new();
        for (j, &free) in lp.free.iter().enumerate() {
            var_map.push(Some((j, true)));
            if free {
                var_map.push(Some((j, false)));
            }
        }
        let structural = var_map.len();
        let slack_count = lp
            .constraints
            .iter()
            .filter(|c| c.relation != Relation::Eq)
            .count();
        let m = lp.constraints.len();
        let artificial_start = structural + slack_count;
        let cols = artificial_start + m;
        var_map.resize(cols, None);

        let zero = F::zero();
        let mut rows = Vec::with_capacity(m);
        let mut slack = structural;
        for (r, c) in lp.constraints.iter().enumerate() {
            let mut row = vec![zero.clone(); cols + 1];
            let mut col = 0;
            for (j, &free) in lp.free.iter().enumerate() {
                row[col] = c.coeffs[j].clone();
                col += 1;
                if free {
                    row[col] = -c.coeffs[j].clone();
                    col += 1;
                }
            }
            match c.relation {
                Relation::Le => {
                    row[slack] = F::one();
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = -F::one();
                    slack += 1;
                }
                Relation::Eq => {}
            }
            row[cols] = c.rhs.clone();
            if row[cols] < zero {
                row.iter_mut().for_each(|v| *v = -v.clone());
            }
            row[artificial_start + r] = F::one();
            rows.push(row);
        }
        Ok(Self {
            rows,
            basis: (artificial_start..cols).collect(),
            cols,
            artificial_start,
            var_map,
        })
    }

    fn run(mut self, lp: &LinearProgram<F>) -> Result<LpOutcome<F>> {
        let tol = F::pivot_tolerance();

        // Phase 1: minimise the sum of artificials.
        let phase1_cost: Vec<F> = (0..self.cols)
            .map(|j| {
                if j >= self.artificial_start {
                    F::one()
                } else {
                    F::zero()
                }
            })
            .collect();
        if !self.optimize(&phase1_cost, self.cols)? {
            return Err(Error::Lp("phase 1 reported unbounded".into()));
        }
        let infeasibility = self
            .basis
            .iter()
            .zip(&self.rows)
            .filter(|(&b, _)| b >= self.artificial_start)
            .fold(F::zero(), |acc, (_, row)| acc + row[self.cols].clone());
        if infeasibility > tol {
            return Ok(LpOutcome::Infeasible);
        }
        self.evict_artificials();

        // Phase 2 on the original objective; artificials may not re-enter.
        let mut cost = vec![F::zero(); self.cols];
        for (col, map) in self.var_map.iter().enumerate() {
            if let Some((j, positive)) = map {
                cost[col] = if *positive {
                    lp.objective[*j].clone()
                } else {
                    -lp.objective[*j].clone()
                };
            }
        }
        if !self.optimize(&cost, self.artificial_start)? {
            return Ok(LpOutcome::Unbounded);
        }

        let mut x = vec![F::zero(); lp.objective.len()];
        for (r, &b) in self.basis.iter().enumerate() {
            if let Some((j, positive)) = self.var_map[b] {
                let v = self.rows[r][self.cols].clone();
                x[j] = if positive { x[j].clone() + v } else { x[j].clone() - v };
            }
        }
        let value = x
            .iter()
            .zip(&lp.objective)
            .fold(F::zero(), |acc, (xi, ci)| acc + xi.clone() * ci.clone());
        Ok(LpOutcome::Optimal { x, value })
    }

    /// Bland's rule iterations over columns `< allowed`. Returns `false` on
    /// an unbounded ray.
    fn optimize(&mut self, cost: &[F], allowed: usize) -> Result<bool> {
        let tol = F::pivot_tolerance();
        let limit = 50 * (self.rows.len() + self.cols) + 1000;
        for _ in 0..limit {
            let reduced = self.reduced_costs(cost);
            let Some(enter) = (0..allowed).find(|&j| reduced[j] < -tol.clone()) else {
                return Ok(true);
            };
            let mut leave: Option<(usize, F)> = None;
            for (r, row) in self.rows.iter().enumerate() {
                if row[enter] > tol {
                    let ratio = row[self.cols].clone() / row[enter].clone();
                    let better = match &leave {
                        None => true,
                        Some((lr, best)) => {
                            ratio < *best || (ratio == *best && self.basis[r] < self.basis[*lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((leave, _)) = leave else {
                return Ok(false);
            };
            self.pivot(leave, enter);
        }
        Err(Error::Lp("iteration limit reached".into()))
    }

    fn reduced_costs(&self, cost: &[F]) -> Vec<F> {
        let mut reduced = cost.to_vec();
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = cost[b].clone();
            if cb == F::zero() {
                continue;
            }
            for (j, v) in reduced.iter_mut().enumerate() {
                *v = v.clone() - cb.clone() * self.rows[r][j].clone();
            }
        }
        reduced
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col].clone();
        for v in self.rows[row].iter_mut() {
            *v = v.clone() / p.clone();
        }
        let pivot_row = self.rows[row].clone();
        for (r, other) in self.rows.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let factor = other[col].clone();
            if factor == F::zero() {
                continue;
            }
            for (v, pv) in other.iter_mut().zip(&pivot_row) {
                *v = v.clone() - factor.clone() * pv.clone();
            }
        }
        self.basis[row] = col;
    }

    /// Pivot zero-level artificials out of the basis; drop redundant rows.
    fn evict_artificials(&mut self) {
        let tol = F::pivot_tolerance();
        let mut r = 0;
        while r < self.rows.len() {
            if self.basis[r] < self.artificial_start {
                r += 1;
                continue;
            }
            match (0..self.artificial_start).find(|&j| self.rows[r][j].magnitude() > tol) {
                Some(col) => {
                    self.pivot(r, col);
                    r += 1;
                }
                None => {
                    self.rows.remove(r);
                    self.basis.remove(r);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;
    use num_rational::BigRational;

    fn optimum<F: LpField>(out: LpOutcome<F>) -> (Vec<F>, F) {
        match out {
            LpOutcome::Optimal { x, value } => (x, value),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn textbook_maximisation() {
        // max 3x + 5y  s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  -> (2, 6), 36
        let mut lp = LinearProgram::new(vec![-3.0f64, -5.0]);
        lp.constrain(vec![1.0, 0.0], Relation::Le, 4.0);
        lp.constrain(vec![0.0, 2.0], Relation::Le, 12.0);
        lp.constrain(vec![3.0, 2.0], Relation::Le, 18.0);
        let (x, v) = optimum(lp.solve().unwrap());
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 6.0).abs() < 1e-12);
        assert!((v + 36.0).abs() < 1e-12);
    }

    #[test]
    fn free_variables_and_equalities() {
        // min x + y  s.t. x - y = -3, x >= -5 with both free: y = x + 3, so the
        // objective 2x + 3 is minimised at x = -5, y = -2.
        let mut lp = LinearProgram::new(vec![1.0f64, 1.0]).all_free();
        lp.constrain(vec![1.0, -1.0], Relation::Eq, -3.0);
        lp.constrain(vec![1.0, 0.0], Relation::Ge, -5.0);
        let (x, v) = optimum(lp.solve().unwrap());
        assert!((x[0] + 5.0).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
        assert!((v + 7.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.constrain(vec![1.0], Relation::Ge, 2.0);
        lp.constrain(vec![1.0], Relation::Le, 1.0);
        assert_eq!(lp.solve().unwrap(), LpOutcome::Infeasible);

        let mut lp = LinearProgram::new(vec![-1.0, 0.0]);
        lp.constrain(vec![1.0, -1.0], Relation::Le, 1.0);
        assert_eq!(lp.solve().unwrap(), LpOutcome::Unbounded);
    }

    #[test]
    fn redundant_equalities() {
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.constrain(vec![1.0, 1.0], Relation::Eq, 1.0);
        lp.constrain(vec![2.0, 2.0], Relation::Eq, 2.0);
        let (x, v) = optimum(lp.solve().unwrap());
        assert_eq!(x, vec![1.0, 0.0]);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn degenerate_cycling_example_terminates() {
        // Beale's example cycles under the largest-coefficient rule.
        let mut lp = LinearProgram::new(vec![-0.75f64, 150.0, -0.02, 6.0]);
        lp.constrain(vec![0.25, -60.0, -0.04, 9.0], Relation::Le, 0.0);
        lp.constrain(vec![0.5, -90.0, -0.02, 3.0], Relation::Le, 0.0);
        lp.constrain(vec![0.0, 0.0, 1.0, 0.0], Relation::Le, 1.0);
        let (_, v) = optimum(lp.solve().unwrap());
        assert!((v + 0.05).abs() < 1e-12);
    }

    #[test]
    fn exact_rational_pivoting() {
        // min -x - y s.t. 3x + y <= 1, x + 3y <= 1 -> x = y = 1/4, value -1/2
        let mut lp = LinearProgram::new(vec![ratio(-1, 1), ratio(-1, 1)]);
        lp.constrain(vec![ratio(3, 1), ratio(1, 1)], Relation::Le, ratio(1, 1));
        lp.constrain(vec![ratio(1, 1), ratio(3, 1)], Relation::Le, ratio(1, 1));
        let (x, v): (Vec<BigRational>, BigRational) = optimum(lp.solve().unwrap());
        assert_eq!(x, vec![ratio(1, 4), ratio(1, 4)]);
        assert_eq!(v, ratio(-1, 2));
    }
}
