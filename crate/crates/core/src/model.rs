//! Domain types: the observation matrix, the estimation problem, stepsize
//! schedules and the server state, plus sampling of the latent vector `X`
//! and node observations `Y(i) = a_i^T X + b(i)`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::{dot, norm, Scalar};

/// Tall, full-column-rank matrix whose row `a_i` defines node `i`'s view of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix<T> {
    rows: Vec<Vec<T>>,
    d: usize,
}

impl<T: Scalar> ObservationMatrix<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let p = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if p == 0 || d == 0 {
            return Err(Error::Dimension("observation matrix is empty".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Dimension(format!(
                "row {i} has {} entries, expected {d}",
                rows[i].len()
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("observation matrix has non-finite entries".into()));
        }
        if p <= d {
            return Err(Error::NotTall { p, d });
        }
        let rank = linalg::rank(&rows, d);
        if rank < d {
            return Err(Error::RankDeficient { rank, d });
        }
        Ok(Self { rows, d })
    }

    /// `p x 1` column of ones: the scalar geometric-median instance.
    pub fn ones(p: usize) -> Result<Self> {
        Self::new(vec![vec![T::one()]; p])
    }

    pub fn p(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    /// `a_i^T x`
    pub fn project(&self, i: usize, x: &[T]) -> T {
        dot(&self.rows[i], x)
    }

    /// `C_M = max_i ||a_i||`
    pub fn max_row_norm(&self) -> T {
        self.rows
            .iter()
            .map(|r| norm(r))
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// `A x`
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.p()).map(|i| self.project(i, x)).collect()
    }

    pub fn check_node(&self, i: usize) -> Result<()> {
        if i < self.p() {
            Ok(())
        } else {
            Err(Error::NodeIndex { index: i, p: self.p() })
        }
    }
}

/// The set `M` of adversarial node indices (0-based).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdversarySet {
    members: BTreeSet<usize>,
}

impl AdversarySet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            members: indices.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// The last `k` of `p` nodes.
    pub fn last(p: usize, k: usize) -> Self {
        Self::new(p.saturating_sub(k)..p)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.members.iter().next_back().copied()
    }

    /// Membership mask of length `p`.
    pub fn mask(&self, p: usize) -> Vec<bool> {
        (0..p).map(|i| self.contains(i)).collect()
    }
}

/// A distribution for the latent vector `X`.
pub trait LatentDistribution<T: Scalar> {
    fn dim(&self) -> usize;

    fn mean(&self) -> &[T];

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [T]);
}

/// Gaussian `X ~ N(mu, L L^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent<T> {
    mu: Vec<T>,
    factor: Vec<Vec<T>>,
}

impl<T: Scalar> GaussianLatent<T> {
    pub fn new(mu: Vec<T>, covariance: &[Vec<T>]) -> Result<Self> {
        if covariance.len() != mu.len() {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}, mean has length {}",
                covariance.len(),
                covariance.len(),
                mu.len()
            )));
        }
        let factor = linalg::psd_factor(covariance, 1e-9)?;
        Ok(Self { mu, factor })
    }
}

impl<T: Scalar> LatentDistribution<T> for GaussianLatent<T> {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn mean(&self) -> &[T] {
        &self.mu
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [T]) {
        let d = self.mu.len();
        let mut z = [0.0f64; 16];
        let mut z_heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            z_heap = vec![0.0; d];
            &mut z_heap
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (r, slot) in out.iter_mut().enumerate() {
            let shift = self.factor[r]
                .iter()
                .zip(z.iter())
                .fold(T::zero(), |acc, (&l, &zk)| acc + l * T::lit(zk));
            *slot = self.mu[r] + shift;
        }
    }
}

/// The estimation problem: latent distribution, adversary set and sample
/// perturbation bound. Ground truth lives here and is only read by the
/// harness (metrics, omniscient adversaries, decomposition checks).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec<T> {
    latent: GaussianLatent<T>,
    covariance: Vec<Vec<T>>,
    adversaries: AdversarySet,
    m_bound: usize,
    perturbation_bound: T,
}

impl<T: Scalar> ProblemSpec<T> {
    pub fn new(
        mu: Vec<T>,
        covariance: Vec<Vec<T>>,
        adversaries: AdversarySet,
        m_bound: usize,
        perturbation_bound: T,
    ) -> Result<Self> {
        if adversaries.len() > m_bound {
            return Err(Error::InvalidProblem(format!(
                "|M| = {} exceeds the bound m = {m_bound}",
                adversaries.len()
            )));
        }
        if !(perturbation_bound >= T::zero() && perturbation_bound.is_finite()) {
            return Err(Error::InvalidProblem(
                "perturbation bound must be finite and non-negative".into(),
            ));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("mean must be finite".into()));
        }
        let latent = GaussianLatent::new(mu, &covariance)?;
        Ok(Self {
            latent,
            covariance,
            adversaries,
            m_bound,
            perturbation_bound,
        })
    }

    /// Gaussian problem with `m = |M|` and no sample perturbation.
    pub fn gaussian(mu: Vec<T>, covariance: Vec<Vec<T>>, adversaries: AdversarySet) -> Result<Self> {
        let m = adversaries.len();
        Self::new(mu, covariance, adversaries, m, T::zero())
    }

    pub fn identity_covariance(d: usize) -> Vec<Vec<T>> {
        (0..d)
            .map(|r| (0..d).map(|c| if r == c { T::one() } else { T::zero() }).collect())
            .collect()
    }

    pub fn mu(&self) -> &[T] {
        self.latent.mean()
    }

    pub fn covariance(&self) -> &[Vec<T>] {
        &self.covariance
    }

    pub fn adversaries(&self) -> &AdversarySet {
        &self.adversaries
    }

    pub fn m_bound(&self) -> usize {
        self.m_bound
    }

    pub fn perturbation_bound(&self) -> T {
        self.perturbation_bound
    }

    pub fn latent(&self) -> &GaussianLatent<T> {
        &self.latent
    }

    pub fn dim(&self) -> usize {
        self.latent.dim()
    }

    pub fn check_against(&self, a: &ObservationMatrix<T>) -> Result<()> {
        if a.d() != self.dim() {
            return Err(Error::Dimension(format!(
                "mean has dimension {}, matrix has d={}",
                self.dim(),
                a.d()
            )));
        }
        if let Some(i) = self.adversaries.max_index() {
            a.check_node(i)?;
        }
        Ok(())
    }

    /// Same problem with a different adversary set (and `m = |M|` if larger).
    pub fn with_adversaries(&self, adversaries: AdversarySet) -> Self {
        let mut out = self.clone();
        out.m_bound = out.m_bound.max(adversaries.len());
        out.adversaries = adversaries;
        out
    }
}

/// `E[Y]`, `mu` and the adversary mask for one (problem, matrix) pair.
/// Constructing one is the "ground-truth capability": only harness code
/// (metrics, decomposition, omniscient adversaries) should hold it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    mu: Vec<T>,
    expected_y: Vec<T>,
    adversarial: Vec<bool>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn new(spec: &ProblemSpec<T>, a: &ObservationMatrix<T>) -> Result<Self> {
        spec.check_against(a)?;
        Ok(Self {
            mu: spec.mu().to_vec(),
            expected_y: a.apply(spec.mu()),
            adversarial: spec.adversaries().mask(a.p()),
        })
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    /// `E[Y(i)] = a_i^T mu`; the bounded perturbation has zero mean.
    pub fn expected_y(&self) -> &[T] {
        &self.expected_y
    }

    pub fn is_adversarial(&self, i: usize) -> bool {
        self.adversarial[i]
    }

    pub fn adversarial_mask(&self) -> &[bool] {
        &self.adversarial
    }

    pub fn p(&self) -> usize {
        self.adversarial.len()
    }

    pub fn honest_count(&self) -> usize {
        self.adversarial.iter().filter(|&&m| !m).count()
    }

    /// `||y - E[Y]||_{M^c}`
    pub fn honest_error(&self, y: &[T]) -> T {
        y.iter()
            .zip(&self.expected_y)
            .zip(&self.adversarial)
            .filter(|(_, &adv)| !adv)
            .fold(T::zero(), |acc, ((&v, &e), _)| acc + (v - e) * (v - e))
            .sqrt()
    }

    /// `||A x - E[Y]||_1`, exposed as a diagnostic only.
    pub fn l1_objective(&self, a: &ObservationMatrix<T>, x: &[T]) -> T {
        (0..a.p()).fold(T::zero(), |acc, i| {
            acc + (a.project(i, x) - self.expected_y[i]).abs()
        })
    }
}

/// Draw `X` from the problem's latent distribution.
pub fn sample_x<T: Scalar, R: Rng + ?Sized>(spec: &ProblemSpec<T>, rng: &mut R) -> Vec<T> {
    let mut out = vec![T::zero(); spec.dim()];
    spec.latent().draw(rng, &mut out);
    out
}

/// Draw one observation `Y(i) = a_i^T X + b(i)` with `b(i) ~ U[-B, B]`.
pub fn sample_y<T: Scalar, R: Rng + ?Sized>(
    spec: &ProblemSpec<T>,
    a: &ObservationMatrix<T>,
    i: usize,
    rng: &mut R,
) -> Result<T> {
    a.check_node(i)?;
    let x = sample_x(spec, rng);
    let clean = a.project(i, &x);
    let bound = spec.perturbation_bound();
    if bound > T::zero() {
        let b = bound.to_f64_lossy();
        Ok(clean + T::lit(rng.random_range(-b..=b)))
    } else {
        Ok(clean)
    }
}

/// One clause of the stepsize admissibility conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleClause {
    AlphaRange,
    BetaRange,
    BetaAboveTwoOneMinusAlpha,
    BetaBelowAlpha,
    OffsetPositive,
}

impl fmt::Display for ScheduleClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::AlphaRange => "α ∈ (2/3,1]",
            Self::BetaRange => "β ∈ (1/2,1]",
            Self::BetaAboveTwoOneMinusAlpha => "β > 2(1−α)",
            Self::BetaBelowAlpha => "β < α",
            Self::OffsetPositive => "offset ≥ 1",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleVerdict {
    pub violations: Vec<ScheduleClause>,
}

impl ScheduleVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Admissibility of `alpha_n = (n+1)^-α`, `beta_n = (n+1)^-β`.
pub fn validate_schedule(alpha: f64, beta: f64) -> ScheduleVerdict {
    let mut violations = Vec::new();
    if !(alpha > 2.0 / 3.0 && alpha <= 1.0) {
        violations.push(ScheduleClause::AlphaRange);
    }
    if !(beta > 0.5 && beta <= 1.0) {
        violations.push(ScheduleClause::BetaRange);
    }
    if !(beta > 2.0 * (1.0 - alpha)) {
        violations.push(ScheduleClause::BetaAboveTwoOneMinusAlpha);
    }
    if !(beta < alpha) {
        violations.push(ScheduleClause::BetaBelowAlpha);
    }
    ScheduleVerdict { violations }
}

/// Polynomial stepsizes `alpha_n = (n + offset)^-α`, `beta_n = (n + offset)^-β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule<T> {
    alpha_exponent: T,
    beta_exponent: T,
    offset: u64,
}

impl<T: Scalar> StepSchedule<T> {
    pub fn new(alpha_exponent: T, beta_exponent: T) -> Result<Self> {
        Self::with_offset(alpha_exponent, beta_exponent, 1)
    }

    pub fn with_offset(alpha_exponent: T, beta_exponent: T, offset: u64) -> Result<Self> {
        let mut verdict =
            validate_schedule(alpha_exponent.to_f64_lossy(), beta_exponent.to_f64_lossy());
        if offset == 0 {
            verdict.violations.push(ScheduleClause::OffsetPositive);
        }
        if !verdict.is_valid() {
            return Err(Error::InvalidSchedule(
                verdict.violations.iter().map(ToString::to_string).collect(),
            ));
        }
        Ok(Self {
            alpha_exponent,
            beta_exponent,
            offset,
        })
    }

    pub fn alpha_exponent(&self) -> T {
        self.alpha_exponent
    }

    pub fn beta_exponent(&self) -> T {
        self.beta_exponent
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn base(&self, n: u64) -> T {
        <T as num_traits::NumCast>::from(n + self.offset).expect("iteration index overflow")
    }

    pub fn alpha(&self, n: u64) -> T {
        self.base(n).powf(-self.alpha_exponent)
    }

    pub fn beta(&self, n: u64) -> T {
        self.base(n).powf(-self.beta_exponent)
    }

    /// `gamma_n = sqrt(beta_n ln(sum_{k<=n} beta_k))`, clamped to 0 while the
    /// logarithm is non-positive. O(n); use [`GammaSeries`] inside loops.
    pub fn gamma(&self, n: u64) -> T {
        let sum = (0..=n).fold(T::zero(), |acc, k| acc + self.beta(k));
        gamma_from(self.beta(n), sum)
    }

    pub fn gamma_series(&self) -> GammaSeries<T> {
        GammaSeries {
            schedule: *self,
            next: 0,
            beta_sum: T::zero(),
        }
    }
}

fn gamma_from<T: Scalar>(beta: T, beta_sum: T) -> T {
    let log = beta_sum.ln();
    if log > T::zero() {
        (beta * log).sqrt()
    } else {
        T::zero()
    }
}

/// Incremental `gamma_0, gamma_1, ...` with a cached partial sum of `beta_k`.
#[derive(Debug, Clone)]
pub struct GammaSeries<T> {
    schedule: StepSchedule<T>,
    next: u64,
    beta_sum: T,
}

impl<T: Scalar> GammaSeries<T> {
    /// Index of the value the next call to `next()` returns.
    pub fn position(&self) -> u64 {
        self.next
    }
}

impl<T: Scalar> Iterator for GammaSeries<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        let beta = self.schedule.beta(self.next);
        self.beta_sum = self.beta_sum + beta;
        self.next += 1;
        Some(gamma_from(beta, self.beta_sum))
    }
}

/// Server state `(x_n, y_n, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct State<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub n: u64,
}

impl<T: Scalar> State<T> {
    pub fn new(x0: Vec<T>, y0: Vec<T>) -> Self {
        Self { x: x0, y: y0, n: 0 }
    }

    pub fn zeros(d: usize, p: usize) -> Self {
        Self::new(vec![T::zero(); d], vec![T::zero(); p])
    }

    pub fn check_against(&self, a: &ObservationMatrix<T>) -> Result<()> {
        if self.x.len() != a.d() || self.y.len() != a.p() {
            return Err(Error::Dimension(format!(
                "state has |x|={}, |y|={}, matrix is {}x{}",
                self.x.len(),
                self.y.len(),
                a.p(),
                a.d()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        assert!(validate_schedule(0.8, 0.6).is_valid());
        let bad = validate_schedule(0.5, 0.6);
        assert!(bad.violations.contains(&ScheduleClause::AlphaRange));
        assert_eq!(bad.violations[0].to_string(), "α ∈ (2/3,1]");
        assert!(validate_schedule(1.0, 0.75).is_valid());
        // beta must sit strictly below alpha
        assert!(validate_schedule(0.8, 0.8)
            .violations
            .contains(&ScheduleClause::BetaBelowAlpha));
        assert!(validate_schedule(0.7, 0.55)
            .violations
            .contains(&ScheduleClause::BetaAboveTwoOneMinusAlpha));
        assert!(StepSchedule::<f64>::with_offset(0.8, 0.6, 0).is_err());
    }

    #[test]
    fn first_steps_do_not_exceed_one() {
        let s = StepSchedule::<f64>::new(0.8, 0.6).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.beta(0), 1.0);
        assert!(s.alpha(1) < 1.0 && s.beta(1) < 1.0);
    }

    #[test]
    fn gamma_values() {
        let s = StepSchedule::<f64>::new(0.8, 0.6).unwrap();
        assert_eq!(s.gamma(0), 0.0);
        let b1 = 2f64.powf(-0.6);
        let expected = (b1 * (1.0 + b1).ln()).sqrt();
        assert!((s.gamma(1) - expected).abs() < 1e-15);
        let series: Vec<f64> = s.gamma_series().take(50).collect();
        for (n, g) in series.iter().enumerate() {
            assert!((g - s.gamma(n as u64)).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_vanishes() {
        let s = StepSchedule::<f64>::new(0.8, 0.6).unwrap();
        let mut series = s.gamma_series();
        let g3 = series.nth(1_000).unwrap();
        let g6 = series.nth(1_000_000 - 1_001).unwrap();
        assert!(g6 < 0.2 * g3, "gamma_1e3={g3}, gamma_1e6={g6}");
    }

    #[test]
    fn alpha_over_beta_decreases() {
        let s = StepSchedule::<f64>::new(0.8, 0.6).unwrap();
        let ratios: Vec<f64> = [100u64, 1_000, 10_000, 100_000, 1_000_000]
            .iter()
            .map(|&n| s.alpha(n) / s.beta(n))
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn alpha_gamma_tail_is_summable() {
        // Tail of sum alpha_k gamma_k behaves like n^{1 - α - β/2} sqrt(ln n).
        let s = StepSchedule::<f64>::new(0.8, 0.6).unwrap();
        let mut sum = 0.0;
        let mut at_1e5 = 0.0;
        let mut gammas = s.gamma_series();
        for n in 0..1_000_000u64 {
            sum += s.alpha(n) * gammas.next().unwrap();
            if n + 1 == 100_000 {
                at_1e5 = sum;
            }
        }
        let n = 1e5f64;
        let exponent = 0.8 + 0.3 - 1.0;
        let tail_bound = n.powf(-exponent) * (2.5 * n.powf(0.4)).ln().sqrt() / exponent;
        assert!(sum - at_1e5 < 10.0 * tail_bound, "{} vs {}", sum - at_1e5, tail_bound);
    }

    #[test]
    fn matrix_validation() {
        assert!(matches!(
            ObservationMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            Err(Error::NotTall { .. })
        ));
        assert!(matches!(
            ObservationMatrix::new(vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]),
            Err(Error::RankDeficient { rank: 1, d: 2 })
        ));
        assert!(ObservationMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0]]).is_err());
        let a = ObservationMatrix::<f64>::ones(5).unwrap();
        assert_eq!((a.p(), a.d()), (5, 1));
    }

    #[test]
    fn problem_validation() {
        let cov = ProblemSpec::<f64>::identity_covariance(1);
        assert!(ProblemSpec::new(vec![1.0], cov.clone(), AdversarySet::new([0, 1]), 1, 0.0).is_err());
        assert!(ProblemSpec::new(vec![1.0], cov.clone(), AdversarySet::empty(), 0, -1.0).is_err());
        assert!(ProblemSpec::new(vec![1.0], vec![vec![-1.0]], AdversarySet::empty(), 0, 0.0).is_err());
        let spec = ProblemSpec::gaussian(vec![1.0], cov, AdversarySet::new([7])).unwrap();
        assert!(spec.check_against(&ObservationMatrix::ones(5).unwrap()).is_err());
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let spec = ProblemSpec::gaussian(
            vec![0.3, -1.7],
            vec![vec![0.0; 2]; 2],
            AdversarySet::empty(),
        )
        .unwrap();
        let a = ObservationMatrix::new(vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_x(&spec, &mut rng), vec![0.3, -1.7]);
            assert_eq!(sample_y(&spec, &a, 1, &mut rng).unwrap(), a.project(1, &[0.3, -1.7]));
        }
        assert!(sample_y(&spec, &a, 3, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ProblemSpec::gaussian(
            vec![1.0, 2.0],
            ProblemSpec::identity_covariance(2),
            AdversarySet::empty(),
        )
        .unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_x(&spec, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn empirical_mean_within_clt_band() {
        let cov = vec![vec![2.0, 0.6], vec![0.6, 0.5]];
        let spec = ProblemSpec::gaussian(vec![1.0, -2.0], cov.clone(), AdversarySet::empty()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        for _ in 0..n {
            let x = sample_x(&spec, &mut rng);
            sum[0] += x[0];
            sum[1] += x[1];
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let band = 4.0 * cov[k][k].sqrt() / (n as f64).sqrt();
            assert!((mean - spec.mu()[k]).abs() < band, "coord {k}: {mean}");
        }
    }

    #[test]
    fn observation_moments_within_clt_band() {
        let cov = vec![vec![1.0, 0.3], vec![0.3, 2.0]];
        let spec = ProblemSpec::gaussian(vec![0.5, 1.5], cov.clone(), AdversarySet::empty()).unwrap();
        let a = ObservationMatrix::new(vec![vec![1.0, -1.0], vec![2.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let ai = a.row(1);
        let var: f64 = (0..2)
            .map(|r| (0..2).map(|c| ai[r] * cov[r][c] * ai[c]).sum::<f64>())
            .sum();
        let samples: Vec<f64> = (0..n).map(|_| sample_y(&spec, &a, 1, &mut rng).unwrap()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let emp_var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = a.project(1, spec.mu());
        assert!((mean - target).abs() < 4.0 * var.sqrt() / (n as f64).sqrt());
        // variance of the sample variance of a Gaussian: 2 sigma^4 / (n - 1)
        assert!((emp_var - var).abs() < 4.0 * var * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn perturbation_stays_in_band() {
        let spec = ProblemSpec::new(
            vec![1.0],
            vec![vec![0.0]],
            AdversarySet::empty(),
            0,
            0.5,
        )
        .unwrap();
        let a = ObservationMatrix::<f64>::ones(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..1000).map(|_| sample_y(&spec, &a, 0, &mut rng).unwrap()).collect();
        assert!(samples.iter().all(|s| (s - 1.0).abs() <= 0.5));
        assert!(samples.iter().any(|s| (s - 1.0).abs() > 0.25));
    }

    #[test]
    fn honest_error_skips_adversaries() {
        let a = ObservationMatrix::<f64>::ones(3).unwrap();
        let spec = ProblemSpec::gaussian(vec![1.0], vec![vec![1.0]], AdversarySet::new([2])).unwrap();
        let truth = GroundTruth::new(&spec, &a).unwrap();
        assert_eq!(truth.honest_error(&[4.0, 1.0, 100.0]), 3.0);
        assert_eq!(truth.honest_count(), 2);
        assert_eq!(truth.l1_objective(&a, &[0.0]), 3.0);
    }
}
