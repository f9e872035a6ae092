//! The two-timescale update, its limiting set-valued drift and the
//! drift/perturbation/noise split used to reason about it.

use crate::error::{Error, Result};
use crate::model::{GroundTruth, ObservationMatrix, State, StepSchedule};
use crate::scalar::{dot, Scalar};

/// Three-valued sign: `-1`, `0` (exact zero only) or `+1`. NaN maps to 0.
pub fn sign<T: Scalar>(r: T) -> i8 {
    if r > T::zero() {
        1
    } else if r < T::zero() {
        -1
    } else {
        0
    }
}

fn signed<T: Scalar>(s: i8) -> T {
    match s {
        1 => T::one(),
        -1 => -T::one(),
        _ => T::zero(),
    }
}

/// Apply one update in place and return the sign that drove `x`.
///
/// `x` moves by `alpha_n * a_i * sign(y_n(i) - a_i^T x_n)`, reading the
/// pre-update `y_n(i)`; then only `y(i)` moves toward the sample by `beta_n`.
pub fn step_in_place<T: Scalar>(
    state: &mut State<T>,
    i: usize,
    sample: T,
    a: &ObservationMatrix<T>,
    schedule: &StepSchedule<T>,
) -> Result<i8> {
    let alpha = schedule.alpha(state.n);
    let beta = schedule.beta(state.n);
    update_with_rates(state, i, sample, a, alpha, beta)
}

/// The update rule with explicit stepsizes for this iteration.
pub fn update_with_rates<T: Scalar>(
    state: &mut State<T>,
    i: usize,
    sample: T,
    a: &ObservationMatrix<T>,
    alpha: T,
    beta: T,
) -> Result<i8> {
    a.check_node(i)?;
    let s = sign(state.y[i] - a.project(i, &state.x));
    if s != 0 {
        let st: T = signed(s);
        for (xk, &ak) in state.x.iter_mut().zip(a.row(i)) {
            *xk = *xk + alpha * (st * ak);
        }
    }
    state.y[i] = state.y[i] + beta * (sample - state.y[i]);
    state.n += 1;
    Ok(s)
}

/// Pure form of [`step_in_place`].
pub fn step<T: Scalar>(
    state: &State<T>,
    i: usize,
    sample: T,
    a: &ObservationMatrix<T>,
    schedule: &StepSchedule<T>,
) -> Result<State<T>> {
    let mut next = state.clone();
    step_in_place(&mut next, i, sample, a, schedule)?;
    Ok(next)
}

/// An element `theta = (1/p) sum_i a_i lambda_i` of `h(x)` with its witness.
#[derive(Debug, Clone, PartialEq)]
pub struct HElement<T> {
    pub theta: Vec<T>,
    pub lambdas: Vec<T>,
}

/// Build an element of `h(x)`. Honest nodes with `a_i^T x != E[Y(i)]` get
/// the forced value `sign(E[Y(i)] - a_i^T x)`; every other coordinate is
/// free and takes `free(i)`, which must lie in `[-1, 1]`.
pub fn h_sample_with<T: Scalar>(
    x: &[T],
    a: &ObservationMatrix<T>,
    truth: &GroundTruth<T>,
    mut free: impl FnMut(usize) -> T,
) -> Result<HElement<T>> {
    if x.len() != a.d() || truth.p() != a.p() {
        return Err(Error::Dimension("h(x): x, matrix and ground truth disagree".into()));
    }
    let mut lambdas = Vec::with_capacity(a.p());
    for i in 0..a.p() {
        let gap = truth.expected_y()[i] - a.project(i, x);
        let lambda = if !truth.is_adversarial(i) && gap != T::zero() {
            signed(sign(gap))
        } else {
            let v = free(i);
            if !(v >= -T::one() && v <= T::one()) {
                return Err(Error::LambdaRange {
                    position: i,
                    value: v.to_f64_lossy(),
                });
            }
            v
        };
        lambdas.push(lambda);
    }
    Ok(HElement {
        theta: combine(a, &lambdas),
        lambdas,
    })
}

/// [`h_sample_with`] where adversarial coordinates (in ascending index order)
/// take `adversary_lambdas` and honest ties take 0.
pub fn h_sample<T: Scalar>(
    x: &[T],
    a: &ObservationMatrix<T>,
    truth: &GroundTruth<T>,
    adversary_lambdas: &[T],
) -> Result<HElement<T>> {
    let adversaries: Vec<usize> = (0..a.p()).filter(|&i| truth.is_adversarial(i)).collect();
    if adversaries.len() != adversary_lambdas.len() {
        return Err(Error::Dimension(format!(
            "expected {} adversary lambdas, got {}",
            adversaries.len(),
            adversary_lambdas.len()
        )));
    }
    h_sample_with(x, a, truth, |i| match adversaries.binary_search(&i) {
        Ok(pos) => adversary_lambdas[pos],
        Err(_) => T::zero(),
    })
}

fn combine<T: Scalar>(a: &ObservationMatrix<T>, lambdas: &[T]) -> Vec<T> {
    let p = T::from_usize_lossy(a.p());
    let mut theta = vec![T::zero(); a.d()];
    for (row, &l) in a.rows().iter().zip(lambdas) {
        for (t, &v) in theta.iter_mut().zip(row) {
            *t = *t + l * v;
        }
    }
    theta.iter_mut().for_each(|t| *t = *t / p);
    theta
}

/// `(1/p) sum_i ||a_i||`, the uniform bound on `||theta||` over `h(x)`.
pub fn h_bound<T: Scalar>(a: &ObservationMatrix<T>) -> T {
    a.rows()
        .iter()
        .fold(T::zero(), |acc, r| acc + crate::scalar::norm(r))
        / T::from_usize_lossy(a.p())
}

/// `x_{n+1} - x_n = alpha_n (g + b + noise)`.
///
/// Each term is a combination `(1/p) sum_j c_j a_j` with small integer
/// coefficients; the coefficients are kept so the identity can be evaluated
/// without rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementDecomposition<T> {
    pub g: Vec<T>,
    pub b: Vec<T>,
    pub noise: Vec<T>,
    pub g_coef: Vec<i32>,
    pub b_coef: Vec<i32>,
    pub noise_coef: Vec<i32>,
    /// The realised sign `sign(y_n(i) - a_i^T x_n)` for the queried node.
    pub sign: i8,
    pub node: usize,
}

impl<T: Scalar> IncrementDecomposition<T> {
    /// `g + b + noise` assembled from the integer coefficients.
    pub fn direction(&self, a: &ObservationMatrix<T>) -> Option<Vec<T>> {
        let p = T::from_usize_lossy(a.p());
        let mut dir: Option<Vec<T>> = None;
        for j in 0..a.p() {
            let c = self.g_coef[j] + self.b_coef[j] + self.noise_coef[j];
            if c == 0 {
                continue;
            }
            let scale = T::lit(f64::from(c)) / p;
            let term = a.row(j).iter().map(|&v| scale * v);
            dir = Some(match dir {
                None => term.collect(),
                Some(acc) => acc.iter().zip(term).map(|(&u, v)| u + v).collect(),
            });
        }
        dir
    }

    /// `x + alpha (g + b + noise)`.
    pub fn apply(&self, x: &[T], alpha: T, a: &ObservationMatrix<T>) -> Vec<T> {
        match self.direction(a) {
            None => x.to_vec(),
            Some(dir) => x.iter().zip(&dir).map(|(&xk, &dk)| xk + alpha * dk).collect(),
        }
    }
}

/// Split the update that querying node `i` would cause at `state`.
pub fn decompose<T: Scalar>(
    state: &State<T>,
    i: usize,
    a: &ObservationMatrix<T>,
    truth: &GroundTruth<T>,
) -> Result<IncrementDecomposition<T>> {
    a.check_node(i)?;
    state.check_against(a)?;
    let p = a.p();
    let mut g_coef = vec![0i32; p];
    let mut b_coef = vec![0i32; p];
    for j in 0..p {
        let proj = a.project(j, &state.x);
        let observed = i32::from(sign(state.y[j] - proj));
        if truth.is_adversarial(j) {
            g_coef[j] = observed;
        } else {
            let ideal = i32::from(sign(truth.expected_y()[j] - proj));
            g_coef[j] = ideal;
            b_coef[j] = observed - ideal;
        }
    }
    let s = sign(state.y[i] - a.project(i, &state.x));
    let noise_coef: Vec<i32> = (0..p)
        .map(|j| {
            let realised = if j == i { p as i32 * i32::from(s) } else { 0 };
            realised - g_coef[j] - b_coef[j]
        })
        .collect();
    let to_vec = |coef: &[i32]| {
        let lambdas: Vec<T> = coef.iter().map(|&c| T::lit(f64::from(c))).collect();
        combine(a, &lambdas)
    };
    Ok(IncrementDecomposition {
        g: to_vec(&g_coef),
        b: to_vec(&b_coef),
        noise: to_vec(&noise_coef),
        g_coef,
        b_coef,
        noise_coef,
        sign: s,
        node: i,
    })
}

/// `(1/p) sum_j a_j sign(y(j) - a_j^T x)`: the conditional mean of the
/// realised direction when the queried node is uniform.
pub fn mean_direction<T: Scalar>(state: &State<T>, a: &ObservationMatrix<T>) -> Vec<T> {
    let lambdas: Vec<T> = (0..a.p())
        .map(|j| signed(sign(state.y[j] - a.project(j, &state.x))))
        .collect();
    combine(a, &lambdas)
}

/// Directional derivative of `V(x) = ||x - mu||^2 / 2` along `theta`.
pub fn lyapunov_dd<T: Scalar>(x: &[T], theta: &HElement<T>, mu: &[T]) -> T {
    let diff: Vec<T> = x.iter().zip(mu).map(|(&u, &v)| u - v).collect();
    dot(&diff, &theta.theta)
}

/// Adversarial selections for the limiting inclusion.
#[derive(Debug, Clone, PartialEq)]
pub enum DiAdversary<T> {
    /// `lambda_i = sign(a_i^T (x - mu))`: pushes `x` away from `mu` as hard as allowed.
    Worst,
    Constant(T),
    Zero,
}

impl<T: Scalar> DiAdversary<T> {
    pub fn lambdas(&self, a: &ObservationMatrix<T>, truth: &GroundTruth<T>, x: &[T]) -> Vec<T> {
        (0..a.p())
            .filter(|&i| truth.is_adversarial(i))
            .map(|i| match self {
                Self::Worst => signed(sign(a.project(i, x) - truth.expected_y()[i])),
                Self::Constant(v) => *v,
                Self::Zero => T::zero(),
            })
            .collect()
    }
}

/// Explicit Euler path of `x' in h(x)` with `theta_k = h(x_k; selection(k, x_k))`.
/// Returns `steps + 1` points including `x0`.
pub fn integrate_di<T: Scalar>(
    x0: &[T],
    a: &ObservationMatrix<T>,
    truth: &GroundTruth<T>,
    mut selection: impl FnMut(usize, &[T]) -> Vec<T>,
    dt: T,
    steps: usize,
) -> Result<Vec<Vec<T>>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    path.push(x.clone());
    for k in 0..steps {
        let lambdas = selection(k, &x);
        let el = h_sample(&x, a, truth, &lambdas)?;
        for (xc, &tc) in x.iter_mut().zip(&el.theta) {
            *xc = *xc + dt * tc;
        }
        path.push(x.clone());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdversarySet, ProblemSpec};

    fn ones5(adv: &[usize], mu: f64) -> (ObservationMatrix<f64>, GroundTruth<f64>) {
        let a = ObservationMatrix::ones(5).unwrap();
        let spec = ProblemSpec::gaussian(vec![mu], vec![vec![1.0]], AdversarySet::new(adv.iter().copied()))
            .unwrap();
        let truth = GroundTruth::new(&spec, &a).unwrap();
        (a, truth)
    }

    #[test]
    fn sign_cases() {
        assert_eq!(sign(-3.5), -1);
        assert_eq!(sign(0.0), 0);
        assert_eq!(sign(-0.0), 0);
        assert_eq!(sign(1e-300), 1);
    }

    #[test]
    fn step_hand_example() {
        let a = ObservationMatrix::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let mut state = State::new(vec![0.0], vec![1.0, -1.0]);
        let s = update_with_rates(&mut state, 0, 2.0, &a, 0.1, 0.5).unwrap();
        assert_eq!(s, 1);
        assert_eq!(state.x, vec![0.1]);
        assert_eq!(state.y, vec![1.5, -1.0]);
        assert_eq!(state.n, 1);
    }

    #[test]
    fn step_reads_schedule_at_n() {
        let a = ObservationMatrix::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let schedule = StepSchedule::new(0.8, 0.6).unwrap();
        let mut state = State::new(vec![0.0f64], vec![1.0, -1.0]);
        state.n = 17;
        let next = step(&state, 1, 2.0, &a, &schedule).unwrap();
        assert_eq!(next.x, vec![-schedule.alpha(17)]);
        assert_eq!(next.y, vec![1.0, -1.0 + schedule.beta(17) * 3.0]);
        assert_eq!(next.n, 18);
        // |x' - x| is alpha_n ||a_i|| or zero
        assert_eq!((next.x[0] - state.x[0]).abs(), schedule.alpha(17));
    }

    #[test]
    fn zero_sign_leaves_x() {
        let a = ObservationMatrix::new(vec![vec![1.0, 2.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let schedule = StepSchedule::new(0.8, 0.6).unwrap();
        let state = State::new(vec![1.0, 1.0], vec![3.0, 0.0, 0.0]);
        let next = step(&state, 0, 10.0, &a, &schedule).unwrap();
        assert_eq!(next.x, state.x);
        assert_eq!(next.y[0], 10.0);
        assert!(step(&state, 3, 0.0, &a, &schedule).is_err());
    }

    #[test]
    fn h_sample_examples() {
        let (a, truth) = ones5(&[3, 4], 0.0);
        let el = h_sample(&[1.0], &a, &truth, &[1.0, 1.0]).unwrap();
        assert!((el.theta[0] + 0.2).abs() < 1e-15);
        assert_eq!(el.lambdas, vec![-1.0, -1.0, -1.0, 1.0, 1.0]);
        assert!((lyapunov_dd(&[1.0], &el, &[0.0]) + 0.2).abs() < 1e-15);

        // At mu every coordinate is free; zeros give theta = 0.
        let el = h_sample(&[0.0], &a, &truth, &[0.0, 0.0]).unwrap();
        assert_eq!(el.theta, vec![0.0]);
        assert_eq!(lyapunov_dd(&[0.0], &el, &[0.0]), 0.0);

        assert!(matches!(
            h_sample(&[1.0], &a, &truth, &[1.5, 0.0]),
            Err(Error::LambdaRange { .. })
        ));
        assert!(h_sample(&[1.0], &a, &truth, &[1.0]).is_err());
    }

    #[test]
    fn h_all_forced_positive() {
        let a = ObservationMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let spec = ProblemSpec::gaussian(
            vec![5.0, 5.0],
            ProblemSpec::identity_covariance(2),
            AdversarySet::empty(),
        )
        .unwrap();
        let truth = GroundTruth::new(&spec, &a).unwrap();
        let el = h_sample(&[0.0, 0.0], &a, &truth, &[]).unwrap();
        assert_eq!(el.lambdas, vec![1.0; 3]);
        assert_eq!(el.theta, vec![2.0 / 3.0, 1.0]);
    }

    #[test]
    fn decomposition_without_perturbation() {
        let (a, truth) = ones5(&[4], 1.0);
        let state = State::new(vec![0.3], vec![1.0, 1.0, 1.0, 1.0, -7.0]);
        let dec = decompose(&state, 2, &a, &truth).unwrap();
        assert!(dec.b.iter().all(|&v| v == 0.0));
        assert!(dec.b_coef.iter().all(|&c| c == 0));
        let next = step(&state, 2, 0.0, &a, &StepSchedule::new(0.8, 0.6).unwrap()).unwrap();
        assert_eq!(dec.apply(&state.x, 1.0, &a), next.x);
    }

    #[test]
    fn di_converges_on_robust_scalar_example() {
        let (a, truth) = ones5(&[3, 4], 0.0);
        let path = integrate_di(&[1.0], &a, &truth, |_, _| vec![1.0, 1.0], 0.01, 600).unwrap();
        let hit = path.iter().position(|x| x[0].abs() < 0.01).unwrap();
        assert!(hit <= 600);
        // drift is -0.2 per unit time until mu is reached
        assert!((path[100][0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn di_equilibrium_without_adversaries() {
        let (a, truth) = ones5(&[], 2.0);
        let path = integrate_di(&[2.0], &a, &truth, |_, _| vec![], 0.01, 100).unwrap();
        assert!(path.iter().all(|x| x[0] == 2.0));
    }

    #[test]
    fn di_diverges_without_robustness() {
        let (a, truth) = ones5(&[2, 3, 4], 0.0);
        let path = integrate_di(&[1.0], &a, &truth, |_, _| vec![1.0; 3], 0.01, 500).unwrap();
        assert!(path.windows(2).all(|w| w[1][0].abs() >= w[0][0].abs()));
        assert!((path[500][0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn di_rejects_bad_dt() {
        let (a, truth) = ones5(&[], 0.0);
        assert!(integrate_di(&[0.0], &a, &truth, |_, _| vec![], 0.0, 1).is_err());
    }
}
