//! Adversary policies. Every policy is omniscient: it sees the queried
//! node, the current server state, the history of server iterates, the
//! matrix, the true mean and the sample an honest node would have returned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::sign;
use crate::model::{ObservationMatrix, State};
use crate::scalar::{dist, Scalar};

/// Policy selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    Honest,
    Constant {
        value: f64,
    },
    RandomUniform {
        lo: f64,
        hi: f64,
    },
    /// Reply `a_i^T x_n + s L` with `s = sign(a_i^T (x_n - mu))`. `magnitude`
    /// defaults to `1e3 * max_i ||a_i|| * (1 + ||x_0 - mu||)`.
    Repel {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        magnitude: Option<f64>,
    },
    /// Reply `a_i^T target` plus uniform jitter in `[-jitter, jitter]`.
    Collude {
        target: Vec<f64>,
        #[serde(default)]
        jitter: f64,
    },
}

impl PolicyKind {
    pub fn is_honest(&self) -> bool {
        matches!(self, Self::Honest)
    }
}

/// Default repel magnitude.
pub fn default_repel_magnitude<T: Scalar>(a: &ObservationMatrix<T>, x0: &[T], mu: &[T]) -> T {
    T::lit(1e3) * a.max_row_norm() * (T::one() + dist(x0, mu))
}

/// Everything a policy may read when answering one query.
pub struct QueryContext<'a, T> {
    pub node: usize,
    pub state: &'a State<T>,
    /// Flattened `x_0, x_1, ..., x_n` (each of length `d`), when recorded.
    pub x_history: &'a [T],
    pub matrix: &'a ObservationMatrix<T>,
    pub mu: &'a [T],
    pub true_sample: T,
}

impl<T: Scalar> QueryContext<'_, T> {
    /// Server iterate `x_k`, if the history holds it.
    pub fn past_x(&self, k: usize) -> Option<&[T]> {
        let d = self.matrix.d();
        self.x_history.get(k * d..(k + 1) * d)
    }
}

/// A policy instance with its private random stream.
#[derive(Debug, Clone)]
pub struct Policy {
    kind: PolicyKind,
    rng: ChaCha8Rng,
}

impl Policy {
    pub fn new(kind: PolicyKind, rng: ChaCha8Rng) -> Self {
        Self { kind, rng }
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn respond<T: Scalar>(&mut self, ctx: &QueryContext<'_, T>) -> T {
        match &self.kind {
            PolicyKind::Honest => ctx.true_sample,
            PolicyKind::Constant { value } => T::lit(*value),
            PolicyKind::RandomUniform { lo, hi } => {
                if lo < hi {
                    T::lit(self.rng.random_range(*lo..*hi))
                } else {
                    T::lit(*lo)
                }
            }
            PolicyKind::Repel { magnitude } => {
                let x = &ctx.state.x;
                let proj = ctx.matrix.project(ctx.node, x);
                let s = sign(proj - ctx.matrix.project(ctx.node, ctx.mu));
                let magnitude = magnitude
                    .map(T::lit)
                    .unwrap_or_else(|| default_repel_magnitude(ctx.matrix, x, ctx.mu));
                proj + T::lit(f64::from(s)) * magnitude
            }
            PolicyKind::Collude { target, jitter } => {
                let target: Vec<T> = target.iter().map(|&v| T::lit(v)).collect();
                let base = ctx.matrix.project(ctx.node, &target);
                if *jitter > 0.0 {
                    base + T::lit(self.rng.random_range(-*jitter..=*jitter))
                } else {
                    base
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ctx<'a>(
        a: &'a ObservationMatrix<f64>,
        state: &'a State<f64>,
        mu: &'a [f64],
        true_sample: f64,
    ) -> QueryContext<'a, f64> {
        QueryContext {
            node: 0,
            state,
            x_history: &[],
            matrix: a,
            mu,
            true_sample,
        }
    }

    fn policy(kind: PolicyKind) -> Policy {
        Policy::new(kind, ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn honest_passes_sample_through() {
        let a = ObservationMatrix::ones(3).unwrap();
        let state = State::new(vec![0.0], vec![0.0; 3]);
        assert_eq!(policy(PolicyKind::Honest).respond(&ctx(&a, &state, &[1.0], 3.7)), 3.7);
    }

    #[test]
    fn repel_pushes_away_from_mu() {
        let a = ObservationMatrix::ones(3).unwrap();
        let mu = 0.25;
        let state = State::new(vec![mu + 2.0], vec![0.0; 3]);
        let mut p = policy(PolicyKind::Repel { magnitude: Some(1e3) });
        assert_eq!(p.respond(&ctx(&a, &state, &[mu], 0.0)), mu + 2.0 + 1000.0);
        let below = State::new(vec![mu - 1.0], vec![0.0; 3]);
        assert_eq!(p.respond(&ctx(&a, &below, &[mu], 0.0)), mu - 1.0 - 1000.0);
    }

    #[test]
    fn collude_and_constant() {
        let a = ObservationMatrix::ones(3).unwrap();
        let state = State::new(vec![0.0], vec![0.0; 3]);
        let mut c = policy(PolicyKind::Collude {
            target: vec![6.0],
            jitter: 0.0,
        });
        assert_eq!(c.respond(&ctx(&a, &state, &[1.0], 0.0)), 6.0);
        let mut k = policy(PolicyKind::Constant { value: 42.0 });
        assert_eq!(k.respond(&ctx(&a, &state, &[1.0], 0.0)), 42.0);
    }

    #[test]
    fn random_uniform_stays_in_range() {
        let a = ObservationMatrix::ones(3).unwrap();
        let state = State::new(vec![0.0], vec![0.0; 3]);
        let mut r = policy(PolicyKind::RandomUniform { lo: -2.0, hi: 5.0 });
        for _ in 0..1000 {
            let v = r.respond(&ctx(&a, &state, &[1.0], 0.0));
            assert!((-2.0..5.0).contains(&v));
        }
    }

    #[test]
    fn policy_config_round_trips() {
        let kinds = vec![
            PolicyKind::Honest,
            PolicyKind::Repel { magnitude: None },
            PolicyKind::Collude {
                target: vec![1.0, 2.0],
                jitter: 0.1,
            },
        ];
        for k in kinds {
            let text = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<PolicyKind>(&text).unwrap(), k);
        }
    }
}
