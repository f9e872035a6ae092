#![allow(dead_code)]

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use signfed::adversary::PolicyKind;
use signfed::config::named_matrix;
use signfed::engine::SimConfig;
use signfed::model::{AdversarySet, ProblemSpec, StepSchedule};
use signfed::net::{client_loop, serve, ClientOptions, ServeOptions, ServeOutcome};

/// `ones5` or `fig1_generic` with identity covariance and repelling adversaries
/// on the last `k` nodes.
pub fn named_config(name: &str, mu: Vec<f64>, k: usize) -> SimConfig<f64> {
    let a = named_matrix(name).unwrap();
    let (p, d) = (a.p(), a.d());
    let spec = ProblemSpec::gaussian(mu, ProblemSpec::<f64>::identity_covariance(d), AdversarySet::last(p, k)).unwrap();
    SimConfig::new(a, spec, StepSchedule::new(0.8, 0.6).unwrap())
        .with_adversary_policy(PolicyKind::Repel { magnitude: None })
}

/// Run a server and one in-process client per node; `delays[i]` is node i's delay.
pub fn live_run(config: &SimConfig<f64>, delays: &[Duration], opts: &ServeOptions) -> ServeOutcome {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let clients: Vec<_> = (0..config.matrix.p())
        .map(|i| {
            let cfg = config.clone();
            let policy = cfg.policies[i].clone();
            let delay = delays.get(i).copied().unwrap_or_default();
            thread::spawn(move || {
                let opts = ClientOptions {
                    delay,
                    ..ClientOptions::default()
                };
                client_loop(i, policy, &cfg, addr, &opts).unwrap()
            })
        })
        .collect();
    let outcome = serve(config, listener, opts).unwrap();
    for c in clients {
        c.join().unwrap();
    }
    outcome
}
