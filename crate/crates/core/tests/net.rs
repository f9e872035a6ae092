mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use signfed::adversary::PolicyKind;
use signfed::engine::replay;
use signfed::net::{client_loop, serve, ClientOptions, ServeOptions, WireMessage};

use common::{live_run, named_config};

fn read_msg(r: &mut impl BufRead) -> Option<WireMessage> {
    let mut line = String::new();
    match r.read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(WireMessage::decode(&line).unwrap()),
    }
}

fn write_msg(s: &mut TcpStream, m: &WireMessage) {
    s.write_all(m.encode().as_bytes()).unwrap();
}

/// Accept one client and ask it `queries` times; returns the sample values.
fn fake_server_session(listener: &TcpListener, node: usize, queries: u64) -> Vec<f64> {
    let (mut s, _) = listener.accept().unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    assert_eq!(read_msg(&mut r), Some(WireMessage::Hello { node }));
    let mut values = Vec::new();
    for round in 1..=queries {
        write_msg(&mut s, &WireMessage::Query { round, node });
        match read_msg(&mut r) {
            Some(WireMessage::Sample { round: got, node: n, value }) => {
                assert_eq!((got, n), (round, node));
                values.push(value);
            }
            other => panic!("expected a sample, got {other:?}"),
        }
    }
    write_msg(&mut s, &WireMessage::Shutdown {});
    values
}

#[test]
fn honest_client_samples_have_the_right_mean() {
    let cfg = named_config("ones5", vec![1.0], 0);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let client = {
        let cfg = cfg.clone();
        thread::spawn(move || client_loop(2, PolicyKind::Honest, &cfg, addr, &ClientOptions::default()).unwrap())
    };
    let values = fake_server_session(&listener, 2, 100);
    let stats = client.join().unwrap();
    assert_eq!(stats.answered, 100);
    let mean = values.iter().sum::<f64>() / 100.0;
    // unit variance, so the standard error is 0.1
    assert!((mean - 1.0).abs() < 0.4, "mean {mean}");
}

#[test]
fn constant_policy_answers_the_constant() {
    let cfg = named_config("ones5", vec![1.0], 1);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let client = {
        let cfg = cfg.clone();
        thread::spawn(move || {
            client_loop(4, PolicyKind::Constant { value: 42.0 }, &cfg, addr, &ClientOptions::default()).unwrap()
        })
    };
    let values = fake_server_session(&listener, 4, 20);
    client.join().unwrap();
    assert!(values.iter().all(|&v| v == 42.0));
}

#[test]
fn client_reconnects_after_malformed_query() {
    let cfg = named_config("ones5", vec![1.0], 0);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let client = {
        let cfg = cfg.clone();
        thread::spawn(move || client_loop(0, PolicyKind::Honest, &cfg, addr, &ClientOptions::default()).unwrap())
    };
    {
        let (mut s, _) = listener.accept().unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        assert_eq!(read_msg(&mut r), Some(WireMessage::Hello { node: 0 }));
        s.write_all(b"{\"v\":1,\"type\":\"query\",\"round\":\"x\"}\n").unwrap();
        let mut rest = String::new();
        assert_eq!(r.read_line(&mut rest).unwrap(), 0, "client should close the connection");
    }
    let values = fake_server_session(&listener, 0, 3);
    let stats = client.join().unwrap();
    assert_eq!(values.len(), 3);
    assert_eq!(stats.reconnects, 1);
}

#[test]
fn live_run_replays_bit_exactly() {
    let cfg = named_config("ones5", vec![1.0], 2).with_iterations(3_000).with_seed(5);
    let out = live_run(&cfg, &[], &ServeOptions::default());
    assert_eq!(out.stats.applied, 3_000);
    assert_eq!(out.log.len(), 3_000);
    assert!(out.log.iter().enumerate().all(|(k, u)| u.n == k as u64));
    let state = replay(&cfg.matrix, &cfg.schedule, cfg.x0.clone(), cfg.y0.clone(), &out.log).unwrap();
    assert_eq!(state, out.trajectory.final_state);
    assert_eq!(out.trajectory.rows[0].n, 0);
    assert!(out.trajectory.rows.windows(2).all(|w| w[0].n < w[1].n));
}

/// Node 4 speaks raw protocol: it answers late, then sends garbage.
#[test]
fn server_discards_late_samples_and_drops_violators() {
    let cfg = named_config("ones5", vec![1.0], 0).with_iterations(5_000);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    // Slow honest clients keep the run alive well past the rogue's late answer.
    let slow = ClientOptions {
        delay: Duration::from_micros(300),
        ..ClientOptions::default()
    };
    let honest: Vec<_> = (0..4)
        .map(|i| {
            let cfg = cfg.clone();
            let slow = slow.clone();
            thread::spawn(move || client_loop(i, PolicyKind::Honest, &cfg, addr, &slow).unwrap())
        })
        .collect();
    let rogue = thread::spawn(move || {
        let mut s = TcpStream::connect(addr).unwrap();
        write_msg(&mut s, &WireMessage::Hello { node: 4 });
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut answered_late = false;
        while let Some(msg) = read_msg(&mut r) {
            if let WireMessage::Query { round, node } = msg {
                if !answered_late {
                    thread::sleep(Duration::from_millis(150));
                    write_msg(&mut s, &WireMessage::Sample { round, node, value: 1.0 });
                    answered_late = true;
                } else {
                    let _ = s.write_all(b"garbage\n");
                }
            }
        }
    });
    let opts = ServeOptions {
        timeout: Duration::from_millis(50),
        ..ServeOptions::default()
    };
    let out = serve(&cfg, listener, &opts).unwrap();
    for h in honest {
        h.join().unwrap();
    }
    rogue.join().unwrap();
    assert_eq!(out.stats.applied, 5_000);
    assert!(out.stats.timeouts >= 1);
    assert!(out.stats.discarded >= 1, "{:?}", out.stats);
    assert!(out.stats.protocol_errors >= 1, "{:?}", out.stats);
}
