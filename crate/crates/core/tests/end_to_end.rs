use std::time::Duration;

use qkdn_core::aaa_manager::AaaMode;
use qkdn_core::config::TopologyConfig;
use qkdn_core::crypto_relay::CipherMode;
use qkdn_core::deploy::{deploy, DeployOptions};
use qkdn_core::domain::{CorrelationId, EntityId, ErrorCode};
use qkdn_core::engine::Node;
use qkdn_core::sae::ExchangeRecord;
use qkdn_core::transport::sim::SimNet;
use qkdn_core::transport::TraceSink;

fn reference() -> TopologyConfig {
    TopologyConfig::parse(include_str!("../../../configs/reference.json")).unwrap()
}

fn net(cfg: &TopologyConfig, cipher: Option<CipherMode>) -> SimNet {
    let d = deploy(
        cfg,
        &DeployOptions {
            aaa_mode: AaaMode::Strict,
            cipher,
        },
    )
    .unwrap();
    let mut n = SimNet::new(d, cfg.seed, Duration::from_secs(30), TraceSink::memory());
    n.prefill(1 << 18);
    n.start();
    n
}

fn record(n: &SimNet, sae: &str, corr: &CorrelationId) -> Option<ExchangeRecord> {
    match n.node(&EntityId::sae(sae)) {
        Some(Node::Sae(s)) => s.exchange(corr).cloned(),
        _ => None,
    }
}

fn finished(n: &SimNet, corr: &CorrelationId) -> bool {
    let master = record(n, "sae-a", corr);
    if master
        .as_ref()
        .is_some_and(|m| matches!(m.outcome, Some(Err(_))))
    {
        return true;
    }
    record(n, "sae-b", corr).is_some_and(|s| s.outcome.is_some())
}

fn exchange(n: &mut SimNet) -> CorrelationId {
    let corr = n.start_exchange(&EntityId::sae("sae-a"), &EntityId::sae("sae-b"), 1, 256);
    let limit = n.now() + Duration::from_secs(60);
    assert!(n.run_while_pending(limit, |n| finished(n, &corr)));
    corr
}

/// Key bits consumed on every leg, counted at both ends.
fn consumed(n: &SimNet) -> u64 {
    let pools: u64 = n
        .nodes()
        .filter_map(Node::store)
        .map(|s| s.total_consumed_bits())
        .sum();
    let peer: u64 = n
        .nodes()
        .filter_map(|x| match x {
            Node::Akms(a) => Some(a.peer_leg_consumed_bits()),
            _ => None,
        })
        .sum();
    pools + peer
}

#[test]
fn one_exchange_delivers_the_same_key_to_both_saes() {
    let cfg = reference();
    let mut n = net(&cfg, Some(CipherMode::Otp));
    let before = consumed(&n);
    let corr = exchange(&mut n);
    let m = record(&n, "sae-a", &corr).unwrap();
    let s = record(&n, "sae-b", &corr).unwrap();
    assert_eq!(m.outcome, Some(Ok(())), "{m:?}");
    assert_eq!(s.outcome, Some(Ok(())), "{s:?}");
    assert_eq!(m.keys, s.keys);
    assert_eq!(m.keys[0].octets().len(), 32);
    // 12 carrier hops, two access legs and the AKMS leg, 384 bits each;
    // both ends of a pool record the consumption
    assert_eq!(consumed(&n) - before, 2 * 15 * 384);
}

#[test]
fn default_ciphers_also_agree() {
    let cfg = reference();
    let mut n = net(&cfg, None);
    for _ in 0..3 {
        let corr = exchange(&mut n);
        let m = record(&n, "sae-a", &corr).unwrap();
        let s = record(&n, "sae-b", &corr).unwrap();
        assert_eq!(m.outcome, Some(Ok(())));
        assert_eq!(m.keys, s.keys);
    }
}

#[test]
fn same_seed_same_trace() {
    let run = || {
        let cfg = reference();
        let mut n = net(&cfg, Some(CipherMode::Otp));
        for _ in 0..3 {
            exchange(&mut n);
        }
        n.advance_clock(Duration::from_secs(65));
        n.trace().lines().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn bypass_takes_over_when_7_8_fails() {
    let cfg = reference();
    let mut n = net(&cfg, Some(CipherMode::Otp));
    let corr = exchange(&mut n);
    assert_eq!(record(&n, "sae-b", &corr).unwrap().outcome, Some(Ok(())));

    assert!(n.set_link_state("7-16", true));
    assert!(n.set_link_state("16-8", true));
    assert!(n.set_link_state("7-8", false));
    n.advance_clock(Duration::from_secs(1));
    let corr = exchange(&mut n);
    assert_eq!(record(&n, "sae-b", &corr).unwrap().outcome, Some(Ok(())));
    match n.node(&EntityId::controller("dc")) {
        Some(Node::Controller(c)) => {
            let last = c.recent_paths().last().unwrap();
            assert!(
                last.path.contains(&EntityId::ckms("node-16")),
                "{:?}",
                last.path
            );
        }
        _ => unreachable!(),
    }

    assert!(n.set_link_state("7-16", false));
    n.advance_clock(Duration::from_secs(1));
    let corr = exchange(&mut n);
    let m = record(&n, "sae-a", &corr).unwrap();
    assert_eq!(m.outcome, Some(Err(ErrorCode::NoPath)), "{m:?}");
}

#[test]
fn user_nodes_never_see_carrier_names() {
    let cfg = reference();
    let mut n = net(&cfg, Some(CipherMode::Otp));
    exchange(&mut n);
    let mut checked = 0;
    for line in n.trace().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["type"] != "msg" {
            continue;
        }
        let to = v["to"].as_str().unwrap();
        if to.starts_with("UKMS/") || to.starts_with("SAE/") {
            checked += 1;
            assert!(!v["payload"].to_string().contains("CKMS/"), "{line}");
        }
    }
    assert!(checked > 0);
}

#[test]
fn audits_pass_on_a_real_trace() {
    use qkdn_core::audit::{audit_trace, one_time_use, parse_lines};
    let cfg = reference();
    let mut n = net(&cfg, Some(CipherMode::Otp));
    for _ in 0..3 {
        exchange(&mut n);
    }
    let records = parse_lines(n.trace().lines()).unwrap();
    let report = audit_trace(&records, Some(n.channels()));
    for c in &report.checks {
        assert!(c.passed(), "{c:?}");
    }
    assert!(report.check("ksa_containment").unwrap().examined > 0);
    assert!(report.check("per_hop_reencryption").unwrap().examined >= 36);
    assert!(one_time_use(n.nodes().filter_map(Node::store)).passed());
}
