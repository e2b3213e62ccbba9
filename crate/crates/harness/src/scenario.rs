//! Scenarios: boot a deployment on either backend, drive SAE exchanges,
//! inject faults and collect a [`MetricsReport`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};

use qkdn_core::aaa_manager::{AaaMode, AlarmRecord};
use qkdn_core::audit::{self, AuditCheck, AuditReport};
use qkdn_core::config::TopologyConfig;
use qkdn_core::crypto_relay::CipherMode;
use qkdn_core::deploy::{deploy, DeployOptions, Deployment};
use qkdn_core::domain::{
    CorrelationId, EntityId, EntityKind, Heartbeat, KeyStore, Payload, SimTime,
};
use qkdn_core::engine::{Command, Node};
use qkdn_core::qkd_link_sim::Telemetry;
use qkdn_core::sae::ExchangeRecord;
use qkdn_core::transport::sim::{FabricStats, SimNet};
use qkdn_core::transport::socket::{SocketNet, SocketOptions};
use qkdn_core::transport::{Backend, ChannelRegistry, TraceSink};

use crate::metrics::{
    compute_throughput_budget, link_aggregates, mean_std, CheckResult, MetricsReport,
    AES256_RATIO_BYTES,
};

/// Sampling interval of link telemetry and key emission.
pub const LINK_TICK: Duration = Duration::from_secs(30);
/// Longest an exchange may take on the simulated clock.
const SIM_EXCHANGE_LIMIT: Duration = Duration::from_secs(60);
/// Longest an exchange may take on sockets.
const SOCKET_EXCHANGE_LIMIT: Duration = Duration::from_secs(30);
/// Time the network gets to settle after a fault before traffic resumes.
const REROUTE_WINDOW: Duration = Duration::from_secs(1);
/// Largest relative spread accepted from TKEY_BENCH.
pub const MAX_TKEY_SPREAD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    /// A handful of exchanges on the intact network.
    Baseline,
    /// Key exchange timing over pre-filled pools.
    TkeyBench,
    /// Link 7-8 fails mid-run with the node-16 bypass up.
    FaultReroute,
    /// Exchanges against empty pools fed only by the links.
    Starvation,
    /// Exchanges plus forbidden probes, followed by the trace audits.
    PolicyAudit,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Baseline,
        Scenario::TkeyBench,
        Scenario::FaultReroute,
        Scenario::Starvation,
        Scenario::PolicyAudit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Baseline => "BASELINE",
            Scenario::TkeyBench => "TKEY_BENCH",
            Scenario::FaultReroute => "FAULT_REROUTE",
            Scenario::Starvation => "STARVATION",
            Scenario::PolicyAudit => "POLICY_AUDIT",
        }
    }

    pub fn default_exchanges(self) -> u64 {
        match self {
            Scenario::Baseline => 1,
            Scenario::TkeyBench => 10_000,
            Scenario::FaultReroute => 40,
            Scenario::Starvation => 20,
            Scenario::PolicyAudit => 10,
        }
    }

    /// Long benchmarks skip the trace unless asked.
    fn traces_by_default(self) -> bool {
        !matches!(self, Scenario::TkeyBench)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == norm)
            .ok_or_else(|| format!("unknown scenario {s:?}; expected one of BASELINE, TKEY_BENCH, FAULT_REROUTE, STARVATION, POLICY_AUDIT"))
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub scenario: Scenario,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
    pub backend: Backend,
    /// Overrides the scenario's default count.
    pub exchanges: Option<u64>,
    pub key_bits: u32,
    /// Forces one relay cipher on every leg.
    pub cipher: Option<CipherMode>,
    pub aaa_mode: AaaMode,
    /// Overrides the scenario's default.
    pub trace: Option<bool>,
    /// Where trace.jsonl streams to; kept in memory when absent.
    pub out: Option<PathBuf>,
    /// Link that FAULT_REROUTE takes down.
    pub fail_link: String,
}

impl RunOptions {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            seed: None,
            backend: Backend::Sim,
            exchanges: None,
            key_bits: 256,
            cipher: None,
            aaa_mode: AaaMode::Strict,
            trace: None,
            out: None,
            fail_link: "7-8".to_string(),
        }
    }
}

/// Everything a run leaves behind.
#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: MetricsReport,
    /// Trace lines when the trace was kept in memory.
    pub trace: Vec<String>,
    /// Path of the streamed trace, if any.
    pub trace_file: Option<PathBuf>,
    pub alarms: Vec<AlarmRecord>,
    pub telemetry: Vec<Telemetry>,
    pub audit: Option<AuditReport>,
    pub channels: ChannelRegistry,
}

/// Result of one exchange: T_key in seconds, or the reason it failed.
type ExchangeResult = Result<f64, String>;

struct Artifacts {
    trace: Vec<String>,
    alarms: Vec<AlarmRecord>,
    telemetry: Vec<Telemetry>,
    stats: FabricStats,
    channels: ChannelRegistry,
    now: SimTime,
}

/// What scenarios need from a backend.
trait Driver {
    fn exchange(&mut self, master: &EntityId, slave: &EntityId, bits: u32) -> ExchangeResult;
    fn set_link(&mut self, id: &str, up: bool) -> bool;
    fn settle(&mut self, d: Duration);
    fn probe(&mut self, from: &EntityId, to: &EntityId);
    fn now(&self) -> SimTime;
    /// First path the controller computed at or after `since`.
    fn path_since(&self, since: SimTime) -> Option<Vec<EntityId>>;
    fn consumed_bits(&self) -> u64;
    fn audited_bits(&self) -> u64;
    fn one_time_use(&self) -> AuditCheck;
    fn finish(self: Box<Self>) -> anyhow::Result<Artifacts>;
}

fn judge(master: Option<ExchangeRecord>, slave: Option<ExchangeRecord>) -> ExchangeResult {
    let Some(m) = master else {
        return Err("INCOMPLETE".into());
    };
    if let Some(Err(code)) = m.outcome {
        return Err(code.as_str().to_string());
    }
    let Some(s) = slave else {
        return Err("INCOMPLETE".into());
    };
    match (s.outcome, s.completed_at) {
        (Some(Ok(())), Some(done)) if s.keys == m.keys && !s.keys.is_empty() => {
            Ok(done.saturating_since(m.started_at).as_secs_f64())
        }
        (Some(Ok(())), _) => Err("KEY_MISMATCH".into()),
        (Some(Err(code)), _) => Err(code.as_str().to_string()),
        (None, _) => Err("INCOMPLETE".into()),
    }
}

fn sae_record(node: Option<&Node>, corr: &CorrelationId) -> Option<ExchangeRecord> {
    match node {
        Some(Node::Sae(s)) => s.exchange(corr).cloned(),
        _ => None,
    }
}

fn exchange_done(master: &Option<ExchangeRecord>, slave: &Option<ExchangeRecord>) -> bool {
    master
        .as_ref()
        .is_some_and(|m| matches!(m.outcome, Some(Err(_))))
        || slave.as_ref().is_some_and(|s| s.outcome.is_some())
}

fn stores_of(n: &Node) -> Vec<&KeyStore> {
    match n {
        Node::Akms(a) => vec![a.store(), a.bootstrap().store()],
        other => other.store().into_iter().collect(),
    }
}

fn consumed_of(n: &Node) -> u64 {
    match n {
        Node::Akms(a) => a.store().total_consumed_bits() + a.peer_leg_consumed_bits(),
        other => other.store().map_or(0, KeyStore::total_consumed_bits),
    }
}

/// Consumption as recorded in the offset logs, plus QBN pad spent on the
/// AKMS leg, which never enters a store.
fn audited_of(n: &Node) -> u64 {
    let qbn = match n {
        Node::Akms(a) => a.qbn_consumed_bits(),
        _ => 0,
    };
    audit::logged_bits(stores_of(n)) + qbn
}

fn manager_alarms(n: Option<&Node>) -> Vec<AlarmRecord> {
    match n {
        Some(Node::Manager(m)) => m.alarms().to_vec(),
        _ => Vec::new(),
    }
}

fn controller_path_since(n: Option<&Node>, since: SimTime) -> Option<Vec<EntityId>> {
    match n {
        Some(Node::Controller(c)) => c
            .recent_paths()
            .find(|p| p.computed_at >= since)
            .map(|p| p.path.clone()),
        _ => None,
    }
}

fn probe_command(to: &EntityId) -> Command {
    Command::Probe {
        to: to.clone(),
        body: Payload::Heartbeat(Heartbeat { seq: 0 }),
    }
}

struct SimDriver {
    net: SimNet,
    controller: EntityId,
    manager: EntityId,
}

impl Driver for SimDriver {
    fn exchange(&mut self, master: &EntityId, slave: &EntityId, bits: u32) -> ExchangeResult {
        let corr = self.net.start_exchange(master, slave, 1, bits);
        let limit = self.net.now() + SIM_EXCHANGE_LIMIT;
        let (m, s) = (master.clone(), slave.clone());
        self.net.run_while_pending(limit, |n| {
            exchange_done(
                &sae_record(n.node(&m), &corr),
                &sae_record(n.node(&s), &corr),
            )
        });
        judge(
            sae_record(self.net.node(master), &corr),
            sae_record(self.net.node(slave), &corr),
        )
    }

    fn set_link(&mut self, id: &str, up: bool) -> bool {
        self.net.set_link_state(id, up)
    }

    fn settle(&mut self, d: Duration) {
        self.net.advance_clock(d);
    }

    fn probe(&mut self, from: &EntityId, to: &EntityId) {
        self.net.command(from, probe_command(to));
    }

    fn now(&self) -> SimTime {
        self.net.now()
    }

    fn path_since(&self, since: SimTime) -> Option<Vec<EntityId>> {
        controller_path_since(self.net.node(&self.controller), since)
    }

    fn consumed_bits(&self) -> u64 {
        self.net.nodes().map(consumed_of).sum()
    }

    fn audited_bits(&self) -> u64 {
        self.net.nodes().map(audited_of).sum()
    }

    fn one_time_use(&self) -> AuditCheck {
        audit::one_time_use(self.net.nodes().flat_map(stores_of))
    }

    fn finish(mut self: Box<Self>) -> anyhow::Result<Artifacts> {
        self.net.trace_mut().flush().context("writing trace")?;
        Ok(Artifacts {
            trace: self.net.trace().lines().to_vec(),
            alarms: manager_alarms(self.net.node(&self.manager)),
            telemetry: self.net.telemetry().to_vec(),
            stats: self.net.stats().clone(),
            channels: self.net.channels().clone(),
            now: self.net.now(),
        })
    }
}

struct SocketDriver {
    rt: tokio::runtime::Runtime,
    net: Option<SocketNet>,
    controller: EntityId,
    manager: EntityId,
}

impl SocketDriver {
    fn net(&self) -> &SocketNet {
        self.net.as_ref().expect("running")
    }

    fn records(&self, sae: &EntityId, corr: &CorrelationId) -> Option<ExchangeRecord> {
        self.net()
            .with_node(sae, |n| sae_record(Some(n), corr))
            .flatten()
    }
}

impl Driver for SocketDriver {
    fn exchange(&mut self, master: &EntityId, slave: &EntityId, bits: u32) -> ExchangeResult {
        let _rt = self.rt.enter();
        let corr = self.net().start_exchange(master, slave, 1, bits);
        let deadline = std::time::Instant::now() + SOCKET_EXCHANGE_LIMIT;
        while std::time::Instant::now() < deadline {
            if exchange_done(&self.records(master, &corr), &self.records(slave, &corr)) {
                break;
            }
            self.rt
                .block_on(async { tokio::time::sleep(Duration::from_millis(1)).await });
        }
        judge(self.records(master, &corr), self.records(slave, &corr))
    }

    fn set_link(&mut self, id: &str, up: bool) -> bool {
        let _rt = self.rt.enter();
        self.net().set_link_state(id, up)
    }

    fn settle(&mut self, d: Duration) {
        self.rt.block_on(async { tokio::time::sleep(d).await });
    }

    fn probe(&mut self, from: &EntityId, to: &EntityId) {
        let _rt = self.rt.enter();
        self.net().command(from, probe_command(to));
    }

    fn now(&self) -> SimTime {
        self.net().now()
    }

    fn path_since(&self, since: SimTime) -> Option<Vec<EntityId>> {
        self.net()
            .with_node(&self.controller, |n| controller_path_since(Some(n), since))
            .flatten()
    }

    fn consumed_bits(&self) -> u64 {
        let net = self.net();
        net.node_ids()
            .iter()
            .filter_map(|id| net.with_node(id, consumed_of))
            .sum()
    }

    fn audited_bits(&self) -> u64 {
        let net = self.net();
        net.node_ids()
            .iter()
            .filter_map(|id| net.with_node(id, audited_of))
            .sum()
    }

    fn one_time_use(&self) -> AuditCheck {
        let net = self.net();
        let mut total = AuditCheck::default();
        for id in net.node_ids() {
            if let Some(c) = net.with_node(&id, |n| audit::one_time_use(stores_of(n))) {
                total.name = c.name;
                total.examined += c.examined;
                total.violation_count += c.violation_count;
                total.violations.extend(c.violations);
            }
        }
        total
    }

    fn finish(mut self: Box<Self>) -> anyhow::Result<Artifacts> {
        let net = self.net.take().expect("running");
        net.flush_trace().context("writing trace")?;
        let art = Artifacts {
            trace: net.trace_lines(),
            alarms: net
                .with_node(&self.manager, |n| manager_alarms(Some(n)))
                .unwrap_or_default(),
            telemetry: net.telemetry(),
            stats: net.stats(),
            channels: net.channels(),
            now: net.now(),
        };
        let _guard = self.rt.enter();
        net.shutdown();
        Ok(art)
    }
}

/// The first SAE pair any profile allows.
pub fn exchange_pair(cfg: &TopologyConfig) -> anyhow::Result<(EntityId, EntityId)> {
    let (a, b) = cfg
        .profiles
        .iter()
        .find_map(|p| p.allowed_sae_pairs.first())
        .context("no profile allows any SAE pair")?;
    Ok((EntityId::sae(a), EntityId::sae(b)))
}

/// Bits to pre-load per link direction for `n` exchanges of `key_bits`.
pub fn prefill_bits(n: u64, key_bits: u32) -> usize {
    const CHUNK: u64 = 1 << 16;
    // an OTP leg costs key_bits plus a 128-bit MAC key; a quarter spare
    let need = n * (key_bits as u64 + 128) * 5 / 4 + CHUNK;
    need.div_ceil(CHUNK) as usize * CHUNK as usize
}

fn trace_sink(trace: bool, out: Option<&Path>) -> anyhow::Result<(TraceSink, Option<PathBuf>)> {
    match (trace, out) {
        (false, _) => Ok((TraceSink::Off, None)),
        (true, None) => Ok((TraceSink::memory(), None)),
        (true, Some(dir)) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("trace.jsonl");
            let sink =
                TraceSink::file(&path).with_context(|| format!("creating {}", path.display()))?;
            Ok((sink, Some(path)))
        }
    }
}

fn boot(
    cfg: &TopologyConfig,
    opts: &RunOptions,
    seed: u64,
    prefill: usize,
    sink: TraceSink,
) -> anyhow::Result<Box<dyn Driver>> {
    let dep: Deployment = deploy(
        cfg,
        &DeployOptions {
            aaa_mode: opts.aaa_mode,
            cipher: opts.cipher,
        },
    )?;
    let (controller, manager) = (dep.controller.clone(), dep.manager.clone());
    match opts.backend {
        Backend::Sim => {
            let mut net = SimNet::new(dep, seed, LINK_TICK, sink);
            if prefill > 0 {
                net.prefill(prefill);
            }
            net.start();
            Ok(Box::new(SimDriver {
                net,
                controller,
                manager,
            }))
        }
        Backend::Socket => {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            let psk = hex::decode(&cfg.secrets.channel_psk).context("channel_psk is not hex")?;
            let net = rt.block_on(SocketNet::launch(
                dep,
                SocketOptions {
                    psk,
                    link_tick: LINK_TICK,
                    prefill_bits: prefill,
                    trace: sink,
                    seed,
                },
            ))?;
            Ok(Box::new(SocketDriver {
                rt,
                net: Some(net),
                controller,
                manager,
            }))
        }
    }
}

#[derive(Default)]
struct Tally {
    samples: Vec<f64>,
    failed: BTreeMap<String, u64>,
    n: u64,
}

impl Tally {
    fn add(&mut self, r: ExchangeResult) {
        self.n += 1;
        match r {
            Ok(t) => self.samples.push(t),
            Err(reason) => *self.failed.entry(reason).or_default() += 1,
        }
    }

    fn run(
        &mut self,
        d: &mut dyn Driver,
        pair: &(EntityId, EntityId),
        n: u64,
        bits: u32,
    ) -> (u64, u64) {
        let before = self.samples.len() as u64;
        for _ in 0..n {
            self.add(d.exchange(&pair.0, &pair.1, bits));
        }
        (self.samples.len() as u64 - before, n)
    }
}

fn ratio((ok, n): (u64, u64)) -> String {
    format!("{ok}/{n} succeeded")
}

/// Runs one scenario end to end.
pub fn run_scenario(cfg: &TopologyConfig, opts: &RunOptions) -> anyhow::Result<RunOutcome> {
    let scenario = opts.scenario;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let n = opts.exchanges.unwrap_or(scenario.default_exchanges());
    let tracing =
        opts.trace.unwrap_or(scenario.traces_by_default()) || scenario == Scenario::PolicyAudit;
    let prefill = match scenario {
        Scenario::Starvation => 0,
        _ => prefill_bits(n + 4, opts.key_bits),
    };
    let (sink, trace_file) = trace_sink(tracing, opts.out.as_deref())?;
    let mut d = boot(cfg, opts, seed, prefill, sink)?;
    let pair = exchange_pair(cfg)?;
    let bits = opts.key_bits;
    let consumed_before = d.consumed_bits();
    let audited_before = d.audited_bits();
    let mut tally = Tally::default();
    let mut checks = Vec::new();

    match scenario {
        Scenario::Baseline => {
            let r = tally.run(d.as_mut(), &pair, n, bits);
            checks.push(CheckResult::new("keys_agree", r.0 == r.1, ratio(r)));
        }
        Scenario::TkeyBench => {
            let r = tally.run(d.as_mut(), &pair, n, bits);
            checks.push(CheckResult::new(
                "all_exchanges_succeed",
                r.0 == r.1,
                ratio(r),
            ));
            let spread = mean_std(&tally.samples).map(|(m, s)| s / m);
            checks.push(CheckResult::new(
                "t_key_spread_below_limit",
                spread.is_some_and(|x| x < MAX_TKEY_SPREAD),
                format!(
                    "std/mean = {}",
                    spread.map_or("n/a".into(), |x| format!("{x:.4}"))
                ),
            ));
        }
        Scenario::FaultReroute => {
            fault_reroute(cfg, opts, d.as_mut(), &pair, n, &mut tally, &mut checks)?
        }
        Scenario::Starvation => {
            let r = tally.run(d.as_mut(), &pair, n, bits);
            let starved: u64 = tally
                .failed
                .iter()
                .filter(|(k, _)| {
                    matches!(
                        k.as_str(),
                        "INSUFFICIENT_KEY" | "KEY_STARVATION" | "TIMEOUT"
                    )
                })
                .map(|(_, v)| v)
                .sum();
            let waited = tally
                .samples
                .iter()
                .any(|t| *t >= LINK_TICK.as_secs_f64() / 2.0);
            checks.push(CheckResult::new(
                "starvation_is_visible",
                starved > 0 || waited,
                format!("{}; {starved} failed for lack of key", ratio(r)),
            ));
            let terminal = tally.failed.get("INCOMPLETE").copied().unwrap_or(0) == 0;
            checks.push(CheckResult::new(
                "every_exchange_terminates",
                terminal,
                format!("{} exchanges", tally.n),
            ));
        }
        Scenario::PolicyAudit => {
            let r = tally.run(d.as_mut(), &pair, n, bits);
            checks.push(CheckResult::new("keys_agree", r.0 == r.1, ratio(r)));
            let akms = EntityId::akms(
                cfg.access_of(&sae_node(cfg, &pair.0)?)
                    .context("SAE has no access node")?,
            );
            let controller = EntityId::controller(&cfg.datacenter().context("no datacenter")?.id);
            let far = cfg
                .nodes
                .iter()
                .rev()
                .find(|x| x.components.contains(&EntityKind::Ckms) && x.id != akms.name())
                .map(|x| EntityId::ckms(&x.id))
                .context("no carrier CKMS")?;
            d.probe(&akms, &controller);
            d.probe(&akms, &far);
            d.settle(REROUTE_WINDOW);
        }
    }

    let one_time = d.one_time_use();
    checks.push(CheckResult::new(
        "one_time_use",
        one_time.passed(),
        format!(
            "{} consumptions, {} overlaps",
            one_time.examined, one_time.violation_count
        ),
    ));
    let consumed = d.consumed_bits() - consumed_before;
    let audited = d.audited_bits() - audited_before;
    let art = d.finish()?;

    let audit = if scenario == Scenario::PolicyAudit {
        let records = match &trace_file {
            Some(p) => audit::read_trace(p)?,
            None => audit::parse_lines(&art.trace)?,
        };
        let report = audit::audit_trace(&records, Some(&art.channels));
        for c in &report.checks {
            checks.push(CheckResult::new(
                c.name,
                c.passed() && (c.examined > 0 || c.name == "profile_confinement"),
                format!("{} examined, {} violations", c.examined, c.violation_count),
            ));
        }
        Some(report)
    } else {
        None
    };

    let stats = mean_std(&tally.samples);
    let t_key_mean = stats.map(|s| s.0).or(tally.samples.first().copied());
    let metrics = MetricsReport {
        config: cfg.name.clone(),
        scenario,
        backend: opts.backend,
        seed,
        key_size_bits: bits,
        exchanges: tally.n,
        succeeded: tally.samples.len() as u64,
        failed: tally.failed,
        t_key_mean,
        t_key_std: stats.map(|s| s.1),
        throughput_budget_gbps: t_key_mean
            .and_then(|t| compute_throughput_budget(t, bits, AES256_RATIO_BYTES).ok()),
        t_key_samples: tally.samples,
        kma_bits_consumed: consumed,
        kma_bits_audited: audited,
        links: link_aggregates(cfg, &art.telemetry),
        fabric: art.stats,
        checks,
        duration_s: art.now.as_secs_f64(),
    };
    Ok(RunOutcome {
        metrics,
        trace: art.trace,
        trace_file,
        alarms: art.alarms,
        telemetry: art.telemetry,
        audit,
        channels: art.channels,
    })
}

fn sae_node(cfg: &TopologyConfig, sae: &EntityId) -> anyhow::Result<String> {
    cfg.saes
        .iter()
        .find(|s| s.id == sae.name())
        .map(|s| s.node.clone())
        .with_context(|| format!("{sae} is not configured"))
}

fn fault_reroute(
    cfg: &TopologyConfig,
    opts: &RunOptions,
    d: &mut dyn Driver,
    pair: &(EntityId, EntityId),
    n: u64,
    tally: &mut Tally,
    checks: &mut Vec<CheckResult>,
) -> anyhow::Result<()> {
    if cfg.link(&opts.fail_link).is_none() {
        bail!("link {} is not configured", opts.fail_link);
    }
    let bypass: Vec<&str> = cfg
        .links
        .iter()
        .filter(|l| !l.initial_state.is_up())
        .map(|l| l.id.as_str())
        .collect();
    if bypass.is_empty() {
        bail!("FAULT_REROUTE needs a bypass: a link that starts DOWN");
    }
    let virtual_nodes: Vec<EntityId> = cfg
        .nodes
        .iter()
        .filter(|x| x.is_virtual)
        .map(|x| EntityId::ckms(&x.id))
        .collect();
    let bits = opts.key_bits;

    for id in &bypass {
        d.set_link(id, true);
    }
    d.settle(REROUTE_WINDOW);
    let before = tally.run(d, pair, n / 2, bits);
    checks.push(CheckResult::new(
        "exchanges_before_fault",
        before.0 == before.1,
        ratio(before),
    ));

    let fault_at = d.now();
    d.set_link(&opts.fail_link, false);
    d.settle(REROUTE_WINDOW);
    let after = tally.run(d, pair, n - n / 2, bits);
    checks.push(CheckResult::new(
        "exchanges_after_fault",
        after.0 == after.1,
        ratio(after),
    ));
    let path = d.path_since(fault_at).unwrap_or_default();
    let via = path.iter().any(|x| virtual_nodes.contains(x));
    let shown: Vec<String> = path.iter().map(|x| x.to_string()).collect();
    checks.push(CheckResult::new("path_uses_bypass", via, shown.join(" > ")));

    d.set_link(bypass[0], false);
    d.settle(REROUTE_WINDOW);
    let cut = d.exchange(&pair.0, &pair.1, bits);
    checks.push(CheckResult::new(
        "no_path_without_bypass",
        cut.as_ref().err().is_some_and(|e| e == "NO_PATH"),
        format!("{cut:?}"),
    ));
    Ok(())
}

/// Telemetry of every link sampled each `interval` for `span`, without
/// emitting key. Samples are the ones a full run would report.
pub fn telemetry_run(
    cfg: &TopologyConfig,
    span: Duration,
    interval: Duration,
) -> anyhow::Result<Vec<Telemetry>> {
    let mut dep = deploy(cfg, &DeployOptions::default())?;
    let steps = (span.as_micros() / interval.as_micros()) as u64;
    let mut out = Vec::with_capacity(steps as usize * dep.links.len());
    for i in 1..=steps {
        let t = SimTime::from_micros(i * interval.as_micros() as u64);
        for b in dep.links.iter_mut() {
            out.push(b.link.sample_telemetry(t));
        }
    }
    Ok(out)
}
