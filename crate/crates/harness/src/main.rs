use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};

use qkdn::http::{router, ApiState};
use qkdn::output::{read_channels, write_outputs, CHANNELS_JSON, TRACE_JSONL};
use qkdn::scenario::{prefill_bits, run_scenario, RunOptions, Scenario, LINK_TICK};
use qkdn_core::aaa_manager::AaaMode;
use qkdn_core::audit;
use qkdn_core::config::{ConfigError, TopologyConfig};
use qkdn_core::crypto_relay::CipherMode;
use qkdn_core::deploy::{deploy, DeployOptions};
use qkdn_core::transport::socket::SocketOptions;
use qkdn_core::transport::{Backend, TraceSink};

#[derive(Parser)]
#[command(
    name = "qkdn",
    version,
    about = "Carrier-grade QKD network simulator and harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Socket,
}

#[derive(Clone, Copy, ValueEnum)]
enum CipherArg {
    Otp,
    Aes256gcm,
}

#[derive(Clone, Copy, ValueEnum)]
enum AaaArg {
    Strict,
    Permissive,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: Scenario,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "sim")]
        backend: BackendArg,
        #[arg(long)]
        exchanges: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Forces one relay cipher on every leg.
        #[arg(long, value_enum)]
        cipher: Option<CipherArg>,
        #[arg(long, visible_alias = "aaa", value_enum, default_value = "strict")]
        aaa_mode: AaaArg,
        #[arg(long, conflicts_with = "no_trace")]
        trace: bool,
        #[arg(long)]
        no_trace: bool,
    },
    /// Check a topology config and print its diagnostics.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Audit the trace.jsonl of a finished run.
    TraceCheck {
        /// Run output directory, or a trace file.
        path: PathBuf,
    },
    /// Run a socket deployment behind the HTTP API until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Wall-clock period of key generation; the simulated 30 s tick by default.
        #[arg(long)]
        link_tick_ms: Option<u64>,
        #[arg(long, default_value_t = 10_000)]
        prefill_exchanges: u64,
    },
}

fn load(path: &Path) -> anyhow::Result<TopologyConfig> {
    TopologyConfig::load(path).map_err(|e| {
        if let ConfigError::Invalid(d) = &e {
            for x in d {
                eprintln!("{}: {x}", path.display());
            }
        }
        anyhow::Error::new(e)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            config,
            scenario,
            seed,
            backend,
            exchanges,
            out,
            cipher,
            aaa_mode,
            trace,
            no_trace,
        } => {
            let cfg = load(&config)?;
            let mut opts = RunOptions::new(scenario);
            opts.seed = seed;
            opts.backend = match backend {
                BackendArg::Sim => Backend::Sim,
                BackendArg::Socket => Backend::Socket,
            };
            opts.exchanges = exchanges;
            opts.cipher = cipher.map(|c| match c {
                CipherArg::Otp => CipherMode::Otp,
                CipherArg::Aes256gcm => CipherMode::Aes256Gcm,
            });
            opts.aaa_mode = match aaa_mode {
                AaaArg::Strict => AaaMode::Strict,
                AaaArg::Permissive => AaaMode::Permissive,
            };
            opts.trace = if trace {
                Some(true)
            } else if no_trace {
                Some(false)
            } else {
                None
            };
            std::fs::create_dir_all(&out)
                .with_context(|| format!("cannot create {}", out.display()))?;
            opts.out = Some(out.clone());
            let outcome = run_scenario(&cfg, &opts)?;
            write_outputs(&out, &outcome)?;
            let m = &outcome.metrics;
            println!(
                "{} {}/{} exchanges succeeded, t_key mean {} s",
                m.scenario.as_str(),
                m.succeeded,
                m.exchanges,
                m.t_key_mean.map_or("n/a".into(), |t| format!("{t:.3}"))
            );
            for c in &m.checks {
                println!(
                    "  {} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            println!("artifacts in {}", out.display());
            Ok(if m.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Validate { config } => match TopologyConfig::load(&config) {
            Ok(cfg) => {
                println!(
                    "{}: ok ({} nodes, {} links, {} SAEs)",
                    config.display(),
                    cfg.nodes.len(),
                    cfg.links.len(),
                    cfg.saes.len()
                );
                Ok(ExitCode::SUCCESS)
            }
            Err(ConfigError::Invalid(d)) => {
                for x in &d {
                    println!("CONFIG_INVALID {}: {x}", config.display());
                }
                Ok(ExitCode::FAILURE)
            }
            Err(e) => Err(e.into()),
        },
        Cmd::TraceCheck { path } => {
            let (trace, channels) = if path.is_dir() {
                let ch = path.join(CHANNELS_JSON);
                (path.join(TRACE_JSONL), ch.exists().then_some(ch))
            } else {
                (path, None)
            };
            let records = audit::read_trace(&trace)?;
            let registry = channels.map(|p| read_channels(&p)).transpose()?;
            let report = audit::audit_trace(&records, registry.as_ref());
            for c in &report.checks {
                println!(
                    "{} {} ({} examined, {} violations)",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.examined,
                    c.violation_count
                );
                for v in &c.violations {
                    println!("    {v}");
                }
            }
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Serve {
            config,
            listen,
            link_tick_ms,
            prefill_exchanges,
        } => {
            let cfg = load(&config)?;
            let psk = hex::decode(&cfg.secrets.channel_psk).context("channel_psk is not hex")?;
            let dep = deploy(&cfg, &DeployOptions::default())?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let opts = SocketOptions {
                    psk,
                    link_tick: link_tick_ms.map_or(LINK_TICK, Duration::from_millis),
                    prefill_bits: prefill_bits(prefill_exchanges, 256),
                    trace: TraceSink::default(),
                    seed: cfg.seed,
                };
                let state = Arc::new(ApiState::launch(&cfg, dep, opts).await?);
                let listener = tokio::net::TcpListener::bind(listen).await?;
                eprintln!("serving {} on http://{}", cfg.name, listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(ExitCode::SUCCESS)
            })
        }
    }
}
