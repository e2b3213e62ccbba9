//! Writing a run's artifacts to its output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;

use qkdn_core::aaa_manager::write_alarms_csv;
use qkdn_core::qkd_link_sim::write_telemetry_csv;
use qkdn_core::transport::{ChannelRegistry, ChannelSpec};

use crate::scenario::RunOutcome;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const ALARMS_CSV: &str = "alarms.csv";
pub const TELEMETRY_CSV: &str = "telemetry.csv";
pub const CHANNELS_JSON: &str = "channels.json";
pub const AUDIT_JSON: &str = "audit.json";

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let p = dir.join(name);
    let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes every artifact of `run` into `dir` and returns the paths written.
/// A trace already streamed into `dir` is left where it is.
pub fn write_outputs(dir: &Path, run: &RunOutcome) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::new();

    fs::write(dir.join(METRICS_JSON), run.metrics.to_json())?;
    written.push(dir.join(METRICS_JSON));
    fs::write(dir.join(METRICS_CSV), run.metrics.to_csv())?;
    written.push(dir.join(METRICS_CSV));

    if let Some(p) = &run.trace_file {
        written.push(p.clone());
    } else if !run.trace.is_empty() {
        let mut w = create(dir, TRACE_JSONL)?;
        for line in &run.trace {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        written.push(dir.join(TRACE_JSONL));
    }

    let mut w = create(dir, ALARMS_CSV)?;
    write_alarms_csv(&mut w, &run.alarms)?;
    w.flush()?;
    written.push(dir.join(ALARMS_CSV));

    let mut w = create(dir, TELEMETRY_CSV)?;
    write_telemetry_csv(&mut w, &run.telemetry)?;
    w.flush()?;
    written.push(dir.join(TELEMETRY_CSV));

    let channels: Vec<&ChannelSpec> = run.channels.iter().collect();
    fs::write(
        dir.join(CHANNELS_JSON),
        serde_json::to_string_pretty(&channels)? + "\n",
    )?;
    written.push(dir.join(CHANNELS_JSON));

    if let Some(a) = &run.audit {
        fs::write(
            dir.join(AUDIT_JSON),
            serde_json::to_string_pretty(a)? + "\n",
        )?;
        written.push(dir.join(AUDIT_JSON));
    }
    Ok(written)
}

/// Reads a `channels.json` written by [`write_outputs`].
pub fn read_channels(path: &Path) -> anyhow::Result<ChannelRegistry> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let specs: Vec<ChannelSpec> =
        serde_json::from_str(&text).with_context(|| format!("{} is malformed", path.display()))?;
    let mut reg = ChannelRegistry::new();
    for s in specs {
        reg.insert(s);
    }
    Ok(reg)
}
