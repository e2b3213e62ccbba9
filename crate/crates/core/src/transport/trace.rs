use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{
    AssetClass, CorrelationId, EntityId, KeyId, KeyRole, MessageKind, MsgId, ProtocolMessage,
};

/// One send attempt and what became of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsgRecord {
    /// Send time, microseconds.
    pub t: u64,
    pub msg_id: MsgId,
    pub corr: CorrelationId,
    pub from: EntityId,
    pub to: EntityId,
    pub kind: MessageKind,
    pub asset_class: AssetClass,
    pub channel: Option<String>,
    /// `delivered`, `deny:<REASON>` or `lost:<REASON>`.
    pub outcome: String,
    pub payload: serde_json::Value,
}

impl MsgRecord {
    pub fn new(t: u64, msg: &ProtocolMessage, channel: Option<&str>, outcome: String) -> Self {
        let mut body = serde_json::to_value(&msg.body).expect("payloads serialize");
        let payload = body
            .get_mut("payload")
            .map(serde_json::Value::take)
            .unwrap_or(serde_json::Value::Null);
        Self {
            t,
            msg_id: msg.msg_id,
            corr: msg.correlation_id,
            from: msg.from.clone(),
            to: msg.to.clone(),
            kind: msg.kind(),
            asset_class: msg.asset_class,
            channel: channel.map(str::to_string),
            outcome,
            payload,
        }
    }

    pub fn delivered(&self) -> bool {
        self.outcome == "delivered"
    }
}

/// Key material held in a component's memory, recorded for audits only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObserveRecord {
    pub t: u64,
    pub holder: EntityId,
    pub role: KeyRole,
    pub key_id: KeyId,
    pub hex: String,
}

/// Out-of-band notification from the master SAE to the slave SAE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotifyRecord {
    pub t: u64,
    pub corr: CorrelationId,
    pub from: EntityId,
    pub to: EntityId,
    pub key_ids: Vec<KeyId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Msg(MsgRecord),
    Observe(ObserveRecord),
    Notify(NotifyRecord),
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Where trace lines go.
#[derive(Debug, Default)]
pub enum TraceSink {
    /// Nothing is recorded; used by large benchmarks.
    #[default]
    Off,
    Memory(Vec<String>),
    File(BufWriter<File>),
}

impl TraceSink {
    pub fn memory() -> Self {
        TraceSink::Memory(Vec::new())
    }

    pub fn file(path: &Path) -> std::io::Result<Self> {
        Ok(TraceSink::File(BufWriter::new(File::create(path)?)))
    }

    pub fn enabled(&self) -> bool {
        !matches!(self, TraceSink::Off)
    }

    pub fn record(&mut self, rec: &TraceRecord) {
        match self {
            TraceSink::Off => {}
            TraceSink::Memory(lines) => lines.push(rec.to_line()),
            TraceSink::File(w) => {
                // a failing trace file must not stop the simulation
                let _ = writeln!(w, "{}", rec.to_line());
            }
        }
    }

    pub fn lines(&self) -> &[String] {
        match self {
            TraceSink::Memory(lines) => lines,
            _ => &[],
        }
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        match self {
            TraceSink::File(w) => w.flush(),
            _ => Ok(()),
        }
    }
}
