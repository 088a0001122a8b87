//! Metrics stream: one space-separated `key=value` line per event.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLine {
    pub fields: Vec<(String, String)>,
}

impl MetricLine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl fmt::Display) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses a line produced by [`fmt::Display`].
    pub fn parse(line: &str) -> Option<Self> {
        let fields = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect::<Option<Vec<_>>>()?;
        Some(MetricLine { fields })
    }
}

impl fmt::Display for MetricLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Receives metric lines as training proceeds.
pub trait MetricsSink {
    fn record(&mut self, line: MetricLine);
}

impl MetricsSink for Vec<MetricLine> {
    fn record(&mut self, line: MetricLine) {
        self.push(line);
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricLine) {}
}

/// Writes each line to an `io::Write`, logging (not propagating) failures.
pub struct WriteSink<W: Write>(pub W);

impl<W: Write> MetricsSink for WriteSink<W> {
    fn record(&mut self, line: MetricLine) {
        if let Err(e) = writeln!(self.0, "{line}") {
            log::warn!("metrics write failed: {e}");
        }
    }
}

/// Summary of one training epoch, kept in the checkpoint history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub ce_loss: f64,
    /// Mean distillation loss per block pair over the epoch's steps.
    #[serde(default)]
    pub distill: Vec<f64>,
    pub train_acc: f64,
    #[serde(default)]
    pub val_acc: Option<f64>,
}
