//! Report plumbing: provenance, tables and rendered outputs.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::Result;

pub const TOOL: &str = "covap-sim";

/// Enough to re-run the command: the full config, its hash and the seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let canonical = cfg.canonical_json()?;
        Ok(Provenance {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_owned(),
            config_name: cfg.name.clone(),
            config_sha256: hex::encode(Sha256::digest(canonical.as_bytes())),
            seed: cfg.seed,
            config: serde_json::from_str(&canonical)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    #[default]
    Table,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Fixed six-decimal rendering so CSVs are byte-stable.
pub fn fmt_ms(v: f64) -> String {
    format!("{v:.6}")
}

impl Table {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Table {
            title: title.to_owned(),
            headers: headers.iter().map(|h| (*h).to_owned()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("{}\n{}\n", self.title, line(&self.headers));
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Everything a subcommand produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    /// File name and contents, written under `--out`.
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub summary: Value,
    pub tables: Vec<Table>,
    /// Process exit status the CLI should use.
    pub status: i32,
}

impl CommandOutput {
    pub fn render(&self, format: OutputFormat) -> Result<String> {
        Ok(match format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(&self.summary)?;
                s.push('\n');
                s
            }
            OutputFormat::Csv => {
                let mut s = String::new();
                for t in &self.tables {
                    s.push_str(&String::from_utf8_lossy(&t.to_csv()?));
                }
                s
            }
            OutputFormat::Table => self
                .tables
                .iter()
                .map(Table::to_text)
                .collect::<Vec<_>>()
                .join("\n"),
        })
    }

    pub fn artifact(&self, name: &str) -> Option<&[u8]> {
        self.artifacts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}
