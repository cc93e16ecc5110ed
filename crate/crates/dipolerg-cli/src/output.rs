//! Result files, the manifest, and exit codes.

use clap::ValueEnum;
use dipolerg::Error;
use serde::Serialize;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
    /// A requested check ran and did not hold.
    Check(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) if e.is_validation() => 2,
            Failure::Lib(_) | Failure::Check(_) => 3,
            Failure::Io(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(s) | Failure::Check(s) | Failure::Io(s) => f.write_str(s),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

pub struct Output {
    dir: PathBuf,
    format: Format,
    quiet: bool,
    files: Vec<String>,
}

impl Output {
    pub fn new(dir: &str, format: Format, quiet: bool) -> Result<Self, Failure> {
        fs::create_dir_all(dir)?;
        Ok(Output { dir: PathBuf::from(dir), format, quiet, files: Vec::new() })
    }

    fn write(&mut self, name: String, bytes: &[u8]) -> Result<(), Failure> {
        fs::write(self.dir.join(&name), bytes)?;
        self.files.push(name);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
        if !self.quiet {
            println!("{text}");
        }
        self.write(format!("{name}.json"), format!("{text}\n").as_bytes())
    }

    pub fn json_lines<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), Failure> {
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, r).map_err(|e| Failure::Io(e.to_string()))?;
            buf.push(b'\n');
        }
        if !self.quiet {
            std::io::stdout().write_all(&buf)?;
        }
        self.write(format!("{name}.jsonl"), &buf)
    }

    pub fn table_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| Failure::Io(e.to_string()))?;
        for r in rows {
            w.write_record(r).map_err(|e| Failure::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
        self.write(format!("{name}.csv"), &bytes)
    }

    /// A table in the requested format.
    pub fn table(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
        match self.format {
            Format::Csv => self.table_csv(name, header, rows),
            Format::Json => {
                let objs: Vec<serde_json::Map<String, serde_json::Value>> = rows
                    .iter()
                    .map(|r| header.iter().cloned().zip(r.iter().map(|v| serde_json::Value::String(v.clone()))).collect())
                    .collect();
                let text = serde_json::to_string(&objs).map_err(|e| Failure::Io(e.to_string()))?;
                self.write(format!("{name}_table.json"), format!("{text}\n").as_bytes())
            }
        }
    }

    /// Aligned text on stderr, for people.
    pub fn text_table(&self, header: &[String], rows: &[Vec<String>]) {
        if self.quiet {
            return;
        }
        let w = rows.iter().chain([header.to_vec()].iter()).map(|r| r[0].len()).max().unwrap_or(0);
        eprintln!("{:<w$}  {}", header[0], header[1]);
        for r in rows {
            eprintln!("{:<w$}  {}", r[0], r[1]);
        }
    }

    pub fn manifest<T: Serialize>(&mut self, command: &[String], config: &T, status: &str) -> Result<(), Failure> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let m = serde_json::json!({
            "tool": "dipolerg",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "status": status,
            "outputs": self.files,
            "timestamp": timestamp,
        });
        let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::Io(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), format!("{text}\n"))?;
        Ok(())
    }
}
