use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{DiscriminatorConfig, GeneratorConfig};

/// Written once each time a run starts or resumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub train_config: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// SHA-256 of the content-loss feature extractor weights.
    pub extractor_hash: String,
    pub start_pretrain_epoch: usize,
    pub start_adversarial_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within its phase.
    pub epoch: usize,
    pub phase: Phase,
    pub g_loss: f64,
    pub d_loss: Option<f64>,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    /// Seconds since the phase started in this process.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(Box<LogHeader>),
    Epoch(EpochRecord),
}

/// Append-only JSON-lines experiment log.
#[derive(Debug)]
pub struct ExperimentLog {
    path: PathBuf,
    file: File,
}

impl ExperimentLog {
    /// Opens `path` for appending, creating it if needed, and writes `header`.
    pub fn open(path: &Path, header: LogHeader) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = ExperimentLog {
            path: path.to_path_buf(),
            file,
        };
        log.write_line(&LogLine::Header(Box::new(header)))?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        self.write_line(&LogLine::Epoch(record.clone()))
    }

    fn write_line(&mut self, line: &LogLine) -> Result<()> {
        let text = serde_json::to_string(line).expect("log line serialises");
        writeln!(self.file, "{text}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// All headers and epoch records in file order.
pub fn read_log(path: &Path) -> Result<(Vec<LogHeader>, Vec<EpochRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut headers = Vec::new();
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(LogLine::Header(h)) => headers.push(*h),
            Ok(LogLine::Epoch(r)) => records.push(r),
            Err(e) => {
                return Err(Error::Train(format!(
                    "{}:{}: bad log line: {e}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok((headers, records))
}
