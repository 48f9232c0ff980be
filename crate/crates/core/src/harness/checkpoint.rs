//! Append-only JSONL record of finished trials, so an interrupted
//! experiment resumes where it stopped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::TrialOutcome;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    trial: usize,
    outcomes: Vec<TrialOutcome>,
}

pub struct Checkpoint {
    done: BTreeMap<usize, Vec<TrialOutcome>>,
    out: Mutex<BufWriter<File>>,
}

impl Checkpoint {
    /// Opens or creates the checkpoint at `path`. An existing file must carry
    /// the same config hash. A torn final line from an interrupted write is
    /// dropped.
    pub fn open(path: &Path, config_hash: &str) -> Result<Self> {
        let mut done = BTreeMap::new();
        if path.exists() {
            let mut lines = BufReader::new(File::open(path)?).lines();
            let header: Header = match lines.next() {
                Some(line) => serde_json::from_str(&line?)?,
                None => Header {
                    config_hash: config_hash.to_string(),
                },
            };
            if header.config_hash != config_hash {
                return Err(Error::Config(format!(
                    "checkpoint {} belongs to config {}, not {config_hash}",
                    path.display(),
                    header.config_hash
                )));
            }
            for line in lines {
                let line = line?;
                match serde_json::from_str::<Line>(&line) {
                    Ok(l) => {
                        done.insert(l.trial, l.outcomes);
                    }
                    Err(_) => break,
                }
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut out,
            &Header {
                config_hash: config_hash.to_string(),
            },
        )?;
        out.write_all(b"\n")?;
        for (trial, outcomes) in &done {
            write_line(&mut out, *trial, outcomes)?;
        }
        out.flush()?;
        Ok(Checkpoint {
            done,
            out: Mutex::new(out),
        })
    }

    /// Trials recorded before this run.
    pub fn finished(&self) -> BTreeMap<usize, Vec<TrialOutcome>> {
        self.done.clone()
    }

    pub fn append(&self, trial: usize, outcomes: &[TrialOutcome]) -> Result<()> {
        let mut out = self
            .out
            .lock()
            .map_err(|_| Error::Internal("checkpoint writer poisoned".into()))?;
        write_line(&mut *out, trial, outcomes)?;
        out.flush()?;
        Ok(())
    }
}

fn write_line(out: &mut impl Write, trial: usize, outcomes: &[TrialOutcome]) -> Result<()> {
    serde_json::to_writer(
        &mut *out,
        &Line {
            trial,
            outcomes: outcomes.to_vec(),
        },
    )?;
    out.write_all(b"\n")?;
    Ok(())
}
