//! Experience buffers as JSONL, one episode per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::domain::{EpisodeRecord, ExperienceBuffer};
use crate::error::{Error, Result};

pub fn persist_buffer(buffer: &ExperienceBuffer, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in buffer {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a buffer back; blank lines are skipped and a malformed line is
/// reported by its 1-based number.
pub fn load_buffer(path: &Path) -> Result<ExperienceBuffer> {
    let reader = BufReader::new(File::open(path)?);
    let mut buffer = ExperienceBuffer::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Persist {
            line: i + 1,
            message: e.to_string(),
        })?;
        buffer.push(record);
    }
    Ok(buffer)
}
