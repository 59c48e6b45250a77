use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnnotatedNote;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "numlesa-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Writes a header line followed by one JSON note per line.
pub fn save_corpus(notes: &[AnnotatedNote], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for n in notes {
        serde_json::to_writer(&mut w, n)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus file. An empty file is an empty corpus; any malformed line
/// is reported with its 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Vec<AnnotatedNote>> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut notes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if lineno == 1 {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
            if h.format != CORPUS_FORMAT || h.version != CORPUS_VERSION {
                return Err(parse_err(
                    1,
                    format!("unsupported corpus format {} v{}", h.format, h.version),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let note: AnnotatedNote =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        note.validate()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        notes.push(note);
    }
    Ok(notes)
}
