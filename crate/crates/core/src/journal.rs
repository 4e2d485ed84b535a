//! Append-only file of canonical envelopes, one per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::wire::Envelope;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and returns the envelopes already recorded.
    pub fn open(path: impl AsRef<Path>) -> Result<(Journal, Vec<Envelope>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let env = Envelope::decode(line.as_bytes()).map_err(|e| JournalError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                entries.push(env);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((Journal { path, file }, entries))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one line and syncs it before returning.
    pub fn append(&mut self, env: &Envelope) -> Result<(), JournalError> {
        let mut line = env.encode().map_err(|e| JournalError::Corrupt {
            path: self.path.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Resource, ResourceKind};
    use crate::wire::Kind;

    #[test]
    fn replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rs.journal");
        let a = Envelope::new(Kind::Register, "cli", "rs", Resource::new("r1", ResourceKind::Hardware, "http://x"));
        {
            let (mut j, old) = Journal::open(&path).unwrap();
            assert!(old.is_empty());
            j.append(&a).unwrap();
        }
        let (_, old) = Journal::open(&path).unwrap();
        assert_eq!(old, vec![a]);
        std::fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(Journal::open(&path), Err(JournalError::Corrupt { line: 1, .. })));
    }
}
