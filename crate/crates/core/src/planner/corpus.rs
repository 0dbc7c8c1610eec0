//! Recorded planner answers with pinned verdicts, used to regression-test
//! the answer parser.
//!
//! A corpus directory holds one `.txt` file per answer and an `expected.tsv`
//! manifest mapping file names to `LEFT`, `MIDDLE`, `RIGHT` or `UNPARSEABLE`.

use std::fs;
use std::path::Path;

use super::parse_instruction;
use crate::policy::Instruction;

pub const MANIFEST: &str = "expected.tsv";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusVerdict {
    pub file: String,
    /// `None` means the answer is pinned as naming no direction.
    pub expected: Option<Instruction>,
    pub parsed: Option<Instruction>,
}

impl CorpusVerdict {
    pub fn passed(&self) -> bool {
        self.expected == self.parsed
    }
}

fn verdict_name(i: Option<Instruction>) -> &'static str {
    i.map_or("UNPARSEABLE", |i| i.as_str())
}

impl std::fmt::Display for CorpusVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} (expected {}) {}",
            self.file,
            verdict_name(self.parsed),
            verdict_name(self.expected),
            if self.passed() { "ok" } else { "MISMATCH" }
        )
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

/// Parses every file listed in the manifest. Files not in the manifest are
/// ignored.
pub fn check_corpus(dir: &Path) -> Result<Vec<CorpusVerdict>, CorpusError> {
    let manifest = read(&dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| CorpusError::Manifest { line: n + 1, msg };
        let (file, want) = line.split_once('\t').ok_or_else(|| bad("expected <file>\\t<verdict>".into()))?;
        let expected = match want.trim() {
            "UNPARSEABLE" => None,
            other => Some(other.parse::<Instruction>().map_err(|e| bad(e.to_string()))?),
        };
        let text = read(&dir.join(file))?;
        out.push(CorpusVerdict { file: file.to_string(), expected, parsed: parse_instruction(&text) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_manifest_and_flags_mismatches() {
        let dir = std::env::temp_dir().join(format!("sfd-corpus-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("a.txt"), "go LEFT").unwrap();
        fs::write(dir.join("b.txt"), "no idea").unwrap();
        fs::write(dir.join(MANIFEST), "# header\na.txt\tRIGHT\nb.txt\tUNPARSEABLE\n").unwrap();
        let v = check_corpus(&dir).unwrap();
        assert_eq!(v.len(), 2);
        assert!(!v[0].passed());
        assert!(v[1].passed());
        assert!(v[0].to_string().contains("MISMATCH"));
        fs::write(dir.join(MANIFEST), "a.txt RIGHT\n").unwrap();
        assert!(matches!(check_corpus(&dir), Err(CorpusError::Manifest { line: 1, .. })));
        fs::remove_dir_all(&dir).ok();
    }
}
