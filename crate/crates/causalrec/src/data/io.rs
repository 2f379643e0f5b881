use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{DataError, Result, UserSequence};

/// JSON formatter that prints every float with 9 significant digits in
/// scientific notation. Nine digits pin down an f32 exactly, so
/// read(write(x)) = x, and the fixed width keeps files byte-identical
/// across runs.
struct NineDigitFormatter;

impl serde_json::ser::Formatter for NineDigitFormatter {
    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }

    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Writes one user per line as a structured JSON record.
pub fn write_dataset(sequences: &[UserSequence], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for seq in sequences {
        let mut ser = serde_json::Serializer::with_formatter(&mut w, NineDigitFormatter);
        seq.serialize(&mut ser)
            .map_err(|e| DataError::Parse { line: 0, message: format!("encoding: {e}") })?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. A malformed record fails
/// with its 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<UserSequence>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: UserSequence = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, small_config};

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_dataset(&[], &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), vec![]);
    }

    #[test]
    fn hundred_users_round_trip_exactly() {
        let mut cfg = small_config();
        cfg.n_users = 100;
        let data = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&data, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn rewriting_read_data_is_byte_identical() {
        let data = generate_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_dataset(&data, &a).unwrap();
        write_dataset(&read_dataset(&a).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn identical_seeds_write_identical_bytes() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_dataset(&generate_dataset(&cfg).unwrap(), &a).unwrap();
        write_dataset(&generate_dataset(&cfg).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_line_is_reported_with_its_number() {
        let mut cfg = small_config();
        cfg.n_users = 10;
        let data = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&data, &path).unwrap();
        let mut lines: Vec<String> =
            std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
        lines[6] = lines[6].replace("user_id", "user_!d");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path).unwrap_err() {
            DataError::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
