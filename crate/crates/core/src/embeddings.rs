//! Pretrained word vectors in the textual word2vec/fastText layout:
//! an optional `count dim` header followed by `token v1 ... vdim` lines.
//! Files ending in `.gz` are decompressed transparently.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f32>>,
}

/// Counts gathered while reading a vectors file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub kept: usize,
    pub filtered: usize,
    pub malformed: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: HashMap::new(),
        }
    }

    /// Inserts a vector under the lowercased token. The first vector seen for
    /// a token wins.
    pub fn insert(&mut self, token: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for `{token}` has {} components, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.entry(token.to_lowercase()).or_insert(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Case-insensitive exact lookup. `None` marks an unknown word.
    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        match self.entries.get(token) {
            Some(v) => Some(v),
            None => self.entries.get(&token.to_lowercase()).map(Vec::as_slice),
        }
    }

    /// Tokens in sorted order.
    pub fn tokens(&self) -> Vec<&str> {
        let mut t: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        t.sort_unstable();
        t
    }

    pub fn load(path: impl AsRef<Path>, vocabulary: Option<&HashSet<String>>) -> Result<Self> {
        Self::load_with_report(path, vocabulary).map(|(t, _)| t)
    }

    pub fn load_with_report(
        path: impl AsRef<Path>,
        vocabulary: Option<&HashSet<String>>,
    ) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        Self::read(BufReader::new(reader), vocabulary, path)
    }

    fn read<R: BufRead>(
        reader: R,
        vocabulary: Option<&HashSet<String>>,
        path: &Path,
    ) -> Result<(Self, LoadReport)> {
        let mut report = LoadReport::default();
        let mut dim: Option<usize> = None;
        let mut entries = HashMap::new();

        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            report.lines += 1;
            if lineno == 0 && fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    dim = Some(d);
                    continue;
                }
            }
            let Ok(vector) = fields[1..]
                .iter()
                .map(|f| f.parse::<f32>())
                .collect::<Result<Vec<f32>, _>>()
            else {
                report.malformed += 1;
                continue;
            };
            if vector.is_empty() {
                report.malformed += 1;
                continue;
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(Error::format(
                        path,
                        format!(
                            "line {}: `{}` has {} components, expected {d}",
                            lineno + 1,
                            fields[0],
                            vector.len()
                        ),
                    ));
                }
                Some(_) => {}
            }
            let token = fields[0].to_lowercase();
            if vocabulary.is_some_and(|v| !v.contains(&token)) {
                report.filtered += 1;
                continue;
            }
            if let std::collections::hash_map::Entry::Vacant(slot) = entries.entry(token) {
                slot.insert(vector);
                report.kept += 1;
            }
        }

        let table = EmbeddingTable {
            dim: dim.unwrap_or(0),
            entries,
        };
        Ok((table, report))
    }

    /// Writes the table with a `count dim` header, tokens sorted. Values use
    /// the shortest representation that parses back to the same `f32`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "{} {}", self.len(), self.dim)?;
            for token in self.tokens() {
                write!(w, "{token}")?;
                for v in &self.entries[token] {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str, vocab: Option<&HashSet<String>>) -> Result<(EmbeddingTable, LoadReport)> {
        EmbeddingTable::read(Cursor::new(text), vocab, Path::new("mem"))
    }

    #[test]
    fn two_tokens_dim_three() {
        let (t, r) = parse("2 3\ncat 1 2 3\ndog 4 5 6\n", None).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert_eq!(r.kept, 2);
        assert_eq!(t.lookup("dog").unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn headerless_file() {
        let (t, _) = parse("cat 1 2 3\ndog 4 5 6\n", None).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
    }

    #[test]
    fn vocabulary_filter() {
        let vocab: HashSet<String> = ["a".to_string()].into();
        let (t, r) = parse("a 1 2\nb 3 4\n", Some(&vocab)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(r.filtered, 1);
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let (t, _) = parse("Cat 0.5 -1\n", None).unwrap();
        assert_eq!(t.lookup("cat").unwrap(), &[0.5, -1.0]);
        assert_eq!(t.lookup("Cat").unwrap(), &[0.5, -1.0]);
        assert!(t.lookup("dog").is_none());
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let (t, r) = parse("a 1 2\nb x 4\nc 5 6\nlonely\n", None).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(r.malformed, 2);
    }

    #[test]
    fn inconsistent_dims_are_format_errors() {
        let err = parse("a 1 2\nb 3 4 5\n", None).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = parse("2 3\na 1 2\n", None).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = EmbeddingTable::load("/nonexistent/vectors.txt", None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn write_then_load_round_trips_and_gz_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = EmbeddingTable::new(3);
        t.insert("alpha", vec![0.1, -2.5e-7, 3.0]).unwrap();
        t.insert("beta", vec![f32::MIN_POSITIVE, 1.0 / 3.0, -0.0]).unwrap();
        let plain = dir.path().join("v.txt");
        t.write(&plain).unwrap();
        let back = EmbeddingTable::load(&plain, None).unwrap();
        assert_eq!(back, t);

        let gz = dir.path().join("v.txt.gz");
        let mut enc = flate2::write::GzEncoder::new(
            File::create(&gz).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(&std::fs::read(&plain).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(EmbeddingTable::load(&gz, None).unwrap(), t);
    }
}
