//! JSON-lines graph datasets and CSV corpus conversion.
//!
//! One record per line:
//!
//! ```json
//! {"label":1,"nodes":[{"w":"japi","p":0},{"w":"person","p":1}],"edges":[[0,1]]}
//! ```
//!
//! Features are not stored; they are rebuilt from an embedding table when
//! the file is loaded.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::text2graph::{
    clean_and_tokenize, convert, ConversionConfig, PosTag, TextGraph, Token,
};

/// Environment variable holding the conversion worker count.
pub const WORKERS_ENV: &str = "GPOOLNET_WORKERS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub w: String,
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub label: usize,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[usize; 2]>,
}

impl GraphRecord {
    pub fn from_graph(g: &TextGraph) -> Self {
        GraphRecord {
            label: g.label(),
            nodes: g
                .nodes()
                .iter()
                .map(|t| NodeRecord {
                    w: t.surface.clone(),
                    p: t.text_pos,
                })
                .collect(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }

    /// Rebuilds the graph; returns it with its unknown-word count.
    pub fn to_graph(&self, embeddings: &EmbeddingTable, max_nodes: usize) -> Result<(TextGraph, usize)> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Token {
                surface: n.w.clone(),
                text_pos: n.p,
                tag: PosTag::Other,
            })
            .collect();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        TextGraph::from_parts(nodes, &edges, self.label, embeddings, max_nodes)
    }
}

/// Writes one record per line.
pub fn write_records(path: impl AsRef<Path>, records: &[GraphRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads every record; blank lines are skipped, anything else unparseable
/// is a format error naming the line.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GraphRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Loads a dataset, re-deriving features from `embeddings`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    embeddings: &EmbeddingTable,
    max_nodes: usize,
) -> Result<Vec<TextGraph>> {
    let path = path.as_ref();
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_graph(embeddings, max_nodes)
                .map(|(g, _)| g)
                .map_err(|e| Error::format(path, format!("record {}: {e}", i + 1)))
        })
        .collect()
}

/// Every surface appearing in the given datasets.
pub fn dataset_vocabulary(records: &[GraphRecord]) -> HashSet<String> {
    records
        .iter()
        .flat_map(|r| r.nodes.iter().map(|n| n.w.clone()))
        .collect()
}

/// One CSV row the converter could not use.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MalformedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConversionStats {
    /// Records written.
    pub docs: usize,
    /// Mean node count over written records.
    pub mean_terms: f64,
    /// Nodes without an embedding, summed over written records.
    pub unknown_words: usize,
    /// Documents that produced no nodes and were skipped.
    pub degenerate: usize,
    pub malformed: Vec<MalformedRow>,
}

/// A parsed corpus row: label plus the remaining columns joined by spaces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusRow {
    pub line: u64,
    pub label: usize,
    pub text: String,
}

/// Parses a header-less `label,text[,text...]` CSV. Rows that fail are
/// returned separately with their line numbers.
pub fn parse_corpus(reader: impl std::io::Read) -> (Vec<CorpusRow>, Vec<MalformedRow>) {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let fallback = i as u64 + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(fallback, |p| p.line());
                bad.push(MalformedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(fallback, |p| p.line());
        if rec.len() < 2 {
            bad.push(MalformedRow {
                line,
                reason: format!("expected label and text, found {} field(s)", rec.len()),
            });
            continue;
        }
        match rec[0].trim().parse::<usize>() {
            Ok(label) => rows.push(CorpusRow {
                line,
                label,
                text: rec.iter().skip(1).collect::<Vec<_>>().join(" "),
            }),
            Err(_) => bad.push(MalformedRow {
                line,
                reason: format!("label `{}` is not a non-negative integer", &rec[0]),
            }),
        }
    }
    (rows, bad)
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// Surfaces that may become nodes in `rows`, used to filter the embedding
/// file on load.
pub fn corpus_vocabulary(rows: &[CorpusRow], cfg: &ConversionConfig) -> HashSet<String> {
    rows.iter()
        .flat_map(|r| clean_and_tokenize(&r.text, &cfg.stopwords))
        .map(|t| t.surface)
        .collect()
}

/// Converts rows in parallel; output order equals input order.
pub fn convert_rows(
    rows: &[CorpusRow],
    embeddings: &EmbeddingTable,
    cfg: &ConversionConfig,
    workers: Option<usize>,
) -> Result<(Vec<GraphRecord>, ConversionStats)> {
    cfg.validate()?;
    let run = || {
        rows.par_iter()
            .map(|r| convert(&r.text, r.label, embeddings, cfg))
            .collect::<Result<Vec<_>>>()
    };
    let converted = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let mut stats = ConversionStats::default();
    let mut records = Vec::with_capacity(converted.len());
    let mut total_terms = 0;
    for c in &converted {
        if c.graph.is_degenerate() {
            stats.degenerate += 1;
            continue;
        }
        total_terms += c.graph.n_real();
        stats.unknown_words += c.unknown_words;
        records.push(GraphRecord::from_graph(&c.graph));
    }
    stats.docs = records.len();
    if stats.docs > 0 {
        stats.mean_terms = total_terms as f64 / stats.docs as f64;
    }
    Ok((records, stats))
}

/// Reads a CSV corpus, converts it and writes the dataset.
pub fn convert_corpus(
    input: impl AsRef<Path>,
    embeddings: &EmbeddingTable,
    cfg: &ConversionConfig,
    output: impl AsRef<Path>,
    workers: Option<usize>,
) -> Result<ConversionStats> {
    let input = input.as_ref();
    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let (rows, malformed) = parse_corpus(BufReader::new(file));
    let (records, mut stats) = convert_rows(&rows, embeddings, cfg, workers)?;
    stats.malformed = malformed;
    write_records(output, &records)?;
    Ok(stats)
}
