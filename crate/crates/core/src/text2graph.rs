//! Graph-of-words conversion.
//!
//! A document is cleaned into a lowercase token stream, filtered down to
//! terms by coarse part-of-speech tag, and turned into a graph whose nodes
//! are distinct term surfaces (in order of first appearance) and whose edges
//! join terms that occur fewer than `window` positions apart. Node features
//! are the word vector concatenated with a one-hot of the node's row.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{extract_subgraph, normalize_with_self_loops, Adjacency, NormalizedAdjacency};
use crate::tensor::Tensor;

/// Node features, one row per node in text order.
pub type FeatureMatrix = Tensor<f64>;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Other,
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noun" | "n" | "nn" => Ok(PosTag::Noun),
            "verb" | "v" | "vb" => Ok(PosTag::Verb),
            "adjective" | "adj" | "a" | "jj" => Ok(PosTag::Adjective),
            "other" | "x" => Ok(PosTag::Other),
            _ => Err(Error::Config(format!("unknown part-of-speech tag `{s}`"))),
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PosTag::Noun => "noun",
            PosTag::Verb => "verb",
            PosTag::Adjective => "adjective",
            PosTag::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    /// Position in the cleaned (post-stopword) token stream.
    pub text_pos: usize,
    pub tag: PosTag,
}

/// Token-to-tag map read from a `token tag` per line file. Unlisted tokens
/// are tagged [`PosTag::Other`].
#[derive(Clone, Debug, Default)]
pub struct PosLexicon {
    tags: HashMap<String, PosTag>,
}

impl PosLexicon {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, PosTag)>) -> Self {
        PosLexicon {
            tags: pairs
                .into_iter()
                .map(|(w, t)| (w.to_lowercase(), t))
                .collect(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut tags = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(word), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(
                    path,
                    format!("line {}: expected `token tag`", lineno + 1),
                ));
            };
            let tag = tag.parse::<PosTag>().map_err(|e| {
                Error::format(path, format!("line {}: {e}", lineno + 1))
            })?;
            tags.insert(word.to_lowercase(), tag);
        }
        Ok(PosLexicon { tags })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn tag(&self, surface: &str) -> PosTag {
        self.tags.get(surface).copied().unwrap_or(PosTag::Other)
    }

    pub fn tag_tokens(&self, tokens: &mut [Token]) {
        for t in tokens {
            t.tag = self.tag(&t.surface);
        }
    }
}

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}

/// The stopword list bundled with the crate.
pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

/// Which tokens become graph nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermFilter {
    /// Keep tokens whose tag is in the set.
    Tags(Vec<PosTag>),
    /// Keep every token.
    All,
}

impl TermFilter {
    /// Nouns, verbs and adjectives.
    pub fn content_words() -> Self {
        TermFilter::Tags(vec![PosTag::Noun, PosTag::Verb, PosTag::Adjective])
    }

    fn admits(&self, tag: PosTag) -> bool {
        match self {
            TermFilter::All => true,
            TermFilter::Tags(tags) => tags.contains(&tag),
        }
    }
}

/// How the co-occurrence distance between two terms is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBasis {
    /// Positions in the cleaned token stream, non-terms included.
    #[default]
    Text,
    /// Positions in the stream of selected terms only.
    Terms,
}

#[derive(Clone, Debug)]
pub struct ConversionConfig {
    pub window: usize,
    pub max_nodes: usize,
    pub terms: TermFilter,
    pub distance_basis: DistanceBasis,
    pub stopwords: HashSet<String>,
    pub lexicon: PosLexicon,
}

impl ConversionConfig {
    pub fn new(window: usize, max_nodes: usize) -> Result<Self> {
        let cfg = ConversionConfig {
            window,
            max_nodes,
            terms: TermFilter::content_words(),
            distance_basis: DistanceBasis::Text,
            stopwords: default_stopwords(),
            lexicon: PosLexicon::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        if self.max_nodes == 0 {
            return Err(Error::Config("max_nodes must be at least 1".into()));
        }
        Ok(())
    }

    /// One-hot position width; equal to `max_nodes`.
    pub fn position_dim(&self) -> usize {
        self.max_nodes
    }
}

/// Lowercases, splits on every character outside `[a-z0-9]`, drops
/// stopwords and numbers the survivors consecutively. Tags start as
/// [`PosTag::Other`].
pub fn clean_and_tokenize(raw: &str, stopwords: &HashSet<String>) -> Vec<Token> {
    raw.to_lowercase()
        .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit()))
        .filter(|w| !w.is_empty() && !stopwords.contains(*w))
        .enumerate()
        .map(|(text_pos, w)| Token {
            surface: w.to_string(),
            text_pos,
            tag: PosTag::Other,
        })
        .collect()
}

/// Tokens admitted by `filter`, positions untouched.
pub fn select_terms(tokens: &[Token], filter: &TermFilter) -> Vec<Token> {
    tokens
        .iter()
        .filter(|t| filter.admits(t.tag))
        .cloned()
        .collect()
}

/// Distinct surfaces in order of first occurrence; each node keeps the
/// first occurrence's position and tag.
pub fn collapse_terms(terms: &[Token]) -> Vec<Token> {
    let mut seen = HashSet::new();
    terms
        .iter()
        .filter(|t| seen.insert(t.surface.as_str()))
        .cloned()
        .collect()
}

/// Co-occurrence adjacency over [`collapse_terms`]`(terms)`: nodes `u != v`
/// are joined when some occurrence of `u` and some occurrence of `v` are
/// fewer than `window` positions apart. `terms` must be sorted by position.
pub fn build_edges(terms: &[Token], window: usize) -> Adjacency {
    let positions: Vec<usize> = terms.iter().map(|t| t.text_pos).collect();
    edges_at(terms, &positions, window)
}

fn edges_at(terms: &[Token], positions: &[usize], window: usize) -> Adjacency {
    let mut node_of: HashMap<&str, usize> = HashMap::new();
    for t in terms {
        let next = node_of.len();
        node_of.entry(t.surface.as_str()).or_insert(next);
    }
    let ids: Vec<usize> = terms.iter().map(|t| node_of[t.surface.as_str()]).collect();
    let mut edges = Vec::new();
    for i in 0..terms.len() {
        for j in i + 1..terms.len() {
            if positions[j] - positions[i] >= window {
                break;
            }
            edges.push((ids[i], ids[j]));
        }
    }
    Adjacency::from_edges(node_of.len(), &edges).expect("ids are in range")
}

/// Row `i` is `[word_vector(node_i) || one_hot(i, max_nodes)]`; unknown words
/// get a zero word vector. Returns the matrix and the unknown-word count.
pub fn build_features(
    nodes: &[Token],
    embeddings: &EmbeddingTable,
    cfg: &ConversionConfig,
) -> (FeatureMatrix, usize) {
    features_for(nodes.iter().map(|t| t.surface.as_str()), embeddings, cfg.position_dim())
}

fn features_for<'a>(
    surfaces: impl ExactSizeIterator<Item = &'a str>,
    embeddings: &EmbeddingTable,
    position_dim: usize,
) -> (FeatureMatrix, usize) {
    let dim = embeddings.dim();
    let n = surfaces.len();
    let c = dim + position_dim;
    let mut data = vec![0.0; n * c];
    let mut unknown = 0;
    for (i, w) in surfaces.enumerate() {
        let row = &mut data[i * c..(i + 1) * c];
        match embeddings.lookup(w) {
            Some(v) => {
                for (dst, &src) in row.iter_mut().zip(v) {
                    *dst = f64::from(src);
                }
            }
            None => unknown += 1,
        }
        if i < position_dim {
            row[dim + i] = 1.0;
        }
    }
    (Tensor::from_vec(n, c, data).expect("sized"), unknown)
}

/// One training example: a padded graph plus its label.
#[derive(Clone, Debug)]
pub struct TextGraph {
    nodes: Vec<Token>,
    adjacency: Adjacency,
    features: FeatureMatrix,
    normalized: NormalizedAdjacency,
    label: usize,
    n_real: usize,
}

impl TextGraph {
    /// Pads `adjacency` (`n_real x n_real`) and `features` (`n_real x c`) up
    /// to `capacity` rows with zeros and caches the normalized real block.
    pub fn new(
        nodes: Vec<Token>,
        adjacency: Adjacency,
        features: FeatureMatrix,
        label: usize,
        capacity: usize,
    ) -> Result<Self> {
        let n_real = nodes.len();
        if adjacency.n() != n_real || features.rows() != n_real {
            return Err(Error::Shape(format!(
                "{n_real} nodes with a {}-node adjacency and {} feature rows",
                adjacency.n(),
                features.rows()
            )));
        }
        if n_real > capacity {
            return Err(Error::Shape(format!(
                "{n_real} nodes exceed capacity {capacity}"
            )));
        }
        if nodes.windows(2).any(|w| w[0].text_pos >= w[1].text_pos) {
            return Err(Error::Index("nodes must be in ascending text order".into()));
        }
        let normalized = normalize_with_self_loops(&adjacency);
        let c = features.cols();
        let mut padded_adj = vec![0.0; capacity * capacity];
        for i in 0..n_real {
            for j in 0..n_real {
                padded_adj[i * capacity + j] = adjacency.get(i, j);
            }
        }
        let mut padded_feat = features.into_vec();
        padded_feat.resize(capacity * c, 0.0);
        Ok(TextGraph {
            nodes,
            adjacency: Adjacency::new(capacity, padded_adj)?,
            features: Tensor::from_vec(capacity, c, padded_feat)?,
            normalized,
            label,
            n_real,
        })
    }

    pub fn nodes(&self) -> &[Token] {
        &self.nodes
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn capacity(&self) -> usize {
        self.adjacency.n()
    }

    pub fn is_degenerate(&self) -> bool {
        self.n_real == 0
    }

    /// Padded adjacency, `capacity x capacity`.
    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// Padded features, `capacity x c`.
    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// `true` for real rows, `false` for padding.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.capacity()).map(|i| i < self.n_real).collect()
    }

    /// Adjacency restricted to the real nodes.
    pub fn real_adjacency(&self) -> Adjacency {
        let idx: Vec<usize> = (0..self.n_real).collect();
        extract_subgraph(&self.adjacency, &idx).expect("prefix indices are valid")
    }

    /// Normalized (self-loop augmented) adjacency of the real nodes.
    pub fn normalized(&self) -> &NormalizedAdjacency {
        &self.normalized
    }

    /// Feature rows of the real nodes.
    pub fn real_features(&self) -> FeatureMatrix {
        let c = self.features.cols();
        Tensor::from_vec(
            self.n_real,
            c,
            self.features.as_slice()[..self.n_real * c].to_vec(),
        )
        .expect("prefix")
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.real_adjacency().edges()
    }

    /// Rebuilds a graph from stored nodes and edges, re-deriving features.
    pub fn from_parts(
        nodes: Vec<Token>,
        edges: &[(usize, usize)],
        label: usize,
        embeddings: &EmbeddingTable,
        max_nodes: usize,
    ) -> Result<(Self, usize)> {
        let adjacency = Adjacency::from_edges(nodes.len(), edges)?;
        let (features, unknown) =
            features_for(nodes.iter().map(|t| t.surface.as_str()), embeddings, max_nodes);
        Ok((
            TextGraph::new(nodes, adjacency, features, label, max_nodes)?,
            unknown,
        ))
    }
}

/// Result of converting one document.
#[derive(Clone, Debug)]
pub struct Conversion {
    pub graph: TextGraph,
    pub unknown_words: usize,
    /// Number of distinct terms before truncation to `max_nodes`.
    pub distinct_terms: usize,
}

/// Full pipeline for one document: tokenize, tag, select terms, collapse
/// repeated surfaces, keep the first `max_nodes` nodes, build edges and
/// features, pad to `max_nodes`.
pub fn convert(
    raw: &str,
    label: usize,
    embeddings: &EmbeddingTable,
    cfg: &ConversionConfig,
) -> Result<Conversion> {
    cfg.validate()?;
    let mut tokens = clean_and_tokenize(raw, &cfg.stopwords);
    cfg.lexicon.tag_tokens(&mut tokens);
    let terms = select_terms(&tokens, &cfg.terms);
    let nodes = collapse_terms(&terms);
    let distinct_terms = nodes.len();
    let kept: Vec<Token> = nodes.into_iter().take(cfg.max_nodes).collect();
    let kept_set: HashSet<&str> = kept.iter().map(|t| t.surface.as_str()).collect();

    let mut positions = Vec::with_capacity(terms.len());
    let mut kept_terms = Vec::with_capacity(terms.len());
    for (rank, t) in terms.iter().enumerate() {
        if kept_set.contains(t.surface.as_str()) {
            positions.push(match cfg.distance_basis {
                DistanceBasis::Text => t.text_pos,
                DistanceBasis::Terms => rank,
            });
            kept_terms.push(t.clone());
        }
    }
    let adjacency = edges_at(&kept_terms, &positions, cfg.window);
    let (features, unknown_words) = build_features(&kept, embeddings, cfg);
    let graph = TextGraph::new(kept, adjacency, features, label, cfg.max_nodes)?;
    Ok(Conversion {
        graph,
        unknown_words,
        distinct_terms,
    })
}
