//! Small generated inputs for gradient checks, smoke runs and tests.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::EmbeddingTable;
use crate::error::Result;
use crate::graph::Adjacency;
use crate::tensor::Tensor;
use crate::text2graph::{convert, ConversionConfig, PosTag, TermFilter, TextGraph, Token};

/// Graph with `n` nodes, edges drawn with probability `edge_prob`, features
/// uniform in `[-1, 1]`. Nodes are named `n0, n1, ...` in text order.
pub fn random_graph<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    input_dim: usize,
    label: usize,
    edge_prob: f64,
) -> Result<TextGraph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(edge_prob) {
                edges.push((i, j));
            }
        }
    }
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let features = Tensor::from_vec(
        n,
        input_dim,
        (0..n * input_dim).map(|_| dist.sample(rng)).collect(),
    )?;
    let nodes = (0..n)
        .map(|i| Token {
            surface: format!("n{i}"),
            text_pos: i,
            tag: PosTag::Noun,
        })
        .collect();
    TextGraph::new(nodes, Adjacency::from_edges(n, &edges)?, features, label, n)
}

/// A labelled toy corpus with its embedding table.
pub struct ToyCorpus {
    pub documents: Vec<(usize, String)>,
    pub embeddings: EmbeddingTable,
}

/// `n_docs` documents over `n_classes` classes. Every class owns a handful
/// of cue words; documents mix two or three cues of their class with shared
/// filler words. Embeddings are uniform in `[-1, 1]`.
pub fn toy_corpus(n_docs: usize, n_classes: usize, embed_dim: usize, seed: u64) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cues: Vec<Vec<String>> = (0..n_classes)
        .map(|c| (0..4).map(|i| format!("cue{c}x{i}")).collect())
        .collect();
    let fillers: Vec<String> = (0..12).map(|i| format!("filler{i}")).collect();

    let dist = Uniform::new_inclusive(-1.0f32, 1.0);
    let mut embeddings = EmbeddingTable::new(embed_dim);
    for w in cues.iter().flatten().chain(&fillers) {
        let v = (0..embed_dim).map(|_| dist.sample(&mut rng)).collect();
        embeddings.insert(w, v).expect("dims match");
    }

    let documents = (0..n_docs)
        .map(|d| {
            let label = d % n_classes;
            let len = rng.gen_range(5..=9);
            let mut words: Vec<&str> = (0..len)
                .map(|_| fillers.choose(&mut rng).unwrap().as_str())
                .collect();
            let n_cues = rng.gen_range(2..=3);
            for _ in 0..n_cues {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, cues[label].choose(&mut rng).unwrap());
            }
            (label, words.join(" "))
        })
        .collect();
    ToyCorpus {
        documents,
        embeddings,
    }
}

impl ToyCorpus {
    /// Converts every document with all tokens admitted as terms.
    pub fn graphs(&self, window: usize, max_nodes: usize) -> Result<Vec<TextGraph>> {
        let mut cfg = ConversionConfig::new(window, max_nodes)?;
        cfg.terms = TermFilter::All;
        cfg.stopwords.clear();
        self.documents
            .iter()
            .map(|(label, text)| convert(text, *label, &self.embeddings, &cfg).map(|c| c.graph))
            .collect()
    }
}

/// Random token stream of `len` tokens over a vocabulary of `vocab` words,
/// with random positional gaps from removed words.
pub fn random_terms<R: Rng + ?Sized>(rng: &mut R, len: usize, vocab: usize) -> Vec<Token> {
    let mut pos = 0;
    (0..len)
        .map(|_| {
            pos += rng.gen_range(1..=3);
            Token {
                surface: format!("w{}", rng.gen_range(0..vocab)),
                text_pos: pos,
                tag: PosTag::Noun,
            }
        })
        .collect()
}
