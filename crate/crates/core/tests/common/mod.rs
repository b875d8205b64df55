//! Independent reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashSet;
use std::path::PathBuf;

use gpoolnet::autodiff::Tape;
use gpoolnet::embeddings::EmbeddingTable;
use gpoolnet::gradcheck::{max_relative_error, numeric_gradient};
use gpoolnet::text2graph::{ConversionConfig, PosLexicon};
use gpoolnet::{Result, Tensor};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Conversion settings of the single-sentence fixture.
pub fn sentence_config() -> ConversionConfig {
    let mut cfg = ConversionConfig::new(4, 10).unwrap();
    cfg.stopwords = gpoolnet::text2graph::load_stopwords(fixture("sentence_stopwords.txt")).unwrap();
    cfg.lexicon = PosLexicon::load(fixture("sentence_lexicon.txt")).unwrap();
    cfg
}

pub fn sentence_embeddings() -> EmbeddingTable {
    EmbeddingTable::load(fixture("sentence_vectors.txt"), None).unwrap()
}

pub const SENTENCE_TEXT: &str = "Japi is the person who really plays WoW.";

/// Pooling written out loop by loop: score, stable sort, gather, gate.
pub struct BrutePool {
    pub idx: Vec<usize>,
    pub adjacency: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

pub fn brute_gpool(a: &[Vec<f64>], x: &[Vec<f64>], p: &[f64], k: usize, gate: bool) -> BrutePool {
    let n = x.len();
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..p.len() {
            s += x[i][j] * p[j];
        }
        y[i] = s.abs();
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Insertion sort, descending, earlier index first on ties.
    for i in 1..n {
        let mut j = i;
        while j > 0 && y[order[j]] > y[order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut idx: Vec<usize> = order[..k].to_vec();
    idx.sort();
    let adjacency = idx
        .iter()
        .map(|&r| idx.iter().map(|&c| a[r][c]).collect())
        .collect();
    let features = idx
        .iter()
        .map(|&r| {
            let g = if gate { y[r].tanh() } else { 1.0 };
            x[r].iter().map(|v| v * g).collect()
        })
        .collect();
    BrutePool {
        idx,
        adjacency,
        features,
    }
}

/// Symmetric 0/1 adjacency without self-loops.
pub fn random_adjacency<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    a
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect()
}

pub fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Graph of words by exhaustive pairwise comparison: every distinct
/// surface is a node in order of first appearance; two nodes are joined if
/// any of their occurrences lie fewer than `window` positions apart.
pub fn cooccurrence_oracle(stream: &[(String, usize)], window: usize) -> (Vec<String>, HashSet<(usize, usize)>) {
    let mut nodes: Vec<String> = Vec::new();
    for (w, _) in stream {
        if !nodes.contains(w) {
            nodes.push(w.clone());
        }
    }
    let id = |w: &str| nodes.iter().position(|n| n == w).unwrap();
    let mut edges = HashSet::new();
    for (i, (wi, pi)) in stream.iter().enumerate() {
        for (j, (wj, pj)) in stream.iter().enumerate() {
            if i == j || wi == wj {
                continue;
            }
            if pi.abs_diff(*pj) < window {
                let (a, b) = (id(wi), id(wj));
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    (nodes, edges)
}

/// Worst relative error between tape and finite-difference gradients of
/// `sum(f(inputs) * weights)` over every input, with fixed random weights
/// so that no output entry is ignored.
pub fn primitive_error(
    inputs: &[Tensor<f64>],
    weights_seed: u64,
    f: impl Fn(&mut Tape<f64>, &[gpoolnet::autodiff::Var]) -> Result<gpoolnet::autodiff::Var>,
) -> f64 {
    use rand::SeedableRng;
    let loss = |values: &[Tensor<f64>], tape: &mut Tape<f64>, params: bool| -> Result<(gpoolnet::autodiff::Var, Vec<gpoolnet::autodiff::Var>)> {
        let vars: Vec<_> = values
            .iter()
            .map(|t| if params { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(tape, &vars)?;
        let (r, c) = tape.value(out).shape();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(weights_seed);
        let w = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(0.5..1.5)).collect())?;
        let w = tape.constant(w);
        let weighted = tape.hadamard(out, w)?;
        Ok((tape.sum(weighted), vars))
    };

    let mut tape = Tape::new();
    let (l, vars) = loss(inputs, &mut tape, true).unwrap();
    tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v);
        let numeric = numeric_gradient(&inputs[k], 1e-6, |probe| {
            let mut vals = inputs.to_vec();
            vals[k] = probe.clone();
            let mut t = Tape::new();
            let (l, _) = loss(&vals, &mut t, false)?;
            Ok(t.value(l).get(0, 0))
        })
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Uniform matrix whose entries stay at least `gap` away from zero.
pub fn away_from_zero<R: Rng>(rng: &mut R, rows: usize, cols: usize, gap: f64) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
