mod common;

use common::{brute_gpool, flat, random_adjacency, random_matrix};
use gpoolnet::autodiff::Tape;
use gpoolnet::graph::Adjacency;
use gpoolnet::layers::{gpool_forward, pooled_size};
use gpoolnet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run_layer(
    a: &[Vec<f64>],
    x: &[Vec<f64>],
    p: &[f64],
    k: usize,
    gate: bool,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = x.len();
    let c = p.len();
    let mut tape = Tape::new();
    let xv = tape.param(Tensor::from_vec(n, c, flat(x)).unwrap());
    let pv = tape.param(Tensor::column_vector(p.to_vec()));
    let adj = Adjacency::from_rows(a).unwrap();
    let out = gpool_forward(&mut tape, &adj, xv, pv, k, &vec![true; n], gate).unwrap();
    (
        out.idx,
        out.adjacency.as_slice().to_vec(),
        tape.value(out.features).as_slice().to_vec(),
    )
}

#[test]
fn matches_brute_force_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let c = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=n);
        let a = random_adjacency(&mut rng, n, 0.4);
        let x = random_matrix(&mut rng, n, c);
        let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (idx, adj, feat) = run_layer(&a, &x, &p, k, true);
        let want = brute_gpool(&a, &x, &p, k, true);
        assert_eq!(idx, want.idx);
        assert_eq!(adj, flat(&want.adjacency));
        assert_eq!(feat, flat(&want.features));
    }
}

#[test]
fn ties_prefer_earlier_nodes() {
    let x = vec![vec![1.0], vec![-2.0], vec![2.0], vec![2.0]];
    let a = vec![vec![0.0; 4]; 4];
    let (idx, _, _) = run_layer(&a, &x, &[1.0], 2, true);
    assert_eq!(idx, vec![1, 2]);
    let (idx, _, feat) = run_layer(&a, &x, &[0.0], 3, true);
    assert_eq!(idx, vec![0, 1, 2]);
    assert!(feat.iter().all(|&v| v == 0.0));
}

#[test]
fn ungated_pooling_is_a_plain_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(2..=10);
        let c = rng.gen_range(1..=4);
        let a = random_adjacency(&mut rng, n, 0.5);
        let x = random_matrix(&mut rng, n, c);
        let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = pooled_size(n);
        let (idx, _, feat) = run_layer(&a, &x, &p, k, false);
        let rows: Vec<f64> = idx.iter().flat_map(|&i| x[i].clone()).collect();
        assert_eq!(feat, rows);
        assert_eq!(idx, brute_gpool(&a, &x, &p, k, false).idx);
    }
}

#[test]
fn padding_rows_are_never_selected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_rows(&[vec![1.0], vec![9.0], vec![2.0]]).unwrap());
    let p = tape.param(Tensor::column_vector(vec![1.0]));
    let adj = Adjacency::zeros(3);
    let out = gpool_forward(&mut tape, &adj, x, p, 2, &[true, false, true], true).unwrap();
    assert_eq!(out.idx, vec![0, 2]);
    assert!(gpool_forward(&mut tape, &adj, x, p, 3, &[true, false, true], true).is_err());
}

proptest! {
    #[test]
    fn indices_ascend_and_form_a_subsequence(
        n in 1usize..16,
        c in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=n);
        let a = random_adjacency(&mut rng, n, 0.3);
        let x = random_matrix(&mut rng, n, c);
        let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (idx, adj, _) = run_layer(&a, &x, &p, k, true);
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        // The induced adjacency stays symmetric.
        for r in 0..k {
            for s in 0..k {
                prop_assert_eq!(adj[r * k + s], adj[s * k + r]);
            }
        }
    }
}
