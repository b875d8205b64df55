mod common;

use common::{away_from_zero, primitive_error, random_tensor};
use gpoolnet::gradcheck::{check_model, jitter, model_gradients, DEFAULT_STEP};
use gpoolnet::model::build;
use gpoolnet::synthetic::random_graph;
use gpoolnet::{Arch, ModelParams, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul() {
    let mut r = rng(1);
    let inputs = [random_tensor(&mut r, 3, 4), random_tensor(&mut r, 4, 2)];
    let err = primitive_error(&inputs, 9, |t, v| t.matmul(v[0], v[1]));
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

#[test]
fn add_row() {
    let mut r = rng(2);
    let inputs = [random_tensor(&mut r, 4, 3), random_tensor(&mut r, 1, 3)];
    let err = primitive_error(&inputs, 9, |t, v| t.add_row(v[0], v[1]));
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

#[test]
fn hadamard_and_sum() {
    let mut r = rng(3);
    let inputs = [random_tensor(&mut r, 3, 3), random_tensor(&mut r, 3, 3)];
    let err = primitive_error(&inputs, 9, |t, v| {
        let h = t.hadamard(v[0], v[1])?;
        Ok(t.sum(h))
    });
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

#[test]
fn conv1d_same() {
    let mut r = rng(4);
    for width in [1, 3, 5] {
        let (n, c_in, c_out) = (5, 3, 2);
        let inputs = [
            random_tensor(&mut r, n, c_in),
            random_tensor(&mut r, width * c_in, c_out),
            random_tensor(&mut r, 1, c_out),
        ];
        let err = primitive_error(&inputs, 9, |t, v| t.conv1d_same(v[0], v[1], v[2], width));
        assert!(err <= PRIMITIVE_TOL, "width {width}: {err}");
    }
}

#[test]
fn abs_tanh_relu_away_from_kinks() {
    let mut r = rng(5);
    let x = [away_from_zero(&mut r, 4, 3, 0.05)];
    let e_abs = primitive_error(&x, 9, |t, v| Ok(t.abs(v[0])));
    let e_tanh = primitive_error(&x, 9, |t, v| Ok(t.tanh(v[0])));
    let e_relu = primitive_error(&x, 9, |t, v| Ok(t.relu(v[0])));
    for (name, e) in [("abs", e_abs), ("tanh", e_tanh), ("relu", e_relu)] {
        assert!(e <= PRIMITIVE_TOL, "{name}: {e}");
    }
}

#[test]
fn concat_gather_rowwise_scale() {
    let mut r = rng(6);
    let inputs = [
        random_tensor(&mut r, 4, 2),
        random_tensor(&mut r, 4, 3),
        random_tensor(&mut r, 2, 1),
    ];
    let err = primitive_error(&inputs, 9, |t, v| {
        let both = t.concat_cols(v[0], v[1])?;
        let rows = t.gather_rows(both, &[1, 3])?;
        t.rowwise_scale(rows, v[2])
    });
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

#[test]
fn masked_max_pool_with_distinct_values() {
    // Values on a shuffled grid: no ties, so the max is differentiable.
    let mut r = rng(7);
    let mut vals: Vec<f64> = (0..15).map(|i| i as f64 * 0.1 - 0.7).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    let x = [Tensor::from_vec(5, 3, vals).unwrap()];
    let err = primitive_error(&x, 9, |t, v| {
        t.masked_global_max_pool(v[0], &[true, false, true, true, false])
    });
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

#[test]
fn softmax_cross_entropy() {
    let mut r = rng(8);
    let x = [random_tensor(&mut r, 3, 4)];
    let err = primitive_error(&x, 9, |t, v| t.softmax_cross_entropy(v[0], &[2, 0, 3]));
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

#[test]
fn dropout_with_fixed_mask() {
    let mut r = rng(9);
    let x = [random_tensor(&mut r, 4, 4)];
    let err = primitive_error(&x, 9, |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
        t.dropout(v[0], 0.55, &mut mask_rng, true)
    });
    assert!(err <= PRIMITIVE_TOL, "{err}");
}

fn tiny_spec(arch: Arch) -> ModelSpec {
    ModelSpec::new(arch, 6, 3).with_channels(&[4, 4, 2, 2])
}

#[test]
fn end_to_end_all_architectures() {
    for arch in Arch::ALL {
        for seed in 0..3u64 {
            let spec = tiny_spec(arch);
            let mut params: ModelParams<f64> = build(&spec, seed).unwrap();
            jitter(&mut params, 0.1, seed);
            let mut r = rng(100 + seed);
            let n = r.gen_range(3..=7);
            let graph = random_graph(&mut r, n, 6, (seed % 3) as usize, 0.5).unwrap();
            let reports = check_model(&params, &spec, &graph, DEFAULT_STEP, MODEL_TOL).unwrap();
            for rep in &reports {
                assert!(rep.passed, "{arch} seed {seed}: {rep:?}");
                assert!(!rep.expected_zero);
            }
        }
    }
}

#[test]
fn ungated_projection_has_exactly_zero_gradient() {
    for arch in [Arch::GcnGpoolNet, Arch::HconvGpoolNet] {
        let mut spec = tiny_spec(arch);
        spec.gpool_gate = false;
        let mut params: ModelParams<f64> = build(&spec, 4).unwrap();
        jitter(&mut params, 0.1, 4);
        let graph = random_graph(&mut rng(4), 6, 6, 1, 0.5).unwrap();
        let reports = check_model(&params, &spec, &graph, DEFAULT_STEP, MODEL_TOL).unwrap();
        let pools: Vec<_> = reports.iter().filter(|r| r.group.starts_with("pool")).collect();
        assert_eq!(pools.len(), 2);
        for r in pools {
            assert!(r.expected_zero && r.passed && r.grad_norm == 0.0, "{r:?}");
        }
    }
}

/// Counts of random instances where every projection vector gets a nonzero
/// gradient, and where every one gets an exactly zero gradient.
fn projection_gradient_rate(arch: Arch, gate: bool, instances: u64) -> (usize, usize) {
    let mut spec = ModelSpec::new(arch, 6, 3).with_channels(&[16, 16, 8, 8]);
    spec.gpool_gate = gate;
    let (mut nonzero, mut exactly_zero) = (0, 0);
    for seed in 0..instances {
        let mut params: ModelParams<f64> = build(&spec, seed).unwrap();
        jitter(&mut params, 0.1, seed);
        let mut r = rng(seed);
        let n = r.gen_range(4..=12);
        let graph = random_graph(&mut r, n, 6, (seed % 3) as usize, 0.5).unwrap();
        let grads = model_gradients(&params, &spec, &graph).unwrap();
        let norms: Vec<f64> = params
            .iter()
            .zip(&grads)
            .filter(|(p, _)| p.name.ends_with(".projection"))
            .map(|(_, g)| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .collect();
        if norms.iter().all(|&v| v > 0.0) {
            nonzero += 1;
        }
        if norms.iter().all(|&v| v == 0.0) {
            exactly_zero += 1;
        }
    }
    (nonzero, exactly_zero)
}

#[test]
fn gate_gives_projection_gradient() {
    for arch in [Arch::GcnGpoolNet, Arch::HconvGpoolNet] {
        let (nonzero, _) = projection_gradient_rate(arch, true, 100);
        assert!(nonzero >= 95, "{arch}: {nonzero}/100");
        let (_, zero) = projection_gradient_rate(arch, false, 100);
        assert_eq!(zero, 100, "{arch}");
    }
}

#[test]
fn gate_gradient_at_layer_level() {
    use gpoolnet::autodiff::Tape;
    use gpoolnet::graph::Adjacency;
    use gpoolnet::layers::{gpool_forward, pooled_size};
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let n = r.gen_range(2..=12);
        let c = r.gen_range(1..=6);
        for gate in [true, false] {
            let mut tape = Tape::new();
            let x = tape.param(random_tensor(&mut r, n, c));
            let p = tape.param(random_tensor(&mut r, c, 1));
            let out =
                gpool_forward(&mut tape, &Adjacency::zeros(n), x, p, pooled_size(n), &vec![true; n], gate)
                    .unwrap();
            let (k, _) = tape.value(out.features).shape();
            let w = tape.constant(random_tensor(&mut r, k, c));
            let weighted = tape.hadamard(out.features, w).unwrap();
            let loss = tape.sum(weighted);
            tape.backward(loss).unwrap();
            let norm: f64 = tape.grad(p).as_slice().iter().map(|v| v * v).sum();
            if gate {
                assert!(norm > 0.0, "seed {seed}");
            } else {
                assert_eq!(norm, 0.0);
            }
        }
    }
}
