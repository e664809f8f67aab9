mod common;

use std::sync::Arc;

use common::fd_max_rel_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajclust::numerics::{read_checkpoint, write_checkpoint, NumericsError, SparseRows, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Weighted sum so the root depends on every output entry differently.
fn weighted(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

fn for_seeds(mut check: impl FnMut(&mut ChaCha8Rng, usize, usize) -> f64, name: &str) {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let err = check(&mut rng, rows, cols);
        assert!(err <= TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let x = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 3]));
    let y = tape.softmax(x);
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let mut t = random(&mut rng, rows, cols);
        t.scale_in_place(20.0);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = tape.softmax(x);
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn sum_log_softmax_gradient_matches_finite_difference() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let err = fd_max_rel_error(&[x], STEP, |tape, v| {
        let s = tape.softmax(v[0]);
        let l = tape.log(s);
        tape.sum(l)
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
    let s = tape.sum(x);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let values = vec![1.0, -2.0, 0.25];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(values.clone()));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let grads = tape.backward(half).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), values.as_slice());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.tanh(x);
    assert!(matches!(tape.backward(y), Err(NumericsError::NonScalarRoot { .. })));
}

#[test]
fn untracked_tape_yields_no_gradients() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.sum(x);
    assert!(tape.backward(y).unwrap().is_empty());
}

#[test]
fn shape_errors_name_the_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    assert!(tape.concat(a, c).is_err());
    assert!(tape.sq_dist(a, c).is_err());
}

#[test]
fn gradient_matmul() {
    for_seeds(
        |rng, r, c| {
            let k = rng.random_range(1..=8);
            let a = random(rng, r, k);
            let b = random(rng, k, c);
            fd_max_rel_error(&[a, b], STEP, |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted(t, y, 1)
            })
        },
        "matmul",
    );
}

#[test]
fn gradient_add_sub_mul() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            let b = random(rng, r, c);
            fd_max_rel_error(&[a, b], STEP, |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let m = t.mul(d, v[1]).unwrap();
                let m = t.mul(m, s).unwrap();
                weighted(t, m, 2)
            })
        },
        "add/sub/mul",
    );
}

#[test]
fn gradient_broadcast_add() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            let b = random(rng, 1, c);
            fd_max_rel_error(&[a, b], STEP, |t, v| {
                let y = t.add_row(v[0], v[1]).unwrap();
                let y = t.tanh(y);
                weighted(t, y, 3)
            })
        },
        "broadcast-add",
    );
}

#[test]
fn gradient_elementwise_unary() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            fd_max_rel_error(&[a], STEP, |t, v| {
                let x = t.tanh(v[0]);
                let y = t.relu(v[0]);
                let z = t.exp(v[0]);
                let s = t.scale(x, 1.7);
                let s = t.add(s, y).unwrap();
                let s = t.add(s, z).unwrap();
                weighted(t, s, 4)
            })
        },
        "tanh/relu/exp/scale",
    );
    for_seeds(
        |rng, r, c| {
            let a = positive(rng, r, c);
            fd_max_rel_error(&[a], STEP, |t, v| {
                let l = t.log(v[0]);
                weighted(t, l, 5)
            })
        },
        "log",
    );
}

#[test]
fn gradient_softmax_and_log_softmax() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            fd_max_rel_error(&[a], STEP, |t, v| {
                let s = t.softmax(v[0]);
                let l = t.log_softmax(v[0]);
                let y = t.add(s, l).unwrap();
                weighted(t, y, 6)
            })
        },
        "softmax",
    );
}

#[test]
fn gradient_sum_and_mean() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            fd_max_rel_error(&[a], STEP, |t, v| {
                let sq = t.mul(v[0], v[0]).unwrap();
                let m = t.mean(sq);
                let s = t.sum(v[0]);
                let both = t.mul(m, s).unwrap();
                t.sum(both)
            })
        },
        "sum/mean",
    );
}

#[test]
fn gradient_squared_distance() {
    for_seeds(
        |rng, r, c| {
            let m = rng.random_range(1..=8);
            let a = random(rng, r, c);
            let b = random(rng, m, c);
            fd_max_rel_error(&[a, b], STEP, |t, v| {
                let d = t.sq_dist(v[0], v[1]).unwrap();
                weighted(t, d, 7)
            })
        },
        "squared-distance",
    );
    // Self-distances share one operand.
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            fd_max_rel_error(&[a], STEP, |t, v| {
                let d = t.sq_dist(v[0], v[0]).unwrap();
                weighted(t, d, 8)
            })
        },
        "squared-distance (self)",
    );
}

#[test]
fn gradient_concat() {
    for_seeds(
        |rng, r, c| {
            let k = rng.random_range(1..=8);
            let a = random(rng, r, c);
            let b = random(rng, r, k);
            fd_max_rel_error(&[a, b], STEP, |t, v| {
                let y = t.concat(v[0], v[1]).unwrap();
                let y = t.tanh(y);
                weighted(t, y, 9)
            })
        },
        "concat",
    );
}

#[test]
fn gradient_row_min_and_clamp() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            fd_max_rel_error(&[a], STEP, |t, v| {
                let m = t.row_min(v[0]);
                let clamped = t.clamp_max(v[0], 0.3);
                let s1 = weighted(t, m, 10);
                let s2 = weighted(t, clamped, 11);
                t.add(s1, s2).unwrap()
            })
        },
        "row_min/clamp_max",
    );
}

#[test]
fn gradient_pick_gather_sparse() {
    for_seeds(
        |rng, r, c| {
            let a = random(rng, r, c);
            let index: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let gather: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..r)).collect();
            let width = rng.random_range(1..=8);
            let w = random(rng, width, c);
            let sparse = SparseRows {
                width,
                rows: (0..rng.random_range(1..=8))
                    .map(|_| {
                        (0..rng.random_range(0..4))
                            .map(|_| rng.random_range(0..width as u32))
                            .collect()
                    })
                    .collect(),
            };
            let (index, gather, sparse) = (Arc::new(index), Arc::new(gather), Arc::new(sparse));
            fd_max_rel_error(&[a, w], STEP, move |t, v| {
                let p = t.pick(v[0], index.clone()).unwrap();
                let g = t.gather_rows(v[0], gather.clone()).unwrap();
                let s = t.sparse_matmul(sparse.clone(), v[1]).unwrap();
                let s = t.tanh(s);
                let a = weighted(t, p, 12);
                let b = weighted(t, g, 13);
                let c = weighted(t, s, 14);
                let ab = t.add(a, b).unwrap();
                t.add(ab, c).unwrap()
            })
        },
        "pick/gather/sparse",
    );
}

#[test]
fn gradient_segment_pooling() {
    for_seeds(
        |rng, r, c| {
            let scores = random(rng, r, 1);
            let values = random(rng, r, c);
            let mut segments = Vec::new();
            let mut start = 0;
            while start < r {
                let end = (start + rng.random_range(1..=3)).min(r);
                segments.push(start..end);
                start = end;
            }
            let segments = Arc::new(segments);
            fd_max_rel_error(&[scores, values], STEP, move |t, v| {
                let w = t.segment_softmax(v[0], segments.clone()).unwrap();
                let pooled = t.segment_weighted_sum(w, v[1], segments.clone()).unwrap();
                weighted(t, pooled, 15)
            })
        },
        "segment pooling",
    );
}

#[test]
fn segment_softmax_single_row_is_one() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::matrix(3, 1, vec![0.3, -2.0, 5.0]).unwrap());
    let w = tape.segment_softmax(s, Arc::new(vec![0..1, 1..3])).unwrap();
    let out = tape.value(w).data();
    assert_eq!(out[0], 1.0);
    assert!((out[1] + out[2] - 1.0).abs() < 1e-15);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.tjck");
    let records = vec![("a".to_string(), Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())];
    write_checkpoint(std::fs::File::create(&path).unwrap(), &records).unwrap();
    let back = read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, records);
}
