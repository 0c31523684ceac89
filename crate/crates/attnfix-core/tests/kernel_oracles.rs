//! Brute-force loop oracles and numeric properties for the tensor kernel.

use attnfix_core::rng::Rng;
use attnfix_core::tape::Tape;
use attnfix_core::tensor::Tensor;
use proptest::prelude::*;

/// Element-by-element triple-loop matrix product.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// Direct 6-nested-loop convolution (3x3, pad 1, stride 1).
fn conv2d_oracle(
    x: &[f64],
    k: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for ci in 0..c_in {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[co * h * w + y as usize * w + xx as usize] += k
                                [((co * c_in + ci) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize]
                                * x[ci * h * w + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_normal()).collect()
}

#[test]
fn matmul_identity() {
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut t = Tape::new();
    let a = t.leaf(&eye);
    let b = t.leaf(&m);
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_permutation() {
    let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut t = Tape::new();
    let a = t.leaf(&m);
    let b = t.leaf(&p);
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.data(c), &[2.0, 1.0, 4.0, 3.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::seed_from_u64(42);
    let a = rand_vec(&mut rng, 12);
    let b = rand_vec(&mut rng, 8);
    let expected = matmul_oracle(&a, &b, 3, 4, 2);
    let mut t = Tape::new();
    let av = t.constant(&[3, 4], a);
    let bv = t.constant(&[4, 2], b);
    let c = t.matmul(av, bv).unwrap();
    for (got, want) in t.data(c).iter().zip(&expected) {
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]);
    let b = t.constant(&[4, 2], vec![0.0; 8]);
    let err = t.matmul(a, b).unwrap_err();
    let msg = format!("{err}");
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn conv2d_zero_kernel_zero_output() {
    let mut rng = Rng::seed_from_u64(1);
    let x = rand_vec(&mut rng, 64);
    let mut t = Tape::new();
    let xv = t.constant(&[1, 8, 8], x);
    let kv = t.constant(&[2, 1, 3, 3], vec![0.0; 18]);
    let y = t.conv2d(xv, kv).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_centered_delta_is_channel_sum() {
    let mut rng = Rng::seed_from_u64(2);
    let x = rand_vec(&mut rng, 2 * 36);
    // one kernel, delta at center of each input channel
    let mut k = vec![0.0; 2 * 9];
    k[4] = 1.0;
    k[13] = 1.0;
    let mut t = Tape::new();
    let xv = t.constant(&[2, 6, 6], x.clone());
    let kv = t.constant(&[1, 2, 3, 3], k);
    let y = t.conv2d(xv, kv).unwrap();
    for i in 0..36 {
        assert!((t.data(y)[i] - (x[i] + x[36 + i])).abs() <= 1e-15);
    }
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = Rng::seed_from_u64(3);
    let x = rand_vec(&mut rng, 64);
    let k = rand_vec(&mut rng, 2 * 9);
    let expected = conv2d_oracle(&x, &k, 1, 2, 8, 8);
    let mut t = Tape::new();
    let xv = t.constant(&[1, 8, 8], x);
    let kv = t.constant(&[2, 1, 3, 3], k);
    let y = t.conv2d(xv, kv).unwrap();
    for (got, want) in t.data(y).iter().zip(&expected) {
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn conv2d_channel_mismatch_is_error() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 4, 4], vec![0.0; 32]);
    let k = t.constant(&[1, 3, 3, 3], vec![0.0; 27]);
    assert!(t.conv2d(x, k).is_err());
}

#[test]
fn softmax_symmetry_and_analytic_cases() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![0.0, 0.0]);
    let y = t.softmax_rows(x).unwrap();
    assert!((t.data(y)[0] - 0.5).abs() < 1e-15);

    let x = t.constant(&[2], vec![2.0f64.ln(), 0.0]);
    let y = t.softmax_rows(x).unwrap();
    assert!((t.data(y)[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((t.data(y)[1] - 1.0 / 3.0).abs() < 1e-12);

    // max-subtraction keeps huge logits finite
    let x = t.constant(&[2], vec![1000.0, 1000.0]);
    let y = t.softmax_rows(x).unwrap();
    assert!((t.data(y)[0] - 0.5).abs() < 1e-15);
}

#[test]
fn softmax_rejects_nan() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![f64::NAN, 0.0]);
    assert!(t.softmax_rows(x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.next_normal() * 10.0).collect();
        let mut t = Tape::new();
        let x = t.constant(&[rows, cols], data);
        let y = t.softmax_rows(x).unwrap();
        for r in 0..rows {
            let s: f64 = t.data(y)[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(t.data(y)[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn random_matmul_matches_oracle(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 8);
        let expected = matmul_oracle(&a, &b, 3, 4, 2);
        let mut t = Tape::new();
        let av = t.constant(&[3, 4], a);
        let bv = t.constant(&[4, 2], b);
        let c = t.matmul(av, bv).unwrap();
        for (got, want) in t.data(c).iter().zip(&expected) {
            prop_assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn fixed_op_sequence_is_deterministic(seed in any::<u64>()) {
        let run = |seed: u64| -> Vec<f64> {
            let mut rng = Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
            let mut t = Tape::new();
            let av = t.leaf(&a);
            let sm = t.softmax_rows(av).unwrap();
            let prod = t.matmul(sm, av).unwrap();
            t.data(prod).to_vec()
        };
        prop_assert_eq!(run(seed), run(seed));
    }
}
