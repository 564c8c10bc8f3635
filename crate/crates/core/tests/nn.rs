use defectkan::nn::{
    conv2d_forward, linear_forward, maxpool2_backward, maxpool2_forward, softmax_cross_entropy_forward,
    softmax_rows,
};
use defectkan::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn naive_maxpool(x: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let at = |b, ch, i, j| x.data()[((b * c + ch) * h + i) * w + j];
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for i in (0..h).step_by(2) {
                for j in (0..w).step_by(2) {
                    let m = [at(b, ch, i, j), at(b, ch, i, j + 1), at(b, ch, i + 1, j), at(b, ch, i + 1, j + 1)];
                    out.push(m.into_iter().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
    }
    out
}

/// Zero-padded cross-correlation written as a direct sum.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = w.shape()[0];
    let mut out = Vec::new();
    for bi in 0..n {
        for o in 0..co {
            for i in 0..h as isize {
                for j in 0..wd as isize {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for di in -1..=1isize {
                            for dj in -1..=1isize {
                                let (y, xx) = (i + di, j + dj);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * ci + c) * h + y as usize) * wd + xx as usize];
                                let wv = w.data()[((o * ci + c) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize];
                                s += xv * wv;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn maxpool_matches_naive_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = random(&[2, 3, 8, 8], &mut r);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert_eq!(y.data(), naive_maxpool(&x).as_slice());
    }
}

#[test]
fn conv_matches_naive_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x = random(&[2, 3, 5, 6], &mut r);
        let w = random(&[4, 3, 3, 3], &mut r);
        let b = random(&[4], &mut r);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 6]);
        for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_matches_naive_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 7], &mut r);
    let w = random(&[3, 7], &mut r);
    let b = random(&[3], &mut r);
    let y = linear_forward(&x, &w, &b).unwrap();
    for n in 0..5 {
        for o in 0..3 {
            let e: f64 = b.data()[o] + (0..7).map(|i| x.data()[n * 7 + i] * w.data()[o * 7 + i]).sum::<f64>();
            assert!((y.data()[n * 3 + o] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn pool_gradient_goes_to_first_maximum() {
    let x = Tensor::full(&[1, 1, 2, 2], 0.5);
    let (_, arg) = maxpool2_forward(&x).unwrap();
    let g = maxpool2_backward(x.shape(), &arg, &Tensor::ones(&[1, 1, 1, 1]));
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
}

fn upsample(y: &Tensor) -> Tensor {
    let [n, c, h, w] = [y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]];
    Tensor::from_fn(&[n, c, 2 * h, 2 * w], |idx| {
        let j = idx % (2 * w);
        let i = (idx / (2 * w)) % (2 * h);
        let nc = idx / (4 * h * w);
        y.data()[(nc * h + i / 2) * w + j / 2]
    })
}

proptest! {
    #[test]
    fn delta_kernel_is_identity(n in 1usize..3, c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut r);
        let k = Tensor::from_fn(&[c, c, 3, 3], |i| {
            let (o, ic, pos) = (i / (c * 9), (i / 9) % c, i % 9);
            if o == ic && pos == 4 { 1.0 } else { 0.0 }
        });
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[c])).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[rows, cols], |_| r.random_range(-50.0..50.0));
        let p = softmax_rows(&logits).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let labels = vec![0; rows];
        let (loss, _) = softmax_cross_entropy_forward(&logits, &labels).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn maxpool_undoes_upsampling(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y = random(&[n, c, h, w], &mut r);
        let (back, _) = maxpool2_forward(&upsample(&y)).unwrap();
        prop_assert_eq!(back, y);
    }
}
