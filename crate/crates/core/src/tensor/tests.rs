use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn approx(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn softmax_symmetry_and_forced_values() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![0.0, 0.0, 0.0], &[3]).unwrap();
    let s = t.softmax(x, 0).unwrap();
    approx(t.data(s), &[1.0 / 3.0; 3], 1e-12);

    let x = t.constant(vec![0.0, 2.0f64.ln()], &[2]).unwrap();
    let s = t.softmax(x, 0).unwrap();
    approx(t.data(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);

    // max-subtraction keeps huge logits finite
    let x = t.constant(vec![1000.0, 0.0], &[2]).unwrap();
    let s = t.softmax(x, 0).unwrap();
    assert!(t.is_finite(s));
    assert!(t.data(s)[0] > 1.0 - 1e-12);
    assert!(t.data(s)[1] < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut t: Tape<f64> = Tape::new();
    let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let x = t.constant(data, &[4, 6]).unwrap();
    let s = t.softmax(x, 1).unwrap();
    for r in 0..4 {
        let row = &t.data(s)[r * 6..(r + 1) * 6];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn layer_norm_constant_slice_is_zero() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![1.0, 1.0, 1.0], &[3]).unwrap();
    let g = t.constant(vec![1.0; 3], &[3]).unwrap();
    let b = t.constant(vec![0.0; 3], &[3]).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    approx(t.data(y), &[0.0; 3], 1e-2);

    // already zero-mean unit-variance input passes through
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![-1.0, 1.0], &[2]).unwrap();
    let g = t.constant(vec![1.0; 2], &[2]).unwrap();
    let b = t.constant(vec![0.0; 2], &[2]).unwrap();
    let y = t.layer_norm(x, g, b, 0.0).unwrap();
    approx(t.data(y), &[-1.0, 1.0], 1e-12);
}

#[test]
fn backward_sum_of_squares() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1.0, -2.0, 3.0], &[3], true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq).unwrap();
    t.backward(loss).unwrap();
    approx(t.grad(x).unwrap(), &[2.0, -4.0, 6.0], 1e-12);
}

#[test]
fn backward_through_softmax_sum_is_zero() {
    // sum(softmax(x)) == 1 identically, so the gradient vanishes
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![0.3, -1.2, 2.0], &[3], true).unwrap();
    let s = t.softmax(x, 0).unwrap();
    let loss = t.sum_all(s).unwrap();
    t.backward(loss).unwrap();
    approx(t.grad(x).unwrap(), &[0.0; 3], 1e-12);
}

#[test]
fn backward_twice_is_an_error() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1.0], &[1], true).unwrap();
    let loss = t.mul(x, x).unwrap();
    t.backward(loss).unwrap();
    assert!(matches!(t.backward(loss), Err(Error::Usage(_))));
}

#[test]
fn backward_requires_scalar_and_tracked_loss() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    assert!(matches!(t.backward(x), Err(Error::Usage(_))));

    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![1.0], &[1]).unwrap();
    let loss = t.mul(x, x).unwrap();
    assert!(matches!(t.backward(loss), Err(Error::Usage(_))));
}

#[test]
fn conv2d_identity_and_average() {
    // 1x1 kernel of value 1 is the identity map
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant((0..9).map(|v| v as f64).collect(), &[1, 3, 3]).unwrap();
    let k = t.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let y = t.conv2d(x, k, None, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3]);
    approx(t.data(y), t.data(x), 1e-12);

    // 3x3 averaging kernel keeps a constant image constant in the interior
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![2.5; 25], &[1, 5, 5]).unwrap();
    let k = t.constant(vec![1.0 / 9.0; 9], &[1, 1, 3, 3]).unwrap();
    let y = t.conv2d(x, k, None, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 5, 5]);
    for iy in 1..4 {
        for ix in 1..4 {
            assert!((t.data(y)[iy * 5 + ix] - 2.5).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let (cin, h, w, cout, k, pad) = (2usize, 5usize, 5usize, 3usize, 3usize, 1usize);
    let x: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ker: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut t: Tape<f64> = Tape::new();
    let xt = t.constant(x.clone(), &[cin, h, w]).unwrap();
    let kt = t.constant(ker.clone(), &[cout, cin, k, k]).unwrap();
    let bt = t.constant(bias.clone(), &[cout]).unwrap();
    let y = t.conv2d(xt, kt, Some(bt), pad).unwrap();

    // direct six-nested-loop oracle
    let mut expect = vec![0.0f64; cout * h * w];
    for co in 0..cout {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize]
                                * ker[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                expect[(co * h + oy) * w + ox] = acc;
            }
        }
    }
    approx(t.data(y), &expect, 1e-12);
}

#[test]
fn upsample_constant_and_single_pixel() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![3.25; 6], &[1, 2, 3]).unwrap();
    let y = t.bilinear_upsample_2x(x).unwrap();
    assert_eq!(t.shape(y), &[1, 4, 6]);
    approx(t.data(y), &vec![3.25; 24], 1e-12);

    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(vec![7.0], &[1, 1, 1]).unwrap();
    let y = t.bilinear_upsample_2x(x).unwrap();
    approx(t.data(y), &[7.0; 4], 1e-12);
}

#[test]
fn upsample_matches_half_pixel_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut t: Tape<f64> = Tape::new();
    let xt = t.constant(x.clone(), &[1, 2, 2]).unwrap();
    let y = t.bilinear_upsample_2x(xt).unwrap();

    // independent evaluation of the half-pixel interpolation formula
    let sample = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(1);
        (i0, i1, s - s.floor())
    };
    let mut expect = vec![0.0f64; 16];
    for oy in 0..4 {
        let (y0, y1, fy) = sample(oy);
        for ox in 0..4 {
            let (x0, x1, fx) = sample(ox);
            expect[oy * 4 + ox] = x[y0 * 2 + x0] * (1.0 - fy) * (1.0 - fx)
                + x[y0 * 2 + x1] * (1.0 - fy) * fx
                + x[y1 * 2 + x0] * fy * (1.0 - fx)
                + x[y1 * 2 + x1] * fy * fx;
        }
    }
    approx(t.data(y), &expect, 1e-12);
}

#[test]
fn broadcast_mul_channel_vector() {
    // [T, C] * [1, C] is the channel-broadcast multiply the dispersion uses
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], true).unwrap();
    let w = t.leaf(vec![10.0, 100.0], &[1, 2], true).unwrap();
    let y = t.mul(x, w).unwrap();
    approx(t.data(y), &[10.0, 200.0, 30.0, 400.0, 50.0, 600.0], 1e-12);
    let loss = t.sum_all(y).unwrap();
    t.backward(loss).unwrap();
    approx(t.grad(w).unwrap(), &[1.0 + 3.0 + 5.0, 2.0 + 4.0 + 6.0], 1e-12);
    approx(t.grad(x).unwrap(), &[10.0, 100.0, 10.0, 100.0, 10.0, 100.0], 1e-12);
}

#[test]
fn narrow_concat_round_trip_gradients() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf((0..12).map(|v| v as f64).collect(), &[3, 4], true).unwrap();
    let left = t.narrow(x, 1, 0, 2).unwrap();
    let right = t.narrow(x, 1, 2, 2).unwrap();
    let back = t.concat(&[left, right], 1).unwrap();
    approx(t.data(back), t.data(x), 1e-12);
    let w = t.constant((0..12).map(|v| (v as f64) * 0.5).collect(), &[3, 4]).unwrap();
    let prod = t.mul(back, w).unwrap();
    let loss = t.sum_all(prod).unwrap();
    t.backward(loss).unwrap();
    approx(t.grad(x).unwrap(), t.data(w), 1e-12);
}

#[test]
fn finite_difference_spot_checks() {
    // composite graph: y = mean(gelu(x W) + sigmoid(x)) exercised per element
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |x: &[f64], w: &[f64]| -> f64 {
        let mut t: Tape<f64> = Tape::new();
        let xt = t.leaf(x.to_vec(), &[2, 3], true).unwrap();
        let wt = t.leaf(w.to_vec(), &[3, 3], true).unwrap();
        let h = t.matmul(xt, wt).unwrap();
        let h = t.gelu(h).unwrap();
        let s = t.sigmoid(xt).unwrap();
        let hs = t.concat(&[h, s], 1).unwrap();
        let loss = t.mean_all(hs).unwrap();
        t.value(loss)
    };

    let mut t: Tape<f64> = Tape::new();
    let xt = t.leaf(x0.clone(), &[2, 3], true).unwrap();
    let wt = t.leaf(w0.clone(), &[3, 3], true).unwrap();
    let h = t.matmul(xt, wt).unwrap();
    let h = t.gelu(h).unwrap();
    let s = t.sigmoid(xt).unwrap();
    let hs = t.concat(&[h, s], 1).unwrap();
    let loss = t.mean_all(hs).unwrap();
    t.backward(loss).unwrap();

    let h_step = 1e-5;
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        xp[i] += h_step;
        let mut xm = x0.clone();
        xm[i] -= h_step;
        let fd = (eval(&xp, &w0) - eval(&xm, &w0)) / (2.0 * h_step);
        let an = t.grad(xt).unwrap()[i];
        assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-6, "x[{i}]: {an} vs {fd}");
    }
    for i in 0..w0.len() {
        let mut wp = w0.clone();
        wp[i] += h_step;
        let mut wm = w0.clone();
        wm[i] -= h_step;
        let fd = (eval(&x0, &wp) - eval(&x0, &wm)) / (2.0 * h_step);
        let an = t.grad(wt).unwrap()[i];
        assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-6, "w[{i}]: {an} vs {fd}");
    }
}

#[test]
fn batch_norm_train_normalizes_per_channel() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (n, c, h, w) = (2usize, 3usize, 2usize, 2usize);
    let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(data, &[n, c, h, w]).unwrap();
    let g = t.constant(vec![1.0; c], &[c]).unwrap();
    let b = t.constant(vec![0.0; c], &[c]).unwrap();
    let (y, mean, var) = t.batch_norm(x, g, b, 1e-5, BatchNormMode::Batch).unwrap();
    assert_eq!(mean.len(), c);
    assert_eq!(var.len(), c);
    // per-channel output mean ~0, var ~1
    for ci in 0..c {
        let mut vals = Vec::new();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            vals.extend_from_slice(&t.data(y)[base..base + h * w]);
        }
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn non_finite_loss_is_rejected() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.leaf(vec![0.0], &[1], true).unwrap();
    let y = t.ln(x).unwrap(); // -inf
    let loss = t.sum_all(y).unwrap();
    assert!(matches!(t.backward(loss), Err(Error::NonFinite { .. })));
}

#[test]
fn shape_errors_are_reported() {
    let mut t: Tape<f64> = Tape::new();
    let a = t.constant(vec![1.0, 2.0], &[2]).unwrap();
    let b = t.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
    let m = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
    assert!(matches!(t.matmul(m, m), Err(Error::Shape { .. })));
}
