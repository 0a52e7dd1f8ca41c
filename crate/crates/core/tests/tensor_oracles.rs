use mtnet::tensor::{Graph, Gradients, ParameterStore, RmsProp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fully_connected_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, w, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[2]));
    let mut oracle = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = b.data()[j];
            for k in 0..4 {
                acc += x.data()[i * 4 + k] * w.data()[k * 2 + j];
            }
            oracle[i * 2 + j] = acc;
        }
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.fully_connected(xv, wv, bv).unwrap();
    assert_eq!(g.shape(y), &[3, 2]);
    assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-12);
}

fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, dil: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, kh, kw] = w.shape().try_into().unwrap();
    let (ph, pw) = (dil * (kh - 1) / 2, dil * (kw - 1) / 2);
    let ho = (h + 2 * ph - dil * (kh - 1) - 1) / stride + 1;
    let wo = (wd + 2 * pw - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i * dil) as isize - ph as isize;
                                let xx = (ox * stride + j * dil) as isize - pw as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * ci + c) * h + y as usize) * wd + xx as usize];
                                acc += xv * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (vec![n, co, ho, wo], out)
}

#[test]
fn conv2d_dilated_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[1, 2, 6, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    let (shape, oracle) = conv2d_oracle(&x, &w, &b, 1, 2);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(xv, wv, bv, 1, 2).unwrap();
    assert_eq!(g.shape(y), shape.as_slice());
    assert_eq!(shape[2..], [6, 6]);
    assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-12);
}

#[test]
fn conv2d_strided_pointwise_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let w = random(&mut rng, &[5, 3, 1, 1]);
    let b = random(&mut rng, &[5]);
    let (shape, oracle) = conv2d_oracle(&x, &w, &b, 2, 1);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 5, 4, 4]);
    assert_eq!(shape, [2, 5, 4, 4]);
    assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-12);
}

#[test]
fn conv1d_dilated_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (ci, co, len, dil) = (3, 2, 16, 2);
    let x = random(&mut rng, &[2, ci, len]);
    let w = random(&mut rng, &[co, ci, 3]);
    let b = random(&mut rng, &[co]);
    let mut oracle = vec![0.0; 2 * co * len];
    for n in 0..2 {
        for o in 0..co {
            for t in 0..len {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for k in 0..3 {
                        let s = t as isize + (k as isize - 1) * dil as isize;
                        if s >= 0 && (s as usize) < len {
                            acc += x.data()[(n * ci + c) * len + s as usize] * w.data()[(o * ci + c) * 3 + k];
                        }
                    }
                }
                oracle[(n * co + o) * len + t] = acc;
            }
        }
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv1d(xv, wv, bv, dil).unwrap();
    assert_eq!(g.shape(y), &[2, co, len]);
    assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-12);
}

#[test]
fn global_avg_pool_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[2, 3, 4, 4]);
    let oracle: Vec<f64> = (0..6)
        .map(|p| {
            let mut s = 0.0;
            for k in 0..16 {
                s += x.data()[p * 16 + k];
            }
            s / 16.0
        })
        .collect();
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = g.global_avg_pool(xv).unwrap();
    assert_eq!(g.shape(y), &[2, 3]);
    assert!(max_abs_diff(g.value(y).data(), &oracle) < 1e-12);
}

#[test]
fn batch_norm_train_standardizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::from_fn(&[4, 3, 5, 5], |i| rng.random_range(-3.0..7.0) * (1 + i % 3) as f64);
    let mut g = Graph::new();
    let xv = g.input(x);
    let gamma = g.input(Tensor::full(&[3], 1.0));
    let beta = g.input(Tensor::zeros(&[3]));
    let y = g.batch_norm_train(xv, gamma, beta, "bn").unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
    let stats = g.take_batch_stats();
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].label, "bn");
}

#[test]
fn softmax_rows_sum_to_one_and_stay_inside_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_fn(&[20, 10], |_| rng.random_range(-50.0..50.0));
    let mut g = Graph::new();
    let xv = g.input(x);
    let p = g.softmax(xv);
    for row in g.value(p).data().chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0 && v <= 1.0));
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut g = Graph::new();
        let x = g.leaf(random(&mut rng, &[2, 3, 6, 6]));
        let w = g.leaf(random(&mut rng, &[4, 3, 3, 3]));
        let b = g.leaf(random(&mut rng, &[4]));
        let y = g.conv2d(x, w, b, 1, 2).unwrap();
        let y = g.tanh(y);
        let l = g.sum_squares(&[y]);
        g.backward(l).unwrap();
        (g.value(l).item().to_bits(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn rmsprop_zero_gradient_keeps_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParameterStore::<f64>::new();
    store.insert_truncated_normal("w", &[5, 5], 0.05, &mut rng).unwrap();
    let before = store.get("w").unwrap().clone();
    let mut grads = Gradients::new();
    grads.insert("w".to_string(), vec![0.0; 25]);
    RmsProp::default().step(&mut store, &grads).unwrap();
    assert_eq!(store.get("w").unwrap().data(), before.data());
    assert_eq!(store.step_count(), 1);
}
