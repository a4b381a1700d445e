use fan_tensor::gradcheck::{self, check};
use fan_tensor::{ops, BnMode, Graph, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn matmul_examples() {
    let id = t(&[2, 2], &[1., 0., 0., 1.]);
    let b = t(&[2, 2], &[3., 4., 5., 6.]);
    assert_eq!(ops::matmul(&id, &b).unwrap(), b);
    let y = ops::matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
    assert_eq!(y.data(), &[11.]);
    let err = ops::matmul(&t(&[1, 2], &[1., 2.]), &t(&[3, 1], &[1., 1., 1.])).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng();
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
    let err = check(&|g, v| g.matmul(v[0], v[1]), &[a, b], &mut r).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn conv2d_examples() {
    let y = ops::conv2d(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::full(&[1, 1, 1, 1], 2.0), 1, 0).unwrap();
    assert_eq!(y, Tensor::full(&[1, 1, 3, 3], 2.0));
    let y = ops::conv2d(&Tensor::zeros(&[1, 1, 28, 28]), &Tensor::zeros(&[20, 1, 5, 5]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 20, 24, 24]);
    let bad = ops::conv2d(&Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1, 1, 5, 5]), 1, 0);
    assert!(matches!(bad, Err(TensorError::Shape { .. })));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng();
    let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let err = check(&|g, v| g.conv2d(v[0], v[1], None, 1, 0), &[x, w], &mut r).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn conv_transpose_single_pixel_copies_kernel() {
    let w = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let y = ops::conv2d_transpose(&t(&[1, 1, 1, 1], &[2.]), &w, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data(), &[2., 4., 6., 8., 10., 12., 14., 16., 18.]);
}

#[test]
fn conv_transpose_is_conv_input_gradient() {
    // Forward of the transposed conv must equal d/dx of <conv2d(x, w), y>.
    let mut r = rng();
    for (h, k, s, p) in [(7usize, 3usize, 2usize, 1usize), (6, 5, 1, 2), (5, 3, 1, 0)] {
        let x = Tensor::uniform(&[2, 3, h, h], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3, k, k], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let wv = g.input(w.clone());
        let out = g.conv2d(xv, wv, None, s, p).unwrap();
        let y = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut r);
        let yv = g.input(y.clone());
        let prod = g.mul(out, yv).unwrap();
        let loss = g.sum(prod).unwrap();
        let dx = g.backward(loss).unwrap().get(xv).unwrap().clone();
        let ct = ops::conv2d_transpose(&y, &w, s, p).unwrap();
        // conv_transpose of the conv output size reproduces the input size
        // only when the stride divides evenly; compare the overlapping part.
        assert_eq!(ct.shape()[..2], dx.shape()[..2]);
        let (ch, cw) = (ct.shape()[2], ct.shape()[3]);
        for n in 0..2 {
            for c in 0..3 {
                for yy in 0..ch.min(h) {
                    for xx in 0..cw.min(h) {
                        let a = ct.data()[((n * 3 + c) * ch + yy) * cw + xx];
                        let b = dx.data()[((n * 3 + c) * h + yy) * h + xx];
                        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                    }
                }
            }
        }
    }
}

#[test]
fn maxpool_routes_to_argmax() {
    let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
    let (y, idx) = ops::maxpool2x2(&x).unwrap();
    assert_eq!(y.data(), &[4.]);
    assert_eq!(idx, vec![3]);

    let mut g = Graph::new();
    let v = g.leaf(x);
    let p = g.maxpool2x2(v).unwrap();
    let s = g.sum(p).unwrap();
    assert_eq!(g.backward(s).unwrap().get(v).unwrap().data(), &[0., 0., 0., 1.]);
}

#[test]
fn maxpool_ties_pick_first_in_scan_order() {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::ones(&[1, 1, 4, 4]));
    let p = g.maxpool2x2(v).unwrap();
    let s = g.sum(p).unwrap();
    let d = g.backward(s).unwrap().get(v).unwrap().clone();
    #[rustfmt::skip]
    let want = [1., 0., 1., 0.,
                0., 0., 0., 0.,
                1., 0., 1., 0.,
                0., 0., 0., 0.];
    assert_eq!(d.data(), &want);
}

#[test]
fn upsample_replicates_and_counts() {
    let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
    let y = ops::upsample_nearest(&x, 4, 4).unwrap();
    #[rustfmt::skip]
    let want = [1., 1., 2., 2.,
                1., 1., 2., 2.,
                3., 3., 4., 4.,
                3., 3., 4., 4.];
    assert_eq!(y.data(), &want);

    let mut g = Graph::new();
    let v = g.leaf(Tensor::zeros(&[1, 2, 7, 7]));
    let u = g.upsample_nearest(v, 28, 28).unwrap();
    let s = g.sum(u).unwrap();
    assert!(g.backward(s).unwrap().get(v).unwrap().data().iter().all(|&c| c == 16.0));
    assert!(ops::upsample_nearest(&x, 3, 4).is_err());
}

#[test]
fn batchnorm_train_standardizes() {
    let mut r = rng();
    let x = Tensor::uniform(&[16, 3, 4, 4], -2.0, 5.0, &mut r);
    let mut running = Tensor::zeros(&[2, 3]);
    running.data_mut()[3..].fill(1.0);
    let y = ops::batchnorm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), &mut running, BnMode::TRAIN).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..16)
            .flat_map(|n| y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
            .map(|v| v as f64)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
    // Running mean moved 10% of the way toward the batch mean (≈1.5).
    assert!(running.data()[0] > 0.1 && running.data()[0] < 0.2);
}

#[test]
fn batchnorm_eval_identity_and_batch_of_one() {
    let x = t(&[3, 2], &[0.5, -1., 2., 3., -4., 0.25]);
    let mut running = t(&[2, 2], &[0., 0., 1., 1.]);
    let y = ops::batchnorm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), &mut running, BnMode::Eval).unwrap();
    // Identity up to the 1/sqrt(1 + eps) factor.
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-7, "{a} vs {b}");
    }

    let one = t(&[1, 2], &[1., 2.]);
    let err = ops::batchnorm(&one, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), &mut running, BnMode::TRAIN).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }));
}

#[test]
fn activations() {
    assert_eq!(ops::relu(&t(&[3], &[-1., 0., 2.])).unwrap().data(), &[0., 0., 2.]);
    let s = ops::softmax(&Tensor::full(&[2, 10], 3.7)).unwrap();
    assert!(s.data().iter().all(|&p| (p - 0.1).abs() < 1e-7));
    let big = ops::softmax(&t(&[1, 3], &[1000., 0., -1000.])).unwrap();
    assert!(big.all_finite());
    assert!((big.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert_eq!(ops::sigmoid(&t(&[1], &[0.])).unwrap().data(), &[0.5]);
}

#[test]
fn concat_split_examples() {
    let c = ops::concat(&[&t(&[2], &[1., 2.]), &t(&[1], &[3.])], 0).unwrap();
    assert_eq!(c.data(), &[1., 2., 3.]);
    let parts = ops::split(&c, &[2, 1], 0).unwrap();
    assert_eq!(parts[0].data(), &[1., 2.]);
    assert_eq!(parts[1].data(), &[3.]);
    assert!(ops::split(&c, &[2, 2], 0).is_err());
}

#[test]
fn concat_gradients_reach_each_branch() {
    let mut g = Graph::new();
    let a = g.leaf(t(&[2, 1], &[1., 2.]));
    let b = g.leaf(t(&[2, 2], &[3., 4., 5., 6.]));
    let c = g.concat(&[a, b], 1).unwrap();
    let w = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let p = g.mul(c, w).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1., 4.]);
    assert_eq!(grads.get(b).unwrap().data(), &[2., 3., 5., 6.]);
}

#[test]
fn non_finite_results_are_reported() {
    let mut g = Graph::new();
    let a = g.input(Tensor::full(&[1], f32::MAX));
    let err = g.scale(a, 10.0).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "scale" });
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng();
    let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut r);
    let labels = [0usize, 2, 1, 1];
    let build = |which: u8| {
        let mut g = Graph::new();
        let wv = g.leaf(w.clone());
        let xv = g.input(x.clone());
        let y = g.matmul(xv, wv).unwrap();
        let l1 = g.cross_entropy(y, &labels).unwrap();
        let sq = g.square(y).unwrap();
        let l2 = g.mean(sq).unwrap();
        let root = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(root).unwrap().get(wv).unwrap().clone()
    };
    let (g1, g2, g12) = (build(0), build(1), build(2));
    for i in 0..g12.numel() {
        let sum = g1.data()[i] + g2.data()[i];
        assert!((sum - g12.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn repeated_graphs_are_bit_identical() {
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 2, 9, 9], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x), g.leaf(w));
        let c = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let p = g.maxpool2x2(c).unwrap();
        let s = g.sum(p).unwrap();
        let gw = g.backward(s).unwrap().get(wv).unwrap().clone();
        (g.value(p).clone(), gw)
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_difference_suite_passes() {
    let results = gradcheck::run_suite(2024).unwrap();
    let mut per_op = std::collections::BTreeMap::<&str, usize>::new();
    for r in &results {
        assert!(r.passed(), "{} {} rel err {:.2e}", r.op, r.shapes, r.rel_error);
        *per_op.entry(r.op).or_default() += 1;
    }
    for (op, n) in per_op {
        assert!(n >= 5, "{op} checked on only {n} shapes");
    }
}
