use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ron_core::tensor::{Graph, Shape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    let s = out.shape();
                    out.data_mut()[s.offset(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(1);
    for (stride, pad, side) in [(1, 1, 8), (1, 0, 8), (2, 1, 9)] {
        let x = Tensor::<f64>::randn(Shape::new(2, 3, side, side), 1.0, &mut r);
        let w = Tensor::<f64>::randn(Shape::new(4, 3, 3, 3), 1.0, &mut r);
        let b = Tensor::<f64>::randn(Shape::new(1, 1, 1, 4), 1.0, &mut r);
        let want = naive_conv(&x, &w, b.data(), stride, pad);

        let mut g = Graph::<f32>::new();
        let (xv, wv, bv) = (g.input(x.cast()), g.input(w.cast()), g.input(b.cast()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let got = g.value(y);
        assert_eq!(got.shape(), want.shape());
        let worst = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "stride {stride} pad {pad}: max |diff| {worst}");
    }
}

#[test]
fn deconv_is_the_input_gradient_of_strided_conv() {
    let mut r = rng(2);
    let (cin, cout, h) = (3, 5, 4);
    let x = Tensor::<f64>::randn(Shape::new(2, cin, h, h), 1.0, &mut r);
    let w = Tensor::<f64>::randn(Shape::new(cin, cout, 2, 2), 1.0, &mut r);

    let mut g = Graph::<f64>::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let d = g.deconv2d(xv, wv, None, 2).unwrap();
    let deconv = g.value(d).clone();

    // conv with the same weight tensor maps [N, cout, 2h, 2h] -> [N, cin, h, h]
    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::zeros(Shape::new(2, cout, 2 * h, 2 * h)));
    let wv = g.input(w);
    let y = g.conv2d(z, wv, None, 2, 0).unwrap();
    let l = g.dot_const(y, x.data().to_vec()).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    assert_eq!(deconv.data().len(), grad.len());
    for (a, b) in deconv.data().iter().zip(grad) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_and_deconv_are_adjoint() {
    let mut r = rng(3);
    let z = Tensor::<f64>::randn(Shape::new(1, 4, 6, 6), 1.0, &mut r);
    let x = Tensor::<f64>::randn(Shape::new(1, 2, 3, 3), 1.0, &mut r);
    let w = Tensor::<f64>::randn(Shape::new(2, 4, 2, 2), 1.0, &mut r);
    let mut g = Graph::<f64>::new();
    let (zv, xv, wv) = (g.input(z.clone()), g.input(x.clone()), g.input(w));
    let cz = g.conv2d(zv, wv, None, 2, 0).unwrap();
    let dx = g.deconv2d(xv, wv, None, 2).unwrap();
    let lhs: f64 = g.value(cz).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(dx).data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn maxpool_matches_naive() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn(Shape::new(2, 3, 6, 8), 1.0, &mut r);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let y = g.maxpool2(xv).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), Shape::new(2, 3, 3, 4));
    for n in 0..2 {
        for c in 0..3 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(n, c, 2 * oy + dy, 2 * ox + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(out.at(n, c, oy, ox), m);
                }
            }
        }
    }
    let odd = g.input(Tensor::zeros(Shape::new(1, 1, 5, 4)));
    assert!(g.maxpool2(odd).is_err());
}

#[test]
fn softmax_groups_sum_to_one() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn(Shape::new(2, 12, 3, 3), 4.0, &mut r);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x);
    let p = g.softmax_groups(xv, 4).unwrap();
    let out = g.value(p);
    for n in 0..2 {
        for grp in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    let s: f64 = (0..4).map(|c| out.at(n, grp * 4 + c, y, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
    assert!(g.softmax_groups(xv, 5).is_err());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1000.0f32, -1000.0]).unwrap();
    let mut g = Graph::<f32>::new();
    let xv = g.input(x);
    let p = g.softmax_groups(xv, 2).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 0.0]);
}

fn small_net_grad(weights: &Tensor<f64>, x: &Tensor<f64>, coeffs: (f64, f64)) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let w = g.param(weights.clone());
    let xv = g.input(x.clone());
    let y = g.conv2d(xv, w, None, 1, 1).unwrap();
    let y = g.relu(y).unwrap();
    let n = g.shape(y).numel();
    let l1 = g.dot_const(y, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let l2 = g.dot_const(y, (0..n).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let a = g.scale(l1, coeffs.0).unwrap();
    let b = g.scale(l2, coeffs.1).unwrap();
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    g.grad(w).unwrap().to_vec()
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(6);
    let w = Tensor::<f64>::randn(Shape::new(3, 2, 3, 3), 1.0, &mut r);
    let x = Tensor::<f64>::randn(Shape::new(1, 2, 5, 5), 1.0, &mut r);
    let g1 = small_net_grad(&w, &x, (1.0, 0.0));
    let g2 = small_net_grad(&w, &x, (0.0, 1.0));
    let (a, b) = (2.5, -0.75);
    let g12 = small_net_grad(&w, &x, (a, b));
    for i in 0..g1.len() {
        assert!((g12[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
    }
}

#[test]
fn dimension_mismatches_are_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(Shape::new(1, 3, 8, 8)));
    let w = g.input(Tensor::zeros(Shape::new(4, 2, 3, 3)));
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
    let y = g.input(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    assert!(g.add(x, y).is_err());
    assert!(g.backward(x).is_err());
}
