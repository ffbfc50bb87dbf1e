use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[3.0, 4.0]));
    let y = tape.l2_normalize(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
}

#[test]
fn l2_normalize_zero_vector_is_finite() {
    let mut tape = Tape::<f64>::checked();
    let x = tape.constant(Tensor::zeros([2, 3]));
    let y = tape.l2_normalize(x).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv2d_of_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones([1, 1, 2, 2]));
    let w = tape.constant(Tensor::<f64>::ones([1, 1, 2, 2]));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn conv2d_matches_direct_loops() {
    // stride 2, padding 1, 2 input and 3 output channels
    let (n, c, h, w, o, k) = (2, 2, 5, 4, 3, 3);
    let xs: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let ws: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(t(&[n, c, h, w], &xs));
    let wv = tape.constant(t(&[o, c, k, k], &ws));
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    let (ho, wo) = (3, 2);
    assert_eq!(tape.shape(y), &[n, o, ho, wo]);
    for ni in 0..n {
        for oi in 0..o {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + ih as usize) * w + iw as usize;
                                acc += xs[xi] * ws[((oi * c + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    let got = tape.value(y).data()[((ni * o + oi) * ho + oh) * wo + ow];
                    assert_eq!(got, acc);
                }
            }
        }
    }
}

#[test]
fn conv2d_rejects_stride_three() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones([1, 1, 6, 6]));
    let w = tape.constant(Tensor::<f64>::ones([1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, 3, 0), Err(TensorError::Contract(_))));
}

#[test]
fn shape_error_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::ones([2, 3]));
    let b = tape.constant(Tensor::<f64>::ones([4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 2]
        }
    );
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn broadcasting_add_and_reduce() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = tape.param(t(&[1, 3], &[10.0, 20.0, 30.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let s = tape.sum_all(c).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.get(a).unwrap().data(), &[1.0; 6]);
}

#[test]
fn sum_over_axes() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let s = tape.sum(a, &[0, 2], false).unwrap();
    assert_eq!(tape.shape(s), &[2]);
    assert_eq!(tape.value(s).data(), &[1.0 + 2.0 + 5.0 + 6.0, 3.0 + 4.0 + 7.0 + 8.0]);
    let m = tape.mean(a, &[1], true).unwrap();
    assert_eq!(tape.shape(m), &[2, 1, 2]);
    assert_eq!(tape.value(m).data(), &[2.0, 3.0, 6.0, 7.0]);
}

#[test]
fn max_pool_picks_window_maximum() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0]));
    let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 8.0]);
}

#[test]
fn concat_along_inner_axis() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
    let y = tape.param(t(&[3], &[0.5, 0.5, 0.5]));
    let sx = tape.stop_gradient(x).unwrap();
    let p = tape.mul(sx, y).unwrap();
    let loss = tape.sum_all(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert_eq!(g.get(y).unwrap().data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn constants_get_no_gradient_entry() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[1], &[2.0]));
    let x = tape.param(t(&[1], &[3.0]));
    let p = tape.mul(c, x).unwrap();
    let loss = tape.sum_all(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[2.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::ones([2]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn non_finite_intermediate_reports_node() {
    let mut tape = Tape::checked();
    let x = tape.param(t(&[2], &[1.0, -1.0]));
    let err = tape.log(x).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "log", node: 1 });
}

#[test]
fn l2_normalize_composite_matches_finite_differences() {
    let x = t(&[3, 4], &[0.3, -1.2, 0.7, 2.0, -0.4, 0.9, 1.1, -0.6, 0.05, 0.8, -1.5, 0.2]);
    let w = t(&[3, 4], &[1.0, -0.5, 0.25, 2.0, 0.3, -1.0, 0.7, 0.1, -0.2, 0.4, 0.9, -0.8]);
    let report = grad_check(
        |tape, v| {
            let n = tape.l2_normalize(v[0])?;
            let p = tape.mul(n, v[1])?;
            let e = tape.exp(p)?;
            tape.sum_all(e)
        },
        &[x, w],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_linear_layer() {
    let x = t(&[4, 3], &[0.1, 0.2, -0.3, 1.0, -1.0, 0.5, 0.0, 0.3, 0.3, 2.0, -0.1, 0.7]);
    let w = t(&[3, 2], &[0.5, -0.4, 0.3, 0.8, -0.6, 0.2]);
    let b = t(&[2], &[0.1, -0.2]);
    let report = grad_check(
        |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            let y = tape.add(y, v[2])?;
            let s = tape.sigmoid(y)?;
            tape.sum_all(s)
        },
        &[x, w, b],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.excluded(), 0);
}

#[test]
fn sigmoid_slope_at_zero_is_a_quarter() {
    let report = grad_check(
        |tape, v| {
            let s = tape.sigmoid(v[0])?;
            tape.sum_all(s)
        },
        &[t(&[1], &[0.0])],
        &GradCheckOptions::default(),
    )
    .unwrap();
    let r = &report.inputs[0];
    assert_eq!(r.worst_analytic, 0.25);
    assert!((r.worst_numeric - 0.25).abs() < 1e-9);
    assert!(report.passed());
}

#[test]
fn relu_at_kink_is_excluded() {
    let report = grad_check(
        |tape, v| {
            let r = tape.relu(v[0])?;
            tape.sum_all(r)
        },
        &[t(&[3], &[-1.0, 0.0, 2.0])],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.inputs[0].excluded, vec![1]);
    assert_eq!(report.inputs[0].checked, 2);
    assert!(report.passed());
}

#[test]
fn grad_check_rejects_bad_step_and_inputs() {
    let f = |tape: &mut Tape<f64>, v: &[Var]| tape.sum_all(v[0]);
    let opts = GradCheckOptions {
        step: 0.0,
        ..Default::default()
    };
    assert!(grad_check(f, &[t(&[1], &[1.0])], &opts).is_err());
    assert!(grad_check(f, &[t(&[1], &[f64::NAN])], &GradCheckOptions::default()).is_err());
}

#[test]
fn standardize_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 5.0]));
    let layout = kernels::GroupLayout {
        outer: 1,
        groups: 2,
        inner: 2,
    };
    let y = tape.standardize(x, layout, 0.0).unwrap();
    let v = tape.value(y).data();
    assert_eq!(&v[..2], &[-1.0, 1.0]);
    // constant row: 0/0 is avoided only with eps > 0
    let y = tape.standardize(x, layout, 1e-4).unwrap();
    assert_eq!(&tape.value(y).data()[2..], &[0.0, 0.0]);
}

#[test]
fn rebuilt_graphs_give_bitwise_identical_gradients() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_f64([2, 3, 6, 6], &(0..216).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
        let w = tape.param(Tensor::from_f64([4, 3, 3, 3], &(0..108).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>()).unwrap());
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.mean_all(y).unwrap();
        let g = tape.backward(y).unwrap();
        (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}
