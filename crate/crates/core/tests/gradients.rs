use std::time::Instant;

use byol_core::checks::{case_names, gradient_suite};
use byol_core::tensor::GradCheckOptions;

#[test]
fn every_primitive_layer_and_loss_matches_finite_differences() {
    let start = Instant::now();
    let outcomes = gradient_suite(2024, 20, &GradCheckOptions::default(), |_| true);
    assert_eq!(outcomes.len(), case_names().len());
    let mut bad = Vec::new();
    for o in &outcomes {
        assert_eq!(o.shapes.len(), 20, "{}", o.name);
        if !o.passed() {
            bad.push(format!("{}: {} failures, max rel err {:.2e}, {:?}", o.name, o.failures, o.max_rel_error, o.error));
        }
    }
    assert!(bad.is_empty(), "{}", bad.join("\n"));
    assert!(start.elapsed().as_secs() < 120, "suite took {:?}", start.elapsed());
}

#[test]
fn shapes_vary_across_instances() {
    let outcomes = gradient_suite(7, 20, &GradCheckOptions::default(), |n| n == "conv2d" || n == "cssl");
    for o in outcomes {
        let mut distinct = o.shapes.clone();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() >= 10, "{}: only {} distinct shapes", o.name, distinct.len());
    }
}

#[test]
fn suite_flags_a_wrong_tolerance() {
    let strict = GradCheckOptions {
        tolerance: 0.0,
        floor: 1e-300,
        ..GradCheckOptions::default()
    };
    let outcomes = gradient_suite(1, 3, &strict, |n| n == "exp");
    assert!(!outcomes[0].passed());
}

#[test]
fn stop_gradient_blocks_exactly() {
    use byol_core::{Tape, Tensor};
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap());
    let s = tape.stop_gradient(x).unwrap();
    let y = tape.mul(x, s).unwrap();
    let l = tape.sum_all(y).unwrap();
    let grads = tape.backward(l).unwrap();
    // d/dx sum(x * sg(x)) = sg(x)
    assert_eq!(grads.get(x).unwrap().data(), &[0.5, -1.0, 2.0, 0.1, 0.2, -0.3]);
}
