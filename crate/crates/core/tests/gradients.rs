mod common;

use common::{check_focus_alpha, check_model, check_op, op_suite, tiny_config, tiny_sample, GRAD_TOL};
use fan::adcore::{Graph, Tensor};
use fan::focus::FocusSource;
use fan::model::FanModel;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in op_suite() {
        assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn chained_ops_match_finite_differences() {
    let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, -1.1, 0.4, 0.05]).unwrap();
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let err = check_op(&[x, w], &|g: &mut Graph, v| {
        let h = g.matmul_t(v[0], false, v[1], true)?;
        let h = g.tanh(h)?;
        let p = g.softmax(h)?;
        let t = g.transpose(p)?;
        g.mul(t, t)
    });
    assert!(err < GRAD_TOL, "relative error {err:e}");
}

#[test]
fn joint_loss_gradient_from_input_crops() {
    let mut model = FanModel::new(tiny_config(0.3, FocusSource::Input), 5).unwrap();
    let err = check_model(&mut model, &tiny_sample(1));
    assert!(err < GRAD_TOL, "relative error {err:e}");
}

#[test]
fn joint_loss_gradient_from_conv_crops() {
    let mut model = FanModel::new(tiny_config(0.3, FocusSource::FirstConv), 6).unwrap();
    let err = check_model(&mut model, &tiny_sample(2));
    assert!(err < GRAD_TOL, "relative error {err:e}");
}

#[test]
fn attention_only_loss_gradient() {
    let mut model = FanModel::new(tiny_config(0.0, FocusSource::Input), 7).unwrap();
    let mut sample = tiny_sample(3);
    sample.boxes = None;
    let err = check_model(&mut model, &sample);
    assert!(err < GRAD_TOL, "relative error {err:e}");
}

#[test]
fn focusing_loss_gradient_wrt_alignment() {
    let err = check_focus_alpha();
    assert!(err < GRAD_TOL, "relative error {err:e}");
}
