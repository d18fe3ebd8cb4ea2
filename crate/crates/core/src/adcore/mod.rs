//! Dense `f64` tensors, a reverse-mode differentiation tape, and the
//! ADADELTA optimizer. Every learnable computation in the crate is built on
//! these primitives.

mod adadelta;
mod gemm;
mod graph;
mod nn;
mod params;
mod tensor;

pub use adadelta::AdadeltaState;
pub use graph::{window_out, Gradients, Graph, Size2, Var};
pub use nn::{glorot_uniform, lstm_cell, LinearParams, LstmParams, LstmVars};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, Size2::square(1), Size2::square(0)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_two_by_two_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.; 4]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, Size2::square(1), Size2::square(0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dimension() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let err = g.conv2d(x, w, b, Size2::square(1), Size2::square(1)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let x = g.constant(Tensor::zeros(vec![3, 2, 8]));
        let err = g.conv2d(x, w, b, Size2::square(1), Size2::square(0)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.maxpool2d(x, Size2::square(2), Size2::square(2), Size2::square(0)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.constant(Tensor::full(vec![2, 4, 6], 0.3));
        let y = g.maxpool2d(c, Size2::square(2), Size2::new(2, 1), Size2::new(0, 1)).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 7]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.3));

        let big = g.constant(Tensor::zeros(vec![1, 1, 1]));
        assert!(g.maxpool2d(big, Size2::square(2), Size2::square(1), Size2::square(0)).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2], &[1., 5., 3., 4.]));
        let y = g.maxpool2d(x, Size2::square(2), Size2::square(2), Size2::square(0)).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[2., 3.]));
        let w = g.constant(t(&[1, 2], &[1., 1.]));
        let b = g.input(t(&[1], &[1.]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, b).data(), &[1.0]);

        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let zero = g.constant(Tensor::zeros(vec![2]));
        let y = g.affine(x, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y).data(), &[2., 3.]);

        let bad = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.affine(x, bad, None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![4], 1.7));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
        let nan = g.constant(t(&[2], &[0.0, f64::NAN]));
        assert!(g.softmax(nan).is_err());
        assert!(g.log_softmax(nan).is_err());
        assert!(g.tanh(nan).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1000.0, 0.0, -1000.0]));
        let y = g.log_softmax(x).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[0].abs() < 1e-12);
    }

    #[test]
    fn tanh_at_origin() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[0.0]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, x).item(), 1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![37]));
        let l = g.cross_entropy(x, 5).unwrap();
        assert!((g.value(l).item() - 37f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 3.6109).abs() < 1e-4);
        let mut peaked = vec![0.0; 37];
        peaked[5] = 60.0;
        let x = g.constant(Tensor::vector(peaked));
        let l = g.cross_entropy(x, 5).unwrap();
        assert!(g.value(l).item() >= 0.0 && g.value(l).item() < 1e-20);
        assert!(g.cross_entropy(x, 37).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.wrt(&g, x).item(), 1.0);

        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(&g, x).item(), 6.0);

        let v = g.input(Tensor::zeros(vec![2]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0)).unwrap();
        let b = store.add("b", Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let loss = g.mul(av, av).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut buf = GradBuffer::zeros_like(&store);
        grads.accumulate(&g, &mut buf);
        assert_eq!(buf.get(a), &[4.0]);
        assert_eq!(buf.get(b), &[0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector((0..12).map(|i| (i as f64).sin()).collect()));
        let m = g.reshape(x, vec![3, 4]).unwrap();
        let mt = g.transpose(m).unwrap();
        let p = g.matmul(m, mt).unwrap();
        let th = g.tanh(p).unwrap();
        let s = g.sum(th);
        let g1 = g.backward(s).unwrap().wrt(&g, x);
        let g2 = g.backward(s).unwrap().wrt(&g, x);
        assert_eq!(g1.data(), g2.data());
    }
}
