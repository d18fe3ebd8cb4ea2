//! Layer building blocks expressed in graph primitives.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{FanError, Result};

/// Uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}

/// Parameters of an LSTM cell with fused gate weights.
///
/// `w` has shape `4H × (I + H)` and acts on `concat(x, h_prev)`; gate rows
/// are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = glorot_uniform(rng, vec![4 * hidden, input + hidden], input + hidden, 4 * hidden);
        let w = store.add(format!("{prefix}.w"), w)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(vec![4 * hidden]))?;
        Ok(LstmParams { w, b, input, hidden })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> LstmVars {
        LstmVars {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
            input: self.input,
            hidden: self.hidden,
        }
    }
}

/// LSTM weights placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub b: Var,
    pub input: usize,
    pub hidden: usize,
}

/// One gated LSTM update; returns `(h, c)`.
pub fn lstm_cell(g: &mut Graph, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let hd = p.hidden;
    if g.value(x).len() != p.input {
        return Err(FanError::shape(
            "lstm_cell",
            format!("input length {} but cell expects {}", g.value(x).len(), p.input),
        ));
    }
    for (name, v) in [("h_prev", h_prev), ("c_prev", c_prev)] {
        if g.value(v).len() != hd {
            return Err(FanError::shape(
                "lstm_cell",
                format!("{name} length {} but hidden size is {hd}", g.value(v).len()),
            ));
        }
    }
    let xh = g.concat(&[x, h_prev])?;
    let z = g.affine(xh, p.w, Some(p.b))?;
    let zi = g.slice(z, 0, hd)?;
    let zf = g.slice(z, hd, hd)?;
    let zg = g.slice(z, 2 * hd, hd)?;
    let zo = g.slice(z, 3 * hd, hd)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Affine layer parameters: `w` is `out × in`, `b` is `out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{prefix}.w"),
            glorot_uniform(rng, vec![output, input], input, output),
        )?;
        let b = if bias {
            Some(store.add(format!("{prefix}.b"), Tensor::zeros(vec![output]))?)
        } else {
            None
        };
        Ok(LinearParams { w, b })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(store: &mut ParamStore, input: usize, hidden: usize) -> LstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LstmParams::register(store, "cell", input, hidden, &mut rng).unwrap()
    }

    #[test]
    fn zero_params_zero_state_gives_zero() {
        let mut store = ParamStore::new();
        let p = cell(&mut store, 3, 4);
        store.set(p.w, Tensor::zeros(vec![16, 7])).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let h0 = g.constant(Tensor::zeros(vec![4]));
        let c0 = g.constant(Tensor::zeros(vec![4]));
        let (h, c) = lstm_cell(&mut g, x, h0, c0, &vars).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut store = ParamStore::new();
        let p = cell(&mut store, 2, 3);
        // Zero weights, forget bias large, input gate bias large, candidate bias 0.5.
        store.set(p.w, Tensor::zeros(vec![12, 5])).unwrap();
        let mut b = vec![0.0; 12];
        b[..3].iter_mut().for_each(|v| *v = 40.0);
        b[3..6].iter_mut().for_each(|v| *v = 40.0);
        b[6..9].iter_mut().for_each(|v| *v = 0.5);
        store.set(p.b, Tensor::vector(b)).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let h0 = g.constant(Tensor::zeros(vec![3]));
        let c0 = g.constant(Tensor::vector(vec![0.2, -0.7, 1.5]));
        let (_, c) = lstm_cell(&mut g, x, h0, c0, &vars).unwrap();
        let want = [0.2 + 0.5f64.tanh(), -0.7 + 0.5f64.tanh(), 1.5 + 0.5f64.tanh()];
        for (got, want) in g.value(c).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_extent_mismatch() {
        let mut store = ParamStore::new();
        let p = cell(&mut store, 3, 4);
        let mut g = Graph::new();
        let vars = p.bind(&mut g, &store);
        let x = g.constant(Tensor::zeros(vec![2]));
        let h0 = g.constant(Tensor::zeros(vec![4]));
        let c0 = g.constant(Tensor::zeros(vec![4]));
        assert!(lstm_cell(&mut g, x, h0, c0, &vars).is_err());
    }
}
