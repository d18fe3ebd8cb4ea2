//! Compare backprop against central differences for a small expression.

use fan::adcore::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> fan::Result<(Graph, fan::adcore::Var, fan::adcore::Var)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let h = g.matmul_t(xv, false, wv, true)?;
    let h = g.tanh(h)?;
    let lp = g.log_softmax(h)?;
    let l = g.nll_rows(lp, &[0, 2])?;
    Ok((g, wv, l))
}

fn main() -> fan::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 0.1, 0.8, -0.3])?;
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64).cos() * 0.5).collect())?;
    let (g, wv, l) = loss(&x, &w)?;
    let analytic = g.backward(l)?.wrt(&g, wv);

    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let mut up = w.clone();
        up.data_mut()[i] += h;
        let mut down = w.clone();
        down.data_mut()[i] -= h;
        let (gu, _, lu) = loss(&x, &up)?;
        let (gd, _, ld) = loss(&x, &down)?;
        let numeric = (gu.value(lu).item() - gd.value(ld).item()) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        println!("w[{i:>2}] backprop {a:>12.8} numeric {numeric:>12.8}");
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
