//! Central finite-difference gradient checking in `f64`.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-6)` between the
/// reverse-mode gradient `a` and the central difference `n` with step `h`,
/// over every entry of every parameter. `build` must be a pure function of
/// the bound parameters. A parameter absent from the gradient map is
/// compared as zero.
pub fn max_relative_error<F>(params: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("scalar loss");

    let mut worst = 0f64;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        for e in 0..p.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work);
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work);
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[e]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
