//! Independent projected-gradient solve of the SVR dual, shared by test targets.

use helios_core::svr::{DualProblem, Kernel, SvrSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Projection onto `{0 <= a <= c, y'a = 0}` with `y = [+1; -1]`, by bisection
/// on the multiplier of the equality constraint.
pub fn project(v: &[f64], c: f64) -> Vec<f64> {
    let n = v.len() / 2;
    let sign = |i: usize| if i < n { 1.0 } else { -1.0 };
    let at = |lam: f64| -> (Vec<f64>, f64) {
        let a: Vec<f64> = (0..v.len()).map(|i| (v[i] - lam * sign(i)).clamp(0.0, c)).collect();
        let s = (0..v.len()).map(|i| sign(i) * a[i]).sum();
        (a, s)
    };
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi)).0
}

/// Accelerated projected gradient on `0.5 a'Qa + p'a`.
pub fn reference_objective(p: &DualProblem, spec: &SvrSpec) -> f64 {
    let n = p.targets.len();
    let l = 2 * n;
    let sign = |i: usize| if i < n { 1.0 } else { -1.0 };
    let q = |i: usize, j: usize| sign(i) * sign(j) * p.gram[(i % n) * n + (j % n)];
    let lin: Vec<f64> = (0..l).map(|i| spec.epsilon - sign(i) * p.targets[i % n]).collect();
    // Lipschitz bound: row-sum norm of Q
    let lip = (0..l).map(|i| (0..l).map(|j| q(i, j).abs()).sum::<f64>()).fold(0.0, f64::max).max(1e-12);
    let grad = |a: &[f64]| -> Vec<f64> { (0..l).map(|i| (0..l).map(|j| q(i, j) * a[j]).sum::<f64>() + lin[i]).collect() };
    let mut a = vec![0.0; l];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let g = grad(&z);
        let step: Vec<f64> = (0..l).map(|i| z[i] - g[i] / lip).collect();
        let next = project(&step, spec.c);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = (0..l).map(|i| next[i] + (t - 1.0) / t_next * (next[i] - a[i])).collect();
        a = next;
        t = t_next;
    }
    p.objective(spec, &a)
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (j as f64 + 1.0) * v.sin()).sum::<f64>() + rng.random_range(-0.3..0.3))
        .collect();
    (x, y)
}

pub fn specs() -> Vec<SvrSpec> {
    vec![
        SvrSpec::default(),
        SvrSpec { c: 0.5, epsilon: 0.1, ..SvrSpec::default() },
        SvrSpec { c: 100.0, epsilon: 0.05, kernel: Kernel::Rbf { gamma: Some(2.0) }, ..SvrSpec::default() },
        SvrSpec { c: 3.0, epsilon: 0.02, kernel: Kernel::Linear, ..SvrSpec::default() },
    ]
}
