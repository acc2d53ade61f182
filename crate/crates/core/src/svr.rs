//! Epsilon-insensitive support vector regression trained by SMO, with
//! per-feature standardization.
//!
//! The dual is solved in the two-block form over `a = [alpha; alpha*]` with
//! `y = [+1; -1]`, `Q_ij = y_i y_j K(x_i, x_j)`, `p = [eps - t; eps + t]`:
//! minimize `0.5 a'Qa + p'a` subject to `y'a = 0`, `0 <= a <= C`.
//! Working pairs are chosen by maximal violation for the first index and
//! second-order gain for the second.
//!
//! Fitted parameters are rounded to `f32` before use, so a model read back
//! from its container predicts bit-identically.

use serde::{Deserialize, Serialize};

use crate::models::{Container, ModelError, ModelKind, PayloadReader};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Kernel {
    /// `exp(-gamma |a - b|^2)`; `gamma` defaults to `1 / feature_count`.
    Rbf { gamma: Option<f64> },
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvrSpec {
    #[serde(rename = "C")]
    pub c: f64,
    /// Tube half-width in standardized label units.
    pub epsilon: f64,
    pub kernel: Kernel,
    /// Stop once the maximal KKT violation is at most this.
    pub tol: f64,
    /// Iteration cap, in units of `2n` pair updates.
    pub max_passes: usize,
}

impl Default for SvrSpec {
    fn default() -> Self {
        Self {
            c: 10.0,
            epsilon: 0.01,
            kernel: Kernel::Rbf { gamma: None },
            tol: 1e-3,
            max_passes: 200,
        }
    }
}

impl SvrSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.into()));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("C must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_passes == 0 {
            return bad("max_passes must be at least 1");
        }
        if let Kernel::Rbf { gamma: Some(g) } = self.kernel {
            if !(g > 0.0 && g.is_finite()) {
                return bad("gamma must be positive");
            }
        }
        Ok(())
    }
}

/// Per-feature and label mean / population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub label_mean: f64,
    pub label_scale: f64,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

impl Standardizer {
    /// Zero-variance columns get scale 1.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self, ModelError> {
        let n = x.len();
        if n == 0 || y.len() != n {
            return Err(ModelError::EmptyTrainingSet);
        }
        let d = x[0].len();
        let mut mean = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for j in 0..d {
            let (m, s) = mean_and_scale(x.iter().map(|r| r[j]));
            mean.push(m);
            scale.push(s);
        }
        let (label_mean, label_scale) = mean_and_scale(y.iter().copied());
        Ok(Self {
            mean,
            scale,
            label_mean,
            label_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn apply_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_scale
    }

    pub fn invert_label(&self, z: f64) -> f64 {
        z * self.label_scale + self.label_mean
    }

    fn quantized(&self) -> Self {
        Self {
            mean: self.mean.iter().map(|&v| round_f32(v)).collect(),
            scale: self.scale.iter().map(|&v| round_f32(v).max(f64::from(f32::MIN_POSITIVE))).collect(),
            label_mean: round_f32(self.label_mean),
            label_scale: round_f32(self.label_scale).max(f64::from(f32::MIN_POSITIVE)),
        }
    }
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Nearest `f32` value no larger in magnitude than `bound`.
fn round_f32_within(v: f64, bound: f64) -> f64 {
    let mut q = v as f32;
    while f64::from(q).abs() > bound {
        q = if q > 0.0 { q.next_down() } else { q.next_up() };
    }
    f64::from(q)
}

fn kernel_value(kernel: Kernel, gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Rbf { .. } => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp(),
    }
}

/// Solver diagnostics, computed before rounding to `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrFitReport {
    /// `0.5 a'Qa + p'a` at the returned point.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal KKT violation.
    pub violation: f64,
    /// Bias implied by each free (non-bound) variable.
    pub free_bias_estimates: Vec<f64>,
    /// Bias actually used.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub spec: SvrSpec,
    pub standardizer: Standardizer,
    /// Standardized support vectors.
    pub support: Vec<Vec<f64>>,
    /// `alpha - alpha*` per support vector.
    pub coef: Vec<f64>,
    /// Bias in standardized label units.
    pub bias: f64,
    gamma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SvrHeader {
    spec: SvrSpec,
    dim: usize,
    support_count: usize,
}

/// The standardized data and Gram matrix the dual is posed on.
#[derive(Debug, Clone)]
pub struct DualProblem {
    pub standardizer: Standardizer,
    /// Standardized rows, rounded to `f32`.
    pub features: Vec<Vec<f64>>,
    /// Standardized labels.
    pub targets: Vec<f64>,
    /// Row-major `n x n`.
    pub gram: Vec<f64>,
    pub gamma: f64,
}

impl DualProblem {
    pub fn build(x: &[Vec<f64>], y: &[f64], spec: &SvrSpec) -> Result<Self, ModelError> {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        let standardizer = Standardizer::fit(x, y)?.quantized();
        let features: Vec<Vec<f64>> = x
            .iter()
            .map(|r| standardizer.apply(r).into_iter().map(round_f32).collect())
            .collect();
        let targets = y.iter().map(|&v| standardizer.apply_label(v)).collect();
        let gamma = match spec.kernel {
            Kernel::Rbf { gamma } => gamma.unwrap_or(1.0 / d.max(1) as f64),
            Kernel::Linear => 0.0,
        };
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = kernel_value(spec.kernel, gamma, &features[i], &features[j]);
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
        }
        Ok(Self {
            standardizer,
            features,
            targets,
            gram,
            gamma,
        })
    }

    /// `0.5 a'Qa + p'a` for `a = [alpha; alpha*]`.
    pub fn objective(&self, spec: &SvrSpec, a: &[f64]) -> f64 {
        let n = self.targets.len();
        let beta: Vec<f64> = (0..n).map(|i| a[i] - a[n + i]).collect();
        let quad: f64 = (0..n)
            .map(|i| beta[i] * (0..n).map(|j| self.gram[i * n + j] * beta[j]).sum::<f64>())
            .sum();
        let lin: f64 = (0..n)
            .map(|i| spec.epsilon * (a[i] + a[n + i]) - self.targets[i] * beta[i])
            .sum();
        0.5 * quad + lin
    }
}

/// Fit on raw features `x` (rows) and labels `y`.
pub fn svr_fit(x: &[Vec<f64>], y: &[f64], spec: &SvrSpec) -> Result<(SvrModel, SvrFitReport), ModelError> {
    spec.validate()?;
    let n = x.len();
    if n == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    if y.len() != n {
        return Err(ModelError::DimensionMismatch { expected: n, got: y.len() });
    }
    let d = x[0].len();
    for (i, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(ModelError::DimensionMismatch { expected: d, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) || !y[i].is_finite() {
            return Err(ModelError::NonFiniteInput(format!("training row {i}")));
        }
    }
    let problem = DualProblem::build(x, y, spec)?;
    let report = solve(&problem.gram, &problem.targets, spec);
    let beta: Vec<f64> = report.1.iter().take(n).zip(&report.1[n..]).map(|(a, b)| a - b).collect();
    let DualProblem {
        standardizer: st,
        features: xs,
        gamma,
        ..
    } = problem;
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for i in 0..n {
        let c = round_f32_within(beta[i], spec.c);
        if c != 0.0 {
            support.push(xs[i].clone());
            coef.push(c);
        }
    }
    let fit = report.0;
    let model = SvrModel {
        spec: *spec,
        standardizer: st,
        support,
        coef,
        bias: round_f32(fit.bias),
        gamma,
    };
    Ok((model, fit))
}

/// Two-block SMO on the precomputed Gram matrix `k`; returns the report and `a`.
fn solve(k: &[f64], t: &[f64], spec: &SvrSpec) -> (SvrFitReport, Vec<f64>) {
    let n = t.len();
    let l = 2 * n;
    let c = spec.c;
    let sign = |i: usize| if i < n { 1.0 } else { -1.0 };
    let kk = |i: usize, j: usize| k[(i % n) * n + (j % n)];
    let q = |i: usize, j: usize| sign(i) * sign(j) * kk(i, j);
    let mut a = vec![0.0; l];
    let mut g: Vec<f64> = (0..l).map(|i| spec.epsilon - sign(i) * t[i % n]).collect();
    let max_iter = spec.max_passes.saturating_mul(l).max(1);
    let mut iterations = 0;
    let mut violation;
    let mut converged = false;
    loop {
        // first index: maximal -y G over the "can increase y a" set
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for s in 0..l {
            let up = if sign(s) > 0.0 { a[s] < c } else { a[s] > 0.0 };
            if up && -sign(s) * g[s] >= gmax {
                if -sign(s) * g[s] > gmax || i_sel == usize::MAX {
                    gmax = -sign(s) * g[s];
                    i_sel = s;
                }
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut best = f64::INFINITY;
        for s in 0..l {
            let low = if sign(s) > 0.0 { a[s] > 0.0 } else { a[s] < c };
            if !low {
                continue;
            }
            let ys_g = sign(s) * g[s];
            gmax2 = gmax2.max(ys_g);
            if i_sel == usize::MAX {
                continue;
            }
            let diff = gmax + ys_g;
            if diff > 0.0 {
                let quad = kk(i_sel, i_sel) + kk(s, s) - 2.0 * kk(i_sel, s);
                let quad = if quad > 0.0 { quad } else { TAU };
                let obj = -(diff * diff) / quad;
                if obj <= best {
                    if obj < best || j_sel == usize::MAX {
                        best = obj;
                        j_sel = s;
                    }
                }
            }
        }
        violation = if gmax.is_finite() && gmax2.is_finite() { gmax + gmax2 } else { 0.0 };
        if violation <= spec.tol || j_sel == usize::MAX || i_sel == usize::MAX {
            converged = violation <= spec.tol || j_sel == usize::MAX;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (a[i], a[j]);
        let qij = q(i, j);
        if sign(i) != sign(j) {
            let mut quad = q(i, i) + q(j, j) + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > c {
                    a[i] = c;
                    a[j] = c - diff;
                }
            } else if a[j] > c {
                a[j] = c;
                a[i] = c + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > c {
                if a[i] > c {
                    a[i] = c;
                    a[j] = sum - c;
                }
            } else if a[j] < 0.0 {
                a[j] = 0.0;
                a[i] = sum;
            }
            if sum > c {
                if a[j] > c {
                    a[j] = c;
                    a[i] = sum - c;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = sum;
            }
        }
        let (di, dj) = (a[i] - old_i, a[j] - old_j);
        for s in 0..l {
            g[s] += q(s, i) * di + q(s, j) * dj;
        }
    }
    // bias: average over free variables, else midpoint of the feasible interval
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free = Vec::new();
    for s in 0..l {
        let yg = sign(s) * g[s];
        if a[s] >= c {
            if sign(s) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if a[s] <= 0.0 {
            if sign(s) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free.push(-yg);
        }
    }
    let rho = if free.is_empty() {
        (ub + lb) / 2.0
    } else {
        -free.iter().sum::<f64>() / free.len() as f64
    };
    let objective = (0..l)
        .map(|s| a[s] * (g[s] + spec.epsilon - sign(s) * t[s % n]))
        .sum::<f64>()
        / 2.0;
    (
        SvrFitReport {
            objective,
            iterations,
            converged,
            violation,
            free_bias_estimates: free,
            bias: -rho,
        },
        a,
    )
}

impl SvrModel {
    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Prediction in standardized label units from standardized features.
    pub fn decision(&self, z: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * kernel_value(self.spec.kernel, self.gamma, sv, z))
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64, ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput("prediction features".into()));
        }
        Ok(self.standardizer.invert_label(self.decision(&self.standardizer.apply(x))))
    }

    pub fn to_container(&self) -> Container {
        let d = self.dim();
        let header = SvrHeader {
            spec: self.spec,
            dim: d,
            support_count: self.coef.len(),
        };
        let mut p = Vec::with_capacity(2 * d + 3 + self.coef.len() * (d + 1));
        let f = |v: f64| v as f32;
        p.extend(self.standardizer.mean.iter().map(|&v| f(v)));
        p.extend(self.standardizer.scale.iter().map(|&v| f(v)));
        p.extend([f(self.standardizer.label_mean), f(self.standardizer.label_scale), f(self.bias)]);
        p.extend(self.coef.iter().map(|&v| f(v)));
        for sv in &self.support {
            p.extend(sv.iter().map(|&v| f(v)));
        }
        Container::new(ModelKind::Svr, &header, p).expect("svr header serializes")
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        c.expect_kind(ModelKind::Svr)?;
        let h: SvrHeader = c.header_as()?;
        h.spec.validate()?;
        let d = h.dim;
        let mut r = PayloadReader::new(&c.payload);
        let wide = |s: &[f32]| s.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        let mean = wide(r.take(d)?);
        let scale = wide(r.take(d)?);
        let tail = wide(r.take(3)?);
        let coef = wide(r.take(h.support_count)?);
        let mut support = Vec::with_capacity(h.support_count);
        for _ in 0..h.support_count {
            support.push(wide(r.take(d)?));
        }
        r.finish()?;
        if scale.iter().chain([&tail[1]]).any(|&s| !(s > 0.0)) {
            return Err(ModelError::FormatViolation("non-positive standardizer scale".into()));
        }
        if coef.iter().any(|v| v.abs() > h.spec.c) {
            return Err(ModelError::FormatViolation("dual coefficient exceeds C".into()));
        }
        let gamma = match h.spec.kernel {
            Kernel::Rbf { gamma } => gamma.unwrap_or(1.0 / d.max(1) as f64),
            Kernel::Linear => 0.0,
        };
        Ok(Self {
            spec: h.spec,
            standardizer: Standardizer {
                mean,
                scale,
                label_mean: tail[0],
                label_scale: tail[1],
            },
            support,
            coef,
            bias: tail[2],
            gamma,
        })
    }
}
