//! Entropic optimal transport over pixel-to-class score matrices.
//!
//! Solves min_T sum_ij T_ij (1 - S_ij) - lambda * H(T) with
//! H(T) = -sum_ij T_ij (log T_ij - 1), row marginals uniform over pixels and
//! column marginals estimated from the score mass. The iteration runs in the
//! log domain with double precision, so the Gibbs kernel exp(-(1-S)/lambda)
//! never underflows even for small lambda.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::tensor::ScoreStack;

/// How the column (class) marginal is derived from the score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColMarginalMode {
    /// Class mass proportional to its total score, floored at `col_floor`
    /// times the total mass so minor classes never starve.
    MassProportional,
    /// 1/C per class.
    Uniform,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OtConfig {
    /// Entropic regularization strength.
    pub lambda: f64,
    /// Maximum allowed marginal violation at convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub col_marginal_mode: ColMarginalMode,
    /// Column-marginal floor numerator: a class receives at least
    /// col_floor / C of the total mass.
    pub col_floor: f64,
    /// Scale the plan by N before the elementwise product, turning rows into
    /// per-pixel class distributions. Off reproduces the raw coupling.
    pub scale_rows: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            lambda: 0.1,
            tol: 1e-6,
            max_iter: 1000,
            col_marginal_mode: ColMarginalMode::MassProportional,
            col_floor: 1e-3,
            scale_rows: true,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 || self.lambda.is_nan() {
            return Err(Error::Domain(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.tol <= 0.0 || self.tol.is_nan() {
            return Err(Error::Domain(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::Domain("max_iter must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.col_floor) {
            return Err(Error::Domain(format!("col_floor must be in [0, 1), got {}", self.col_floor)));
        }
        Ok(())
    }
}

/// Nonnegative N x C coupling with its marginals and solver diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub iterations: usize,
    pub violation: f64,
    pub converged: bool,
    /// The iterate was projected onto the transport polytope after the
    /// iteration cap. Crisp score matrices put the optimum on a polytope
    /// vertex where the scaling tail decays at rate 1 - e^(-1/lambda);
    /// rounding turns a near-feasible iterate into a feasible plan.
    pub rounded: bool,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

/// Estimates the class marginal from the score matrix (columns = classes).
///
/// `mass_proportional`: c_j = max(sum_i S_ij, floor * total) renormalized to
/// the simplex. `uniform`: 1/C each. The floor keeps every class reachable.
pub fn estimate_col_marginal(scores: &Array2<f64>, mode: ColMarginalMode, floor: f64) -> Result<Vec<f64>> {
    let cols = scores.ncols();
    if cols == 0 {
        return Err(Error::DegenerateInput("score matrix has no columns".into()));
    }
    match mode {
        ColMarginalMode::Uniform => Ok(vec![1.0 / cols as f64; cols]),
        ColMarginalMode::MassProportional => {
            let total: f64 = scores.sum();
            if total <= 0.0 {
                return Err(Error::DegenerateInput("all-zero score matrix has no class mass".into()));
            }
            let mut marginal: Vec<f64> = scores
                .axis_iter(Axis(1))
                .map(|col| col.sum().max(floor * total))
                .collect();
            let norm: f64 = marginal.iter().sum();
            for m in &mut marginal {
                *m /= norm;
            }
            Ok(marginal)
        }
    }
}

/// Log-domain Sinkhorn. Rows carry 1/N each; the column marginal follows the
/// config. Non-convergence is reported in the plan, not as an error.
pub fn solve_entropic_ot(scores: &Array2<f64>, cfg: &OtConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, c) = scores.dim();
    if n == 0 || c == 0 {
        return Err(Error::DegenerateInput("empty score matrix".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ot score matrix".into()));
    }
    if scores.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::Domain("ot scores must lie in [0, 1]".into()));
    }
    let row_marginal = vec![1.0 / n as f64; n];
    let col_marginal = estimate_col_marginal(scores, cfg.col_marginal_mode, cfg.col_floor / c as f64)?;
    solve_with_marginals(scores, &row_marginal, &col_marginal, cfg)
}

/// Sinkhorn iteration with explicit marginals (both strictly positive,
/// summing to one).
pub fn solve_with_marginals(
    scores: &Array2<f64>,
    row_marginal: &[f64],
    col_marginal: &[f64],
    cfg: &OtConfig,
) -> Result<TransportPlan> {
    let (n, c) = scores.dim();
    debug_assert_eq!(row_marginal.len(), n);
    debug_assert_eq!(col_marginal.len(), c);

    let lambda = cfg.lambda;
    // Negative cost over lambda: log of the Gibbs kernel.
    let kernel = scores.mapv(|s| (s - 1.0) / lambda);
    let log_a: Vec<f64> = row_marginal.iter().map(|&a| a.ln()).collect();
    let log_b: Vec<f64> = col_marginal.iter().map(|&b| b.ln()).collect();

    // Potentials scaled by 1/lambda: log T_ij = fi[i] + gj[j] + kernel[i][j].
    let mut fi = vec![0.0f64; n];
    let mut gj = vec![0.0f64; c];

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut converged = false;
    let mut buf = vec![0.0f64; n.max(c)];

    while iterations < cfg.max_iter {
        iterations += 1;

        // Column step: make column sums match col_marginal.
        for j in 0..c {
            for i in 0..n {
                buf[i] = fi[i] + kernel[(i, j)];
            }
            gj[j] = log_b[j] - logsumexp(&buf[..n]);
        }
        // Row step: make row sums match row_marginal exactly.
        for i in 0..n {
            for j in 0..c {
                buf[j] = gj[j] + kernel[(i, j)];
            }
            fi[i] = log_a[i] - logsumexp(&buf[..c]);
        }

        // Rows are exact after the row step; the residual lives in the columns.
        violation = 0.0;
        for j in 0..c {
            let mut col_sum = 0.0;
            for i in 0..n {
                col_sum += (fi[i] + gj[j] + kernel[(i, j)]).exp();
            }
            violation = violation.max((col_sum - col_marginal[j]).abs());
        }
        if violation <= cfg.tol {
            converged = true;
            break;
        }
    }

    let mut values = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..c {
            values[(i, j)] = (fi[i] + gj[j] + kernel[(i, j)]).exp();
        }
    }

    let mut rounded = false;
    if !converged {
        round_to_polytope(&mut values, row_marginal, col_marginal);
        violation = max_violation(&values, row_marginal, col_marginal);
        converged = violation <= cfg.tol;
        rounded = true;
    }

    Ok(TransportPlan {
        values,
        row_marginal: row_marginal.to_vec(),
        col_marginal: col_marginal.to_vec(),
        iterations,
        violation,
        converged,
        rounded,
    })
}

/// Projects a near-feasible nonnegative matrix onto the transport polytope:
/// rows and columns are scaled down to their marginals and the missing mass
/// is re-added as a rank-one term.
fn round_to_polytope(values: &mut Array2<f64>, row_marginal: &[f64], col_marginal: &[f64]) {
    let (n, c) = values.dim();
    for i in 0..n {
        let sum: f64 = values.row(i).sum();
        if sum > row_marginal[i] {
            let scale = row_marginal[i] / sum;
            for j in 0..c {
                values[(i, j)] *= scale;
            }
        }
    }
    for j in 0..c {
        let sum: f64 = values.column(j).sum();
        if sum > col_marginal[j] {
            let scale = col_marginal[j] / sum;
            for i in 0..n {
                values[(i, j)] *= scale;
            }
        }
    }
    let err_rows: Vec<f64> = (0..n).map(|i| row_marginal[i] - values.row(i).sum()).collect();
    let err_cols: Vec<f64> = (0..c).map(|j| col_marginal[j] - values.column(j).sum()).collect();
    let total: f64 = err_rows.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..c {
                values[(i, j)] += err_rows[i] * err_cols[j] / total;
            }
        }
    }
}

fn max_violation(values: &Array2<f64>, row_marginal: &[f64], col_marginal: &[f64]) -> f64 {
    let mut v: f64 = 0.0;
    for (row, &target) in values.rows().into_iter().zip(row_marginal) {
        v = v.max((row.sum() - target).abs());
    }
    for (col, &target) in values.columns().into_iter().zip(col_marginal) {
        v = v.max((col.sum() - target).abs());
    }
    v
}

fn logsumexp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Scales the plan so each row becomes a class distribution: Q = N * T.
pub fn assignment_from_plan(plan: &TransportPlan) -> Array2<f64> {
    let n = plan.rows() as f64;
    plan.values.mapv(|t| t * n)
}

/// Outcome of one OT gating pass, recorded in scene provenance.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OtOutcome {
    pub iterations: usize,
    pub violation: f64,
    pub converged: bool,
    /// True when the gate fell back to the raw scores because the solver did
    /// not converge.
    pub fell_back: bool,
}

/// OT-gated scores: flattens (C, H, W) to N x C, solves, and returns
/// Q ⊙ S reshaped, clamped to [0, 1]. All-zero classes are excluded from the
/// transport (their output is zero anyway) so that single-class inputs pass
/// through unchanged. On non-convergence the input is returned unchanged with
/// `fell_back` set.
pub fn f_ot_mask(scores: &ScoreStack, cfg: &OtConfig) -> Result<(ScoreStack, OtOutcome)> {
    let (classes, height, width) = scores.values().dim();
    let n = height * width;

    // Columns that actually carry mass take part in the transport.
    let active: Vec<usize> = (0..classes)
        .filter(|&k| scores.values().index_axis(Axis(0), k).sum() > 0.0)
        .collect();
    if active.is_empty() {
        return Err(Error::DegenerateInput("all-zero score stack".into()));
    }

    let mut flat = Array2::zeros((n, active.len()));
    for (jj, &k) in active.iter().enumerate() {
        let plane = scores.values().index_axis(Axis(0), k);
        for r in 0..height {
            for c in 0..width {
                flat[(r * width + c, jj)] = plane[(r, c)];
            }
        }
    }

    let plan = solve_entropic_ot(&flat, cfg)?;
    let outcome = OtOutcome {
        iterations: plan.iterations,
        violation: plan.violation,
        converged: plan.converged,
        fell_back: !plan.converged,
    };
    if !plan.converged {
        return Ok((scores.clone(), outcome));
    }

    let gate = if cfg.scale_rows { assignment_from_plan(&plan) } else { plan.values.clone() };
    let mut out = Array3::zeros((classes, height, width));
    for (jj, &k) in active.iter().enumerate() {
        for r in 0..height {
            for c in 0..width {
                let i = r * width + c;
                out[(k, r, c)] = (gate[(i, jj)] * flat[(i, jj)]).clamp(0.0, 1.0);
            }
        }
    }
    Ok((ScoreStack::new(out)?, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_cell_plan_is_one() {
        let s = array![[0.4]];
        let plan = solve_entropic_ot(&s, &OtConfig::default()).unwrap();
        assert!((plan.values[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(plan.converged);
        assert_eq!(plan.iterations, 1);
        assert!(plan.violation < 1e-12);
    }

    #[test]
    fn constant_scores_uniform_marginals_give_uniform_plan() {
        let s = Array2::from_elem((2, 2), 0.5);
        let cfg = OtConfig { col_marginal_mode: ColMarginalMode::Uniform, ..OtConfig::default() };
        let plan = solve_entropic_ot(&s, &cfg).unwrap();
        for &t in plan.values.iter() {
            assert!((t - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_feasibility_at_convergence() {
        let s = array![[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]];
        let cfg = OtConfig::default();
        let plan = solve_entropic_ot(&s, &cfg).unwrap();
        assert!(plan.converged);
        for i in 0..plan.rows() {
            let row_sum: f64 = plan.values.row(i).sum();
            assert!((row_sum - plan.row_marginal[i]).abs() <= cfg.tol);
        }
        for j in 0..plan.cols() {
            let col_sum: f64 = plan.values.column(j).sum();
            assert!((col_sum - plan.col_marginal[j]).abs() <= cfg.tol);
        }
        let total: f64 = plan.values.sum();
        assert!((total - 1.0).abs() <= 2.0 * cfg.tol);
    }

    #[test]
    fn nan_scores_rejected() {
        let s = array![[f64::NAN]];
        assert!(matches!(solve_entropic_ot(&s, &OtConfig::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn col_marginal_uniform_mode() {
        let s = Array2::from_elem((4, 3), 0.2);
        let m = estimate_col_marginal(&s, ColMarginalMode::Uniform, 0.0).unwrap();
        assert_eq!(m, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn col_marginal_symmetric_input_is_uniform() {
        let s = Array2::from_elem((4, 2), 0.3);
        let m = estimate_col_marginal(&s, ColMarginalMode::MassProportional, 1e-3 / 2.0).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn col_marginal_three_to_one_ratio() {
        let s = array![[0.9, 0.3], [0.6, 0.2], [0.9, 0.3], [0.6, 0.2]];
        let m = estimate_col_marginal(&s, ColMarginalMode::MassProportional, 0.0).unwrap();
        assert!((m[0] - 0.75).abs() < 1e-12);
        assert!((m[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn col_marginal_floor_keeps_zero_class_positive() {
        let s = array![[0.5, 0.0], [0.5, 0.0]];
        let m = estimate_col_marginal(&s, ColMarginalMode::MassProportional, 1e-3 / 2.0).unwrap();
        assert!(m[1] > 0.0);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn col_marginal_all_zero_errors() {
        let s = Array2::zeros((3, 2));
        assert!(matches!(
            estimate_col_marginal(&s, ColMarginalMode::MassProportional, 1e-3),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn assignment_rows_sum_to_one() {
        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let cfg = OtConfig { col_marginal_mode: ColMarginalMode::Uniform, ..OtConfig::default() };
        let plan = solve_entropic_ot(&s, &cfg).unwrap();
        let q = assignment_from_plan(&plan);
        for i in 0..2 {
            let row_sum: f64 = q.row(i).sum();
            assert!((row_sum - 1.0).abs() <= 2.0 * cfg.tol);
        }
    }

    #[test]
    fn uniform_plan_assignment_is_half() {
        let plan = TransportPlan {
            values: Array2::from_elem((2, 2), 0.25),
            row_marginal: vec![0.5; 2],
            col_marginal: vec![0.5; 2],
            iterations: 1,
            violation: 0.0,
            converged: true,
            rounded: false,
        };
        let q = assignment_from_plan(&plan);
        for &v in q.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance_of_plan() {
        // Adding a constant to all scores shifts all costs equally, which the
        // potentials absorb.
        let s = array![[0.6, 0.1], [0.2, 0.5], [0.3, 0.3]];
        let cfg = OtConfig { tol: 1e-10, max_iter: 100_000, ..OtConfig::default() };
        let base = solve_with_marginals(
            &s,
            &[1.0 / 3.0; 3],
            &[0.5, 0.5],
            &cfg,
        )
        .unwrap();
        let shifted_scores = s.mapv(|v| v + 0.3);
        let shifted = solve_with_marginals(&shifted_scores, &[1.0 / 3.0; 3], &[0.5, 0.5], &cfg).unwrap();
        for (a, b) in base.values.iter().zip(shifted.values.iter()) {
            assert!((a - b).abs() <= 10.0 * cfg.tol);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let s = array![[0.9, 0.2, 0.4], [0.1, 0.7, 0.3], [0.5, 0.5, 0.9], [0.2, 0.2, 0.1]];
        let cfg = OtConfig { tol: 1e-10, max_iter: 100_000, ..OtConfig::default() };
        let plan = solve_entropic_ot(&s, &cfg).unwrap();
        // Swap columns 0 and 2.
        let mut permuted = s.clone();
        for i in 0..4 {
            permuted[(i, 0)] = s[(i, 2)];
            permuted[(i, 2)] = s[(i, 0)];
        }
        let plan_p = solve_entropic_ot(&permuted, &cfg).unwrap();
        for i in 0..4 {
            assert!((plan.values[(i, 0)] - plan_p.values[(i, 2)]).abs() < 1e-8);
            assert!((plan.values[(i, 2)] - plan_p.values[(i, 0)]).abs() < 1e-8);
            assert!((plan.values[(i, 1)] - plan_p.values[(i, 1)]).abs() < 1e-8);
        }
    }

    #[test]
    fn lambda_limit_sharpens_plan() {
        // Mass on the cost-minimizing matching grows strictly as lambda drops.
        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let mut prev = -1.0;
        for lambda in [1.0, 0.3, 0.1, 0.03] {
            let cfg = OtConfig {
                lambda,
                tol: 1e-10,
                max_iter: 200_000,
                col_marginal_mode: ColMarginalMode::Uniform,
                ..OtConfig::default()
            };
            let plan = solve_entropic_ot(&s, &cfg).unwrap();
            let diag = plan.values[(0, 0)] + plan.values[(1, 1)];
            assert!(diag > prev, "diag mass must increase as lambda decreases");
            prev = diag;
        }
    }

    #[test]
    fn f_ot_mask_single_class_is_identity() {
        let values = Array3::from_shape_vec((1, 2, 2), vec![0.9, 0.4, 0.3, 0.6]).unwrap();
        let s = ScoreStack::new(values).unwrap();
        let (out, outcome) = f_ot_mask(&s, &OtConfig::default()).unwrap();
        assert!(outcome.converged);
        for (a, b) in out.values().iter().zip(s.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn f_ot_mask_preserves_crisp_disjoint_argmax() {
        // Two spatially disjoint classes with crisp scores: gating must not
        // move the argmax on confident pixels.
        let mut values = Array3::zeros((2, 2, 4));
        for r in 0..2 {
            for c in 0..4 {
                if c < 2 {
                    values[(0, r, c)] = 0.9;
                    values[(1, r, c)] = 0.05;
                } else {
                    values[(0, r, c)] = 0.05;
                    values[(1, r, c)] = 0.9;
                }
            }
        }
        let s = ScoreStack::new(values).unwrap();
        let (out, _) = f_ot_mask(&s, &OtConfig::default()).unwrap();
        let before = crate::tensor::argmax_labels(&s);
        let after = crate::tensor::argmax_labels(&out);
        assert_eq!(before, after);
    }

    #[test]
    fn f_ot_mask_suppresses_overclaimed_class() {
        // Four pixels; class 0 claims score 0.6 everywhere, class 1 is
        // strongly present on two pixels. Mass-proportional marginals give
        // class 1 a substantial share, so on class-1 pixels the gated class-0
        // score drops relative to its input.
        let mut values = Array3::zeros((2, 1, 4));
        for c in 0..4 {
            values[(0, 0, c)] = 0.6;
        }
        values[(1, 0, 2)] = 0.95;
        values[(1, 0, 3)] = 0.95;
        let s = ScoreStack::new(values).unwrap();
        let (out, _) = f_ot_mask(&s, &OtConfig::default()).unwrap();
        assert!(out.values()[(0, 0, 2)] < s.values()[(0, 0, 2)]);
        assert!(out.values()[(0, 0, 3)] < s.values()[(0, 0, 3)]);
        // Class 1 keeps the argmax on its own pixels.
        let labels = crate::tensor::argmax_labels(&out);
        assert_eq!(labels.get(0, 2), 1);
        assert_eq!(labels.get(0, 3), 1);
    }
}
