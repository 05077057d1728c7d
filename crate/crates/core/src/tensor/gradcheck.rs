//! Central finite-difference check of analytic gradients.

use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error so that
    /// near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub finite: bool,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tol: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| !l.passed)
    }
}

fn evaluate<F>(leaves: &[(String, Tensor)], builder: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = builder(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(TensorError::SeedNotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the analytic gradient of `builder` with respect to every named
/// leaf against central differences. The builder is re-run from scratch for
/// every perturbation, so it must be a pure function of the leaf values.
pub fn gradcheck<F>(leaves: &[(String, Tensor)], builder: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = builder(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(leaves.len());
    for (li, (name, value)) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[li]);
        let mut report = LeafReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            finite: true,
            passed: true,
        };
        for i in 0..value.len() {
            let mut shifted = leaves.to_vec();
            let mut bumped = value.data().to_vec();
            bumped[i] = value.data()[i] + opts.step;
            shifted[li].1 = Tensor::new(value.shape().to_vec(), bumped.clone())?;
            let plus = evaluate(&shifted, &builder)?;
            bumped[i] = value.data()[i] - opts.step;
            shifted[li].1 = Tensor::new(value.shape().to_vec(), bumped)?;
            let minus = evaluate(&shifted, &builder)?;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                report.finite = false;
                report.max_rel_error = f64::INFINITY;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
                break;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error || i == 0 {
                report.max_rel_error = rel;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = report.finite && report.max_rel_error < opts.tol;
        reports.push(report);
    }
    Ok(GradcheckReport {
        tol: opts.tol,
        leaves: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes() {
        let x = Tensor::new(vec![3, 1], vec![0.3, -1.2, 0.7]).unwrap();
        let m = Tensor::from_rows(&[vec![2.0, 0.5, -1.0], vec![0.1, 1.0, 0.3], vec![-0.4, 0.2, 3.0]]).unwrap();
        let leaves = vec![("x".to_string(), x), ("M".to_string(), m)];
        let report = gradcheck(
            &leaves,
            |g, v| {
                let xt = g.transpose(v[0])?;
                let mx = g.matmul(v[1], v[0])?;
                let q = g.matmul(xt, mx)?;
                g.sum(q)
            },
            GradcheckOptions::with_tol(1e-6),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let leaves = vec![("x".to_string(), Tensor::vector(vec![1.0, 2.0]))];
        let mut g = Graph::new();
        let x = g.param(leaves[0].1.clone());
        let c = g.constant(Tensor::scalar(4.0));
        let zero = g.scale(x, 0.0).unwrap();
        let s = g.sum(zero).unwrap();
        let y = g.add(s, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 0.0));

        let report = gradcheck(
            &leaves,
            |g, v| {
                let z = g.scale(v[0], 0.0)?;
                g.sum(z)
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn non_finite_is_reported_by_leaf() {
        let leaves = vec![("x".to_string(), Tensor::vector(vec![0.0, 1.0]))];
        let report = gradcheck(
            &leaves,
            |g, v| {
                let l = g.log(v[0])?;
                g.sum(l)
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        let bad = report.failures().next().unwrap();
        assert_eq!(bad.name, "x");
        assert!(!bad.finite);
    }
}
