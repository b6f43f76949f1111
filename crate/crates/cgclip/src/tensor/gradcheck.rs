//! Central-difference validation of reverse-mode gradients.

use super::{Precision, Result, Tape, Tensor, Var};

/// Worst-coordinate comparison between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_err <= rtol
    }
}

/// Checks `d f / d x` for a scalar-valued tape function `f`.
///
/// The analytic side runs `f` once on an `F64` tape and calls `backward`; the
/// numeric side evaluates `(f(x + eps·e) - f(x - eps·e)) / (2 eps)` per
/// coordinate. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new(Precision::F64);
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let leaf = tape.leaf(t.clone());
        let root = f(&tape, leaf)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut perturbed = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        perturbed.data_mut()[i] = orig + eps;
        let up = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig - eps;
        let down = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// Convenience wrapper returning only the max relative error.
pub fn grad_check_value<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check(f, x, eps).map(|r| r.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exactly_linear() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(|tape, v| tape.sum_all(v), &x, 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-10, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_matches_differences() {
        let x = Tensor::new(vec![5], vec![0.2, -0.7, 1.3, 0.05, -0.4]).unwrap();
        // -log softmax(x)[2]
        let report = grad_check(
            |tape, v| {
                let ls = tape.log_softmax(v, 0)?;
                let picked = tape.slice_rows(ls, 2, 1)?;
                let s = tape.sum_all(picked)?;
                tape.scale(s, -1.0)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
    }
}
