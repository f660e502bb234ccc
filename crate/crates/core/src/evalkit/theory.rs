use serde::{Deserialize, Serialize};

use super::EvalError;

/// Joint distribution P(molecule g, context c, label value y_k) stored as
/// `probs[g][c][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub y_values: Vec<f64>,
    pub probs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcessRisk {
    /// Squared-loss risk of E[y | g, c].
    pub loss_ctx: f64,
    /// Squared-loss risk of E[y | g], the best predictor that ignores c.
    pub loss_static: f64,
    pub excess: f64,
    /// E_g[ Var_{c|g}( E[y | g, c] ) ].
    pub variance_term: f64,
}

/// Brute-force risks of the optimal context-aware and context-free
/// predictors under squared loss.
pub fn excess_risk_decomposition(joint: &JointTable) -> Result<ExcessRisk, EvalError> {
    let total: f64 = joint.probs.iter().flatten().flatten().sum();
    let negative = joint.probs.iter().flatten().flatten().any(|&p| p < 0.0 || !p.is_finite());
    if negative || (total - 1.0).abs() > 1e-9 {
        return Err(EvalError::NotNormalized(total));
    }
    let k = joint.y_values.len();
    for row in joint.probs.iter().flatten() {
        if row.len() != k {
            return Err(EvalError::Shape(row.len(), k));
        }
    }
    let y = &joint.y_values;
    let (mut loss_ctx, mut loss_static, mut variance_term) = (0.0, 0.0, 0.0);
    for g in &joint.probs {
        let p_gc: Vec<f64> = g.iter().map(|c| c.iter().sum()).collect();
        let p_g: f64 = p_gc.iter().sum();
        if p_g == 0.0 {
            continue;
        }
        let f_gc: Vec<f64> = g
            .iter()
            .zip(&p_gc)
            .map(|(c, &pc)| {
                if pc > 0.0 {
                    c.iter().zip(y).map(|(p, v)| p * v).sum::<f64>() / pc
                } else {
                    0.0
                }
            })
            .collect();
        let s_g = f_gc.iter().zip(&p_gc).map(|(f, p)| f * p).sum::<f64>() / p_g;
        for (ci, c) in g.iter().enumerate() {
            for (p, v) in c.iter().zip(y) {
                loss_ctx += p * (v - f_gc[ci]).powi(2);
                loss_static += p * (v - s_g).powi(2);
            }
            variance_term += p_gc[ci] * (f_gc[ci] - s_g).powi(2);
        }
    }
    Ok(ExcessRisk {
        loss_ctx,
        loss_static,
        excess: loss_static - loss_ctx,
        variance_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_context_sign_flip() {
        let t = JointTable {
            y_values: vec![-1.0, 1.0],
            probs: vec![vec![vec![0.0, 0.5], vec![0.5, 0.0]]],
        };
        let r = excess_risk_decomposition(&t).unwrap();
        assert_eq!((r.loss_ctx, r.loss_static, r.variance_term), (0.0, 1.0, 1.0));
    }

    #[test]
    fn context_free_labels_have_no_excess() {
        let t = JointTable {
            y_values: vec![0.0, 1.0],
            probs: vec![
                vec![vec![0.1, 0.1], vec![0.15, 0.15]],
                vec![vec![0.2, 0.05], vec![0.2, 0.05]],
            ],
        };
        let r = excess_risk_decomposition(&t).unwrap();
        assert!(r.excess.abs() < 1e-15 && r.variance_term.abs() < 1e-15);
    }

    #[test]
    fn rejects_unnormalized() {
        let t = JointTable {
            y_values: vec![0.0],
            probs: vec![vec![vec![0.5]]],
        };
        assert!(matches!(excess_risk_decomposition(&t), Err(EvalError::NotNormalized(_))));
    }
}
