use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences `(f(x+eps) - f(x-eps)) / (2 eps)` at every input
/// coordinate.
///
/// `f` receives a fresh graph and one trainable leaf per input, and must
/// return a `[1×1]` node.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = point.to_vec();
    for (i, t) in point.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let r = grad_check(|g, v| g.mul(v[0], v[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let r = grad_check(|g, v| Ok(g.sigmoid(v[0])), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let r = grad_check(
            |g, v| {
                let e = g.exp(v[0]);
                Ok(g.scale(e, f64::INFINITY))
            },
            &[Tensor::scalar(0.0)],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    /// Every differentiable op on 20 random small inputs.
    #[test]
    fn every_op_passes_on_random_inputs() {
        type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
        let reduce = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
            // weight the outputs so that reductions of symmetric functions
            // still have non-trivial gradients
            let shape = g.shape(x).to_vec();
            let w: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|i| 0.3 + 0.17 * i as f64)
                .collect();
            let w = g.constant(Tensor::new(&shape, w)?);
            let p = g.mul(x, w)?;
            g.sum(p, Axis::All)
        };
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
            ("transpose", vec![vec![3, 2]], |g, v| g.transpose(v[0])),
            ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
            ("sub", vec![vec![2, 3], vec![1, 1]], |g, v| g.sub(v[0], v[1])),
            ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
            ("scale", vec![vec![2, 3]], |g, v| Ok(g.scale(v[0], -1.7))),
            ("add_row", vec![vec![3, 2], vec![1, 2]], |g, v| g.add_row(v[0], v[1])),
            ("sigmoid", vec![vec![2, 3]], |g, v| Ok(g.sigmoid(v[0]))),
            ("gelu", vec![vec![2, 3]], |g, v| Ok(g.gelu(v[0]))),
            ("exp", vec![vec![2, 3]], |g, v| Ok(g.exp(v[0]))),
            ("log", vec![vec![2, 3]], |g, v| {
                let e = g.exp(v[0]);
                g.log(e)
            }),
            ("sum_rows", vec![vec![3, 2]], |g, v| g.sum(v[0], Axis::Rows)),
            ("mean_cols", vec![vec![3, 2]], |g, v| g.mean(v[0], Axis::Cols)),
            ("softmax", vec![vec![2, 4]], |g, v| g.softmax(v[0], Axis::Cols)),
            ("softmax_rows", vec![vec![3, 2]], |g, v| g.softmax(v[0], Axis::Rows)),
            ("layer_norm", vec![vec![3, 4], vec![1, 4], vec![1, 4]], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
            ("gather", vec![vec![4, 2]], |g, v| g.gather_rows(v[0], &[3, 1, 3])),
            ("slice_cols", vec![vec![2, 5]], |g, v| g.slice_cols(v[0], 1, 3)),
            ("slice_rows", vec![vec![4, 2]], |g, v| g.slice_rows(v[0], 1, 2)),
            ("concat_cols", vec![vec![2, 2], vec![2, 3]], |g, v| {
                g.concat_cols(&[v[0], v[1]])
            }),
            ("concat_rows", vec![vec![1, 3], vec![2, 3]], |g, v| {
                g.concat_rows(&[v[0], v[1]])
            }),
            ("l2_normalize", vec![vec![3, 4]], |g, v| g.l2_normalize_rows(v[0])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, shapes, build) in cases {
            for _ in 0..20 {
                let point: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
                let r = grad_check(
                    |g, v| {
                        let y = build(g, v)?;
                        reduce(g, y)
                    },
                    &point,
                    1e-5,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
            }
        }
    }

    #[test]
    fn fused_losses_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let logits = Tensor::randn(&[3, 4], 2.0, &mut rng);
            let targets = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
            let r = grad_check(|g, v| g.bce_with_logits(v[0], targets.clone()), std::slice::from_ref(&logits), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "bce {r:?}");
            let r = grad_check(|g, v| g.cross_entropy(v[0], &[1, 0, 3], false), std::slice::from_ref(&logits), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "ce {r:?}");
            let square = Tensor::randn(&[4, 4], 2.0, &mut rng);
            let r = grad_check(|g, v| g.cross_entropy(v[0], &[1, 0, 3, 2], true), &[square], 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "masked ce {r:?}");
        }
    }
}
