//! Finite-difference verification of reverse-mode gradients.

use ndarray::Array2;

use crate::graph::{Graph, Var};
use crate::{Error, Result};

/// Compares analytic gradients against central finite differences at 64-bit
/// precision and returns the maximum relative error over all parameter
/// elements: `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// `f` must rebuild the same computation on every call (frozen masks, fixed
/// seeds); it is invoked `2 * total_elements + 1` times.
pub fn grad_check<F>(f: F, params: &mut [Array2<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArg(format!(
            "grad_check eps {eps} outside [1e-6, 1e-4]"
        )));
    }

    let eval = |params: &[Array2<f64>]| -> (f64, Option<Vec<Array2<f64>>>, f64) {
        let g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&g, &vars);
        let value = g.scalar_value(loss);
        (value, None, {
            let _ = &vars;
            0.0
        })
    };

    // analytic pass
    let g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&g, &vars);
    let base = g.scalar_value(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check: loss is non-finite".into()));
    }
    let grads = g.backward(loss);
    let analytic: Vec<Array2<f64>> = vars.iter().map(|&v| grads.get(&g, v)).collect();

    // determinism guard: a second evaluation must reproduce the loss exactly
    let (second, _, _) = eval(params);
    if second != base {
        return Err(Error::InvalidArg(
            "grad_check: function is not deterministic across evaluations".into(),
        ));
    }

    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        for idx in 0..params[pi].len() {
            let flat = |p: &mut Array2<f64>, delta: f64| {
                let v = p.as_slice_mut().expect("contiguous");
                v[idx] += delta;
            };
            flat(&mut params[pi], eps);
            let (up, _, _) = eval(params);
            flat(&mut params[pi], -2.0 * eps);
            let (down, _, _) = eval(params);
            flat(&mut params[pi], eps);
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[pi].as_slice().expect("contiguous")[idx];
            // see grad_check_model: differences below the central-difference
            // roundoff scale are not scored
            let diff = (a - fd).abs();
            if diff < 1e-7 {
                continue;
            }
            let rel = diff / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Same comparison for a whole network: `f` builds a scalar loss from the
/// network's own shared parameters, and every trainable element is perturbed
/// through the `HasParams` listing.
///
/// `f` must be deterministic across calls (frozen masks, fixed seeds). The
/// finite-difference side re-runs it `2 * total_elements` times, so keep the
/// network tiny.
pub fn grad_check_model<M, F>(model: &mut M, f: F, eps: f64) -> Result<f64>
where
    M: crate::layers::HasParams<f64>,
    F: Fn(&mut M, &Graph<f64>) -> Result<Var>,
{
    use std::rc::Rc;

    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArg(format!(
            "grad_check_model eps {eps} outside [1e-6, 1e-4]"
        )));
    }

    // analytic pass; leaf_rc dedup maps every parameter to one tape node
    let g: Graph<f64> = Graph::new();
    let loss = f(&mut *model, &g)?;
    let base = g.scalar_value(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check_model: loss is non-finite".into()));
    }
    let grads = g.backward(loss);
    let analytic: Vec<Array2<f64>> = {
        let mut out = Vec::new();
        model.visit("", &mut out);
        out.iter()
            .map(|(_, p)| grads.get(&g, g.leaf_rc(p.value.clone())))
            .collect()
    };
    drop(g);

    let eval = |model: &mut M| -> Result<f64> {
        let g: Graph<f64> = Graph::new();
        let loss = f(model, &g)?;
        Ok(g.scalar_value(loss))
    };
    if eval(model)? != base {
        return Err(Error::InvalidArg(
            "grad_check_model: function is not deterministic across evaluations".into(),
        ));
    }

    let mut max_rel = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        for idx in 0..a.len() {
            let nudge = |model: &mut M, delta: f64| {
                let mut out = Vec::new();
                model.visit("", &mut out);
                let arr = Rc::make_mut(&mut out[k].1.value);
                arr.as_slice_mut().expect("contiguous")[idx] += delta;
            };
            nudge(model, eps);
            let up = eval(model)?;
            nudge(model, -2.0 * eps);
            let down = eval(model)?;
            nudge(model, eps);
            let fd = (up - down) / (2.0 * eps);
            let av = a.as_slice().expect("contiguous")[idx];
            // central differences carry roundoff noise of roughly
            // ulp(loss)/eps; differences below that scale say nothing
            // about the analytic gradient, so they are not scored
            let diff = (av - fd).abs();
            if diff < 1e-7 {
                continue;
            }
            let rel = diff / av.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_is_exact_to_fd_order() {
        // f(x) = sum(x^2), analytic 2x, central differences exact for quadratics
        let mut params = vec![array![[3.0]]];
        let err = grad_check(
            |g, vars| {
                let sq = g.square(vars[0]);
                g.sum_all(sq)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn model_variant_matches_closure_variant() {
        use crate::layers::Linear;
        use crate::rng::RngStream;
        let mut rng = RngStream::new(4).derive("gc");
        let mut lin: Linear<f64> = Linear::new(&mut rng, 3, 2);
        let x = ndarray::Array2::from_shape_fn((2, 3), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64);
        let err = grad_check_model(
            &mut lin,
            |lin, g| {
                let xv = g.constant(x.clone());
                Ok(g.sum_all(g.square(lin.forward(g, xv))))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let mut params = vec![array![[1.0]]];
        assert!(grad_check(|g, vars| g.sum_all(vars[0]), &mut params, 1e-2).is_err());
    }
}
