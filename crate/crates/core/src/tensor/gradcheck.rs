use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, Tensor, TensorError, Var};

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat offset)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Sampling and step settings for [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub coords_per_param: usize,
    pub seed: u64,
    /// Only coordinates with `|analytic| >= min_magnitude * max |analytic|`
    /// of their tensor are eligible. Zero makes every coordinate eligible.
    pub min_magnitude: f64,
}

/// Check `f`'s backward gradients against central differences with step `h`.
///
/// `f` builds a scalar loss on a fresh graph from leaves bound to `params`.
/// Up to `coords_per_param` coordinates are sampled per parameter (all of them
/// when the tensor is smaller); the error per coordinate is
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let opts = GradCheckOptions {
        h,
        coords_per_param,
        seed,
        min_magnitude: 0.0,
    };
    grad_check_with(f, params, &opts)
}

/// [`grad_check`] restricted to coordinates whose gradient is large enough
/// for a central difference in `T` to resolve.
pub fn grad_check_with<T, F>(f: F, params: &[Tensor<T>], opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let GradCheckOptions {
        h,
        coords_per_param,
        seed,
        min_magnitude,
    } = *opts;
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(graph);

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let l = f(&mut g, &vs)?;
        Ok(g.value(l).item().as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, param) in params.iter().enumerate() {
        let a = analytic[pi].data();
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        let eligible: Vec<usize> = (0..param.numel())
            .filter(|&i| a[i].as_f64().abs() >= min_magnitude * peak)
            .collect();
        let picks: Vec<usize> = if eligible.len() <= coords_per_param {
            eligible
        } else {
            index::sample(&mut rng, eligible.len(), coords_per_param)
                .into_iter()
                .map(|j| eligible[j])
                .collect()
        };
        for offset in picks {
            let orig = param.data()[offset];
            // divide by the step actually representable in T
            let up = T::lit(orig.as_f64() + h);
            let down = T::lit(orig.as_f64() - h);
            work[pi].data_mut()[offset] = up;
            let plus = eval(&work)?;
            work[pi].data_mut()[offset] = down;
            let minus = eval(&work)?;
            work[pi].data_mut()[offset] = orig;

            let cd = (plus - minus) / (up.as_f64() - down.as_f64());
            let a = analytic[pi].data()[offset].as_f64();
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.coords_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, offset));
            }
        }
    }
    Ok(report)
}
