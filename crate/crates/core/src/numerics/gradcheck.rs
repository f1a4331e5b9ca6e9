use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{GradMode, Graph, NodeId};
use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub coords_per_param: usize,
    pub mode: GradMode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            coords_per_param: 8,
            mode: GradMode::All,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(store, GradMode::None);
    let root = f(&mut g)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::InvalidArgument(
            "gradient check needs a scalar computation".into(),
        ));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of a scalar computation with central
/// finite differences and returns the largest
/// `|analytic − numeric| / (|analytic| + 1e-8)` over the sampled coordinates.
pub fn backprop_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store, opts.mode);
        let root = f(&mut g)?;
        g.backward(root)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (id, p) in store.iter() {
        let included = match opts.mode {
            GradMode::None => false,
            GradMode::Trainable => p.trainable,
            GradMode::All => true,
        };
        if !included {
            continue;
        }
        let n = p.tensor.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(id);
        for c in coords {
            let a = grad.map_or(0.0, |g| g[c]);
            if !a.is_finite() {
                return Err(Error::NonFinite { op: "backprop_check" });
            }
            let orig = work.tensor(id).data()[c];
            work.get_mut(id).tensor.data_mut()[c] = orig + opts.step;
            let plus = eval(&work, &f)?;
            work.get_mut(id).tensor.data_mut()[c] = orig - opts.step;
            let minus = eval(&work, &f)?;
            work.get_mut(id).tensor.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.coords_checked += 1;
            if (rel > report.max_rel_error || report.worst.is_none())
                && rel >= report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((p.name.clone(), c));
                }
        }
    }
    Ok(report)
}
