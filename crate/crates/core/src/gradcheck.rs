//! Central finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    pub probes: usize,
    pub seed: u64,
    /// Multiplies the reverse-mode gradient before comparison. Only useful
    /// for testing the checker itself.
    pub gradient_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            probes: 32,
            seed: 0,
            gradient_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Coordinate with the largest error.
    pub worst: Option<(String, usize)>,
}

fn evaluate<F>(f: &F, params: &ParamMap) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamMap) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("gradient check needs a scalar function"));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(
            "function value during gradient check".into(),
        ));
    }
    Ok(v)
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        GradCheck {
            step,
            ..Self::default()
        }
    }

    /// `f` records a scalar-valued forward pass on the supplied graph,
    /// registering every entry of `params` it uses via [`Graph::param`].
    pub fn run<F>(&self, f: F, params: &ParamMap) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParamMap) -> Result<Var>,
    {
        if !(self.step > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        let mut g = Graph::new();
        let out = f(&mut g, params)?;
        if !g.value(out).data()[0].is_finite() {
            return Err(Error::NonFinite(
                "function value during gradient check".into(),
            ));
        }
        let grads = g.backward(out, None)?;

        let coords = self.select(params);
        let mut probe_params = params.clone();
        let mut max_err = 0.0f64;
        let mut worst = None;
        for (name, idx) in &coords {
            let base = params[name].data()[*idx];
            probe_params.get_mut(name).unwrap().data_mut()[*idx] = base + self.step;
            let fp = evaluate(&f, &probe_params)?;
            probe_params.get_mut(name).unwrap().data_mut()[*idx] = base - self.step;
            let fm = evaluate(&f, &probe_params)?;
            probe_params.get_mut(name).unwrap().data_mut()[*idx] = base;

            let fd = (fp - fm) / (2.0 * self.step);
            let ad = grads.get(name).map(|t| t.data()[*idx]).unwrap_or(0.0) * self.gradient_scale;
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((name.clone(), *idx));
            }
        }
        Ok(GradCheckReport {
            max_rel_error: max_err,
            probes: coords.len(),
            worst,
        })
    }

    /// All coordinates if there are at most `probes` of them; otherwise one
    /// random coordinate per tensor (while the budget allows) topped up with
    /// random coordinates overall.
    fn select(&self, params: &ParamMap) -> Vec<(String, usize)> {
        let all: Vec<(String, usize)> = params
            .iter()
            .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
            .collect();
        if all.len() <= self.probes {
            return all;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut chosen = Vec::with_capacity(self.probes);
        let mut names: Vec<&String> = params.keys().collect();
        names.shuffle(&mut rng);
        for name in names.into_iter().take(self.probes / 2) {
            let n = params[name].len();
            let idx = *(0..n).collect::<Vec<_>>().choose(&mut rng).unwrap();
            chosen.push((name.clone(), idx));
        }
        let mut rest: Vec<&(String, usize)> = all.iter().filter(|c| !chosen.contains(c)).collect();
        rest.shuffle(&mut rng);
        let need = self.probes - chosen.len();
        chosen.extend(rest.into_iter().take(need).cloned());
        chosen
    }
}
