//! One-step supervised training with the relative ℓ2 loss, Adam and a
//! multi-step learning-rate decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::ParamMap;
use crate::model::{mswt_forward, Bound, Mswt};
use crate::rollout::{StepOperator, Trajectory};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by `gamma`;
    /// `None` places them at 50% and 75% of `iterations`.
    pub milestones: Option<Vec<usize>>,
    pub gamma: f64,
    pub loss_eps: f64,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 16,
            iterations: 5000,
            milestones: None,
            gamma: 0.5,
            loss_eps: 1e-8,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn resolved_milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => vec![self.iterations / 2, self.iterations * 3 / 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.resolved_milestones();
        if m.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "milestones {m:?} must be strictly increasing"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "decay factor {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.loss_eps > 0.0) || !(self.eps_adam > 0.0) {
            return Err(Error::config("loss and Adam epsilons must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// `lr₀ · γ^{#milestones ≤ iter}`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg
        .resolved_milestones()
        .iter()
        .filter(|&&m| m <= iter)
        .count();
    cfg.learning_rate * cfg.gamma.powi(decays as i32)
}

/// `‖pred − target‖₂ / (‖target‖₂ + ε)` for one sample, on the tape.
pub fn relative_l2_loss_var(g: &mut Graph, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::invalid("loss epsilon must be positive"));
    }
    let denom = target.norm_l2() + eps;
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let n = g.norm(diff);
    Ok(g.scale(n, 1.0 / denom))
}

/// Batch-averaged relative ℓ2 loss of plain tensors.
pub fn relative_l2_loss(pred: &[Tensor], target: &[Tensor], eps: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "loss over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("loss epsilon must be positive"));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        total += p.sub(t)?.norm_l2() / (t.norm_l2() + eps);
    }
    Ok(total / pred.len() as f64)
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamMap) -> Self {
        let zeros: ParamMap = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. Parameters are untouched if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &ParamMap,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() || state.m.get(name).map(Tensor::shape) != Some(p.shape()) {
            return Err(Error::shape(format!(
                "optimizer state does not match parameter {name}"
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

/// Per-channel z-score statistics of the state channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population mean and standard deviation over every grid point of
    /// every state.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        let mut count = 0usize;
        for s in states {
            let (_, _, c) = s.hwc()?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("states disagree on channel count"));
            }
            for px in s.data().chunks(c) {
                for (ch, &v) in px.iter().enumerate() {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += s.len() / c;
        }
        if count == 0 {
            return Err(Error::invalid("normalization of an empty set of states"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        if let Some(ch) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!("channel {ch} has zero variance")));
        }
        Ok(Normalization { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, u: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, _, c) = u.hwc()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "state has {c} channels, normalization has {}",
                self.channels()
            )));
        }
        let mut out = u.clone();
        for px in out.data_mut().chunks_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = f(*v, self.mean[ch], self.std[ch]);
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, u: &Tensor) -> Result<Tensor> {
        self.apply(u, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, u: &Tensor) -> Result<Tensor> {
        self.apply(u, |v, m, s| v * s + m)
    }
}

/// One-step pairs `(U_t, U_{t+1})` drawn from consecutive snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    snapshots: Vec<Vec<Tensor>>,
    pairs: Vec<(usize, usize)>,
    coords: Tensor,
    norm: Normalization,
}

impl PairDataset {
    /// All consecutive pairs of the given trajectories; normalization is
    /// fitted on their snapshots.
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one trajectory"))?;
        let snapshots: Vec<Vec<Tensor>> = trajectories.iter().map(|t| t.states.clone()).collect();
        for t in trajectories {
            if t.coords != first.coords || t.states[0].shape() != first.states[0].shape() {
                return Err(Error::shape("trajectories disagree on grid or coordinates"));
            }
        }
        let norm = Normalization::fit(snapshots.iter().flatten())?;
        Self::assemble(snapshots, first.coords.clone(), norm)
    }

    pub fn from_pairs(pairs: Vec<(Tensor, Tensor)>, coords: Tensor) -> Result<Self> {
        let snapshots: Vec<Vec<Tensor>> = pairs.into_iter().map(|(a, b)| vec![a, b]).collect();
        let norm = Normalization::fit(snapshots.iter().flatten())?;
        Self::assemble(snapshots, coords, norm)
    }

    fn assemble(snapshots: Vec<Vec<Tensor>>, coords: Tensor, norm: Normalization) -> Result<Self> {
        let shape = snapshots
            .first()
            .and_then(|s| s.first())
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::invalid("empty dataset"))?;
        let (h, w, _) = coords.hwc()?;
        if shape.len() != 3 || shape[..2] != [h, w] {
            return Err(Error::shape(format!(
                "states {shape:?} do not match coordinate grid {h}×{w}"
            )));
        }
        let mut pairs = Vec::new();
        for (i, traj) in snapshots.iter().enumerate() {
            if traj.iter().any(|s| s.shape() != shape.as_slice()) {
                return Err(Error::shape(format!(
                    "trajectory {i} has mismatched states"
                )));
            }
            pairs.extend((0..traj.len().saturating_sub(1)).map(|t| (i, t)));
        }
        if pairs.is_empty() {
            return Err(Error::invalid("dataset has no one-step pairs"));
        }
        Ok(PairDataset {
            snapshots,
            pairs,
            coords,
            norm,
        })
    }

    /// Replaces the fitted statistics, e.g. with those stored in a checkpoint.
    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.channels() != self.norm.channels() {
            return Err(Error::shape("normalization channel count mismatch"));
        }
        self.norm = norm;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&Tensor, &Tensor) {
        let (tr, t) = self.pairs[i];
        (&self.snapshots[tr][t], &self.snapshots[tr][t + 1])
    }

    /// `(trajectory, time)` of every pair.
    pub fn pair_index(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn state_channels(&self) -> usize {
        self.norm.channels()
    }

    /// Normalized state channels followed by raw coordinate channels.
    pub fn model_input(&self, u: &Tensor) -> Result<Tensor> {
        model_input(&self.norm, u, &self.coords)
    }
}

pub fn model_input(norm: &Normalization, u: &Tensor, coords: &Tensor) -> Result<Tensor> {
    Tensor::concat_channels(&[&norm.normalize(u)?, coords])
}

/// A trained model with its normalization, stepping in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub model: Mswt,
    pub norm: Normalization,
}

impl StepOperator for Surrogate {
    fn step(&self, state: &Tensor, coords: &Tensor) -> Result<Tensor> {
        let x = model_input(&self.norm, state, coords)?;
        self.norm.denormalize(&self.model.predict(&x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Exact position of the batch-sampling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Resumable training loop state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Mswt,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Mswt, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params.map());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            optimizer,
            iteration: 0,
            history: Vec::new(),
            rng,
        })
    }

    pub fn resume(
        model: Mswt,
        config: TrainConfig,
        optimizer: OptimizerState,
        rng: RngState,
        history: Vec<LossRecord>,
    ) -> Result<Self> {
        config.validate()?;
        let iteration = history.len();
        if optimizer.step as usize != iteration {
            return Err(Error::config(format!(
                "optimizer has taken {} steps but history has {iteration} entries",
                optimizer.step
            )));
        }
        Ok(Trainer {
            model,
            config,
            optimizer,
            iteration,
            history,
            rng: rng.restore(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::of(&self.rng)
    }

    fn check_data(&self, data: &PairDataset) -> Result<()> {
        let cfg = &self.model.config;
        let (h, w, cv) = data.coords().hwc()?;
        if (h, w) != (cfg.height, cfg.width)
            || data.state_channels() + cv != cfg.in_channels
            || data.state_channels() != cfg.out_channels
        {
            return Err(Error::config(format!(
                "dataset ({h}×{w}, {} state + {cv} coordinate channels) does not fit the model",
                data.state_channels()
            )));
        }
        Ok(())
    }

    /// One mini-batch iteration.
    pub fn step(&mut self, data: &PairDataset) -> Result<LossRecord> {
        self.check_data(data)?;
        let b = self.config.batch_size;
        let picks: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..data.len())).collect();
        let mut grads: ParamMap = ParamMap::new();
        let mut loss = 0.0;
        for &i in &picks {
            let (u, next) = data.pair(i);
            let x = data.model_input(u)?;
            let target = data.normalization().normalize(next)?;
            let mut g = Graph::new();
            let p = Bound::all(&mut g, self.model.params.map());
            let xv = g.constant(x);
            let y = mswt_forward(&mut g, &self.model.config, &p, xv)?;
            let l = relative_l2_loss_var(&mut g, y, &target, self.config.loss_eps)?;
            let l = g.scale(l, 1.0 / b as f64);
            loss += g.value(l).data()[0];
            for (name, t) in g.backward(l, None)?.into_named() {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {}",
                self.iteration
            )));
        }
        let lr = lr_at(self.iteration, &self.config);
        adam_step(
            self.model.params.map_mut(),
            &grads,
            &mut self.optimizer,
            lr,
            &self.config,
        )?;
        let rec = LossRecord {
            iteration: self.iteration,
            lr,
            loss,
        };
        self.iteration += 1;
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs until `self.iteration == until`, calling `after` after each step.
    pub fn run_until(
        &mut self,
        data: &PairDataset,
        until: usize,
        mut after: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < until {
            self.step(data)?;
            after(self)?;
        }
        Ok(())
    }
}

/// Trains for `cfg.iterations` and returns the model with its loss history.
pub fn train(
    model: Mswt,
    data: &PairDataset,
    cfg: &TrainConfig,
) -> Result<(Mswt, Vec<LossRecord>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run_until(data, cfg.iterations, |_| Ok(()))?;
    Ok((t.model, t.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::model::ModelConfig;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            in_channels: 3,
            out_channels: 1,
            patch: 1,
            widths: vec![8],
            window: 2,
            heads: 2,
            ffn_ratio: 2,
            conv_k: 3,
            blocks_per_scale: 1,
            ln_eps: 1e-5,
        }
    }

    fn coords(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w, 2], |k| {
            let (px, ch) = (k / 2, k % 2);
            if ch == 0 {
                (px % w) as f64 / w as f64
            } else {
                (px / w) as f64 / h as f64
            }
        })
    }

    #[test]
    fn loss_closed_forms() {
        let u = random(&[4, 4, 1], 1);
        assert_eq!(
            relative_l2_loss(std::slice::from_ref(&u), std::slice::from_ref(&u), 1e-8).unwrap(),
            0.0
        );
        let unit = u.scale(1.0 / u.norm_l2());
        let zero = Tensor::zeros(&[4, 4, 1]);
        let l = relative_l2_loss(
            std::slice::from_ref(&zero),
            std::slice::from_ref(&unit),
            1e-15,
        )
        .unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        let l = relative_l2_loss(&[unit.scale(2.0)], std::slice::from_ref(&unit), 1e-300).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        let big = u.scale(1e3);
        assert!(relative_l2_loss(&[zero], &[big], 1e-8).unwrap() < 1.0);
        assert!(relative_l2_loss(std::slice::from_ref(&u), std::slice::from_ref(&u), 0.0).is_err());
        assert!(
            relative_l2_loss(std::slice::from_ref(&u), &[Tensor::zeros(&[4, 4, 2])], 1e-8).is_err()
        );
        let pair =
            relative_l2_loss(&[u.clone(), zero_like(&u)], &[u.clone(), u.clone()], 1e-300).unwrap();
        assert!((pair - 0.5).abs() < 1e-14);
    }

    fn zero_like(t: &Tensor) -> Tensor {
        Tensor::zeros(t.shape())
    }

    #[test]
    fn loss_gradient() {
        let target = random(&[4, 4, 2], 2);
        let mut p = ParamMap::new();
        p.insert("pred".into(), random(&[4, 4, 2], 3));
        let t2 = target.clone();
        let f = move |g: &mut Graph, p: &ParamMap| -> Result<Var> {
            let x = g.param("pred", p["pred"].clone());
            relative_l2_loss_var(g, x, &t2, 1e-8)
        };
        let rep = GradCheck::with_step(1e-5).run(f, &p).unwrap();
        assert!(rep.max_rel_error <= 1e-5, "{rep:?}");

        let mut g = Graph::new();
        let x = g.param("pred", target.clone());
        let l = relative_l2_loss_var(&mut g, x, &target, 1e-8).unwrap();
        let grads = g.backward(l, None).unwrap();
        assert_eq!(grads.get("pred").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn schedule() {
        let mut c = TrainConfig {
            milestones: Some(vec![10, 20]),
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(9, &c), 1e-3);
        assert_eq!(lr_at(15, &c), 5e-4);
        assert_eq!(lr_at(25, &c), 2.5e-4);
        c.milestones = None;
        c.iterations = 100;
        assert_eq!(c.resolved_milestones(), [50, 75]);
        c.milestones = Some(vec![20, 10]);
        assert!(c.validate().is_err());
        c.milestones = None;
        c.gamma = 1.5;
        assert!(c.validate().is_err());
    }

    fn scalar_params(v: f64) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut p = scalar_params(1.0);
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &scalar_params(g), &mut s, 0.01, &cfg).unwrap();
            let expect = 1.0 - 0.01 * g / (g.abs() + cfg.eps_adam);
            assert!((p["w"].data()[0] - expect).abs() < 1e-15);
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn adam_zero_gradient_and_scale_invariance() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &scalar_params(0.5), &mut s, 0.01, &cfg).unwrap();
        let (before, m, v) = (p["w"].data()[0], s.m["w"].data()[0], s.v["w"].data()[0]);
        adam_step(&mut p, &scalar_params(0.0), &mut s, 0.01, &cfg).unwrap();
        assert!(s.m["w"].data()[0].abs() < m.abs() && s.v["w"].data()[0] < v);
        assert!(s.v["w"].data()[0] >= 0.0);
        // Bias-corrected momentum keeps moving the parameter; with a fresh
        // state a zero gradient leaves it fixed.
        let mut fresh = OptimizerState::new(&p);
        let mut q = p.clone();
        adam_step(&mut q, &scalar_params(0.0), &mut fresh, 0.01, &cfg).unwrap();
        assert_eq!(q, p);
        assert_ne!(before, p["w"].data()[0]);

        let grads = {
            let mut m = ParamMap::new();
            m.insert("a".into(), random(&[3, 4], 1));
            m.insert("b".into(), random(&[5], 2));
            m
        };
        let base: ParamMap = grads
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let step = |scale: f64| {
            let mut p = base.clone();
            let mut s = OptimizerState::new(&p);
            let g: ParamMap = grads
                .iter()
                .map(|(n, t)| (n.clone(), t.scale(scale)))
                .collect();
            adam_step(&mut p, &g, &mut s, 0.01, &cfg).unwrap();
            p
        };
        let (a, b) = (step(1.0), step(10.0));
        for n in ["a", "b"] {
            assert!(b[n].max_abs_diff(&a[n]) <= 1e-6 * a[n].max_abs());
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(1.0);
        p.insert("v".into(), Tensor::scalar(2.0));
        let mut s = OptimizerState::new(&p);
        let mut g = scalar_params(0.1);
        g.insert("v".into(), Tensor::scalar(f64::NAN));
        let err = adam_step(&mut p, &g, &mut s, 0.01, &cfg).unwrap_err();
        assert!(err.to_string().contains("parameter v"), "{err}");
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn normalization_roundtrip() {
        let states: Vec<Tensor> = (0..3)
            .map(|s| random(&[5, 4, 2], s).map(|v| 3.0 * v + 7.0))
            .collect();
        let n = Normalization::fit(&states).unwrap();
        assert!(n.mean.iter().all(|m| (m - 7.0).abs() < 1.0));
        for s in &states {
            let back = n.denormalize(&n.normalize(s).unwrap()).unwrap();
            assert!(back.max_abs_diff(s) <= 1e-12);
        }
        let stacked: Vec<Tensor> = states.iter().map(|s| n.normalize(s).unwrap()).collect();
        let z = Normalization::fit(&stacked).unwrap();
        assert!(z.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(z.std.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(Normalization::fit(&[Tensor::full(&[2, 2, 1], 3.0)]).is_err());
    }

    #[test]
    fn dataset_pairs() {
        let c = coords(8, 8);
        let states: Vec<Tensor> = (0..5).map(|s| random(&[8, 8, 1], s)).collect();
        let t1 = Trajectory::new(states.clone(), c.clone(), 0.1).unwrap();
        let t2 = Trajectory::new(states[..3].to_vec(), c.clone(), 0.1).unwrap();
        let d = PairDataset::from_trajectories(&[t1, t2]).unwrap();
        assert_eq!(d.len(), 4 + 2);
        assert_eq!(d.pair(1), (&states[1], &states[2]));
        assert_eq!(d.pair_index()[4], (1, 0));
        let x = d.model_input(&states[0]).unwrap();
        assert_eq!(x.shape(), &[8, 8, 3]);
        assert_eq!(x.channel_slice(1, 2).unwrap(), c);
        let bad = Trajectory::new(vec![random(&[8, 8, 2], 1); 2], c, 0.1).unwrap();
        let ok = Trajectory::new(states, coords(8, 8), 0.1).unwrap();
        assert!(PairDataset::from_trajectories(&[ok, bad]).is_err());
    }

    fn single_pair() -> PairDataset {
        let u = random(&[8, 8, 1], 11);
        let v = random(&[8, 8, 1], 12);
        PairDataset::from_pairs(vec![(u, v)], coords(8, 8)).unwrap()
    }

    #[test]
    fn overfits_single_pair() {
        let data = single_pair();
        let cfg = TrainConfig {
            batch_size: 1,
            iterations: 500,
            ..TrainConfig::default()
        };
        let (_, hist) = train(Mswt::init(tiny(), 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(hist.len(), 500);
        let first = hist[0].loss;
        let last = hist.last().unwrap().loss;
        assert!(last <= 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn deterministic_and_resumable() {
        let data = single_pair();
        let cfg = TrainConfig {
            batch_size: 2,
            iterations: 12,
            milestones: Some(vec![4, 8]),
            ..TrainConfig::default()
        };
        let model = Mswt::init(tiny(), 2).unwrap();
        let (a, ha) = train(model.clone(), &data, &cfg).unwrap();
        let (b, hb) = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        for r in &ha {
            assert_eq!(r.lr, lr_at(r.iteration, &cfg));
        }

        let mut first = Trainer::new(model, cfg.clone()).unwrap();
        first.run_until(&data, 5, |_| Ok(())).unwrap();
        let mut second = Trainer::resume(
            first.model.clone(),
            cfg.clone(),
            first.optimizer.clone(),
            first.rng_state(),
            first.history.clone(),
        )
        .unwrap();
        second.run_until(&data, 12, |_| Ok(())).unwrap();
        assert_eq!(second.history, ha);
        assert_eq!(second.model, a);
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let mut cfg = tiny();
        cfg.in_channels = 4;
        let mut t = Trainer::new(Mswt::init(cfg, 0).unwrap(), TrainConfig::default()).unwrap();
        assert!(t.step(&single_pair()).is_err());
    }

    #[test]
    fn surrogate_steps_in_physical_units() {
        let mut cfg = tiny();
        cfg.patch = 1;
        let mut model = Mswt::init(cfg, 0).unwrap();
        // Zero model output → prediction equals the channel means.
        for t in model.params.map_mut().values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let norm = Normalization {
            mean: vec![2.5],
            std: vec![3.0],
        };
        let s = Surrogate { model, norm };
        let out = s.step(&random(&[8, 8, 1], 1), &coords(8, 8)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }
}
