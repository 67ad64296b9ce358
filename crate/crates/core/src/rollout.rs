//! Free-running autoregressive rollout of a one-step operator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Time-ordered `H×W×C_u` states with the fixed coordinate channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
    pub coords: Tensor,
    pub dt: f64,
    /// Step whose prediction was non-finite; `states` stops just before it.
    pub unstable_at: Option<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<Tensor>, coords: Tensor, dt: f64) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::invalid("a trajectory needs at least one state"))?;
        let (h, w, _) = first.hwc()?;
        if let Some(bad) = states.iter().position(|s| s.shape() != first.shape()) {
            return Err(Error::shape(format!(
                "state {bad} has shape {:?}, expected {:?}",
                states[bad].shape(),
                first.shape()
            )));
        }
        let (ch, cw, _) = coords.hwc()?;
        if (ch, cw) != (h, w) {
            return Err(Error::shape(format!(
                "coordinate grid {ch}×{cw} does not match state grid {h}×{w}"
            )));
        }
        Ok(Trajectory {
            states,
            coords,
            dt,
            unstable_at: None,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State after `step` applications, or `None` past the end or an
    /// instability.
    pub fn state(&self, step: usize) -> Option<&Tensor> {
        self.states.get(step)
    }
}

/// One application `U_t ↦ U_{t+1}` given fixed coordinates, in physical units.
pub trait StepOperator {
    fn step(&self, state: &Tensor, coords: &Tensor) -> Result<Tensor>;
}

impl<F> StepOperator for F
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    fn step(&self, state: &Tensor, coords: &Tensor) -> Result<Tensor> {
        self(state, coords)
    }
}

/// Iterates `op` `steps` times from `initial`. A non-finite prediction at
/// step `k` truncates the trajectory to `k` states and sets the marker.
pub fn rollout(
    op: &dyn StepOperator,
    initial: &Tensor,
    coords: &Tensor,
    steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    let mut traj = Trajectory::new(vec![initial.clone()], coords.clone(), dt)?;
    traj.states.reserve(steps);
    for k in 1..=steps {
        let next = op.step(traj.states.last().unwrap(), coords)?;
        if next.shape() != initial.shape() {
            return Err(Error::shape(format!(
                "operator returned {:?} for a {:?} state",
                next.shape(),
                initial.shape()
            )));
        }
        if !next.is_finite() {
            traj.unstable_at = Some(k);
            break;
        }
        traj.states.push(next);
    }
    Ok(traj)
}
