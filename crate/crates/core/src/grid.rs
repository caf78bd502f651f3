use crate::error::{FbsdeError, Result};

/// Uniform partition of `[t_start, t_end]` into `n_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(FbsdeError::domain("time grid needs at least one step"));
        }
        if !(t_start < t_end) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(FbsdeError::domain(format!(
                "time grid requires t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if t_end > horizon * (1.0 + 1e-14) {
            return Err(FbsdeError::domain(format!("t_end = {t_end} exceeds the horizon {horizon}")));
        }
        Ok(Self { t_start, t_end, n_steps })
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    /// Time of node `i`; the last node is `t_end` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|i| self.node(i))
    }

    /// Index of the node at time `s`, if `s` is a node up to rounding.
    pub fn node_index(&self, s: f64) -> Option<usize> {
        let pos = (s - self.t_start) / self.step();
        let i = pos.round();
        if i < 0.0 || i > self.n_steps as f64 {
            return None;
        }
        let tol = 1e-9 * self.step().max(f64::EPSILON);
        ((self.node(i as usize) - s).abs() <= tol).then_some(i as usize)
    }
}
