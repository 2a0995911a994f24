//! Discrete Gaussian over a normalized hyper-parameter grid and the causal
//! REINFORCE update of its parameters.

use std::collections::VecDeque;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEARNING_RATE: &str = "learning_rate";
pub const SGD_ITERATIONS: &str = "sgd_iterations";

/// One tunable dimension: allowed raw values in increasing order, placed at
/// equally spaced coordinates spanning [-0.5, 0.5] by rank.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperAxis {
    name: String,
    values: Vec<f64>,
    coords: Vec<f64>,
}

impl HyperAxis {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::config(format!("hyper.{name}"), "axis has no values"));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                format!("hyper.{name}"),
                "values must be finite and strictly increasing",
            ));
        }
        let n = values.len();
        let coords = if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|k| k as f64 / (n - 1) as f64 - 0.5).collect()
        };
        Ok(Self { name, values, coords })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw value at a normalized coordinate, linearly interpolated between
    /// neighbouring grid values and clamped to the axis range.
    pub fn raw_at(&self, coord: f64) -> f64 {
        let n = self.values.len();
        if n == 1 {
            return self.values[0];
        }
        let pos = ((coord + 0.5) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let k = (pos.floor() as usize).min(n - 2);
        let frac = pos - k as f64;
        self.values[k] + frac * (self.values[k + 1] - self.values[k])
    }
}

/// Which default iteration axis to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridProfile {
    #[default]
    Standard,
    /// Fewer local iterations for the keyword-spotting model.
    Kws,
}

/// Cartesian product of axes. Flat indices are row-major with the last axis
/// varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    axes: Vec<HyperAxis>,
}

impl HyperGrid {
    pub fn new(axes: Vec<HyperAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::config("hyper.axes", "grid needs at least one axis"));
        }
        for (i, a) in axes.iter().enumerate() {
            if axes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::config("hyper.axes", format!("duplicate axis `{}`", a.name)));
            }
        }
        Ok(Self { axes })
    }

    pub fn default_values(profile: GridProfile) -> (Vec<f64>, Vec<f64>) {
        let lr = vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2];
        let iters = match profile {
            GridProfile::Standard => vec![10.0, 20.0, 30.0, 50.0, 80.0, 120.0],
            GridProfile::Kws => vec![5.0, 10.0, 20.0, 30.0],
        };
        (lr, iters)
    }

    /// Learning-rate by SGD-iteration grid.
    pub fn lr_iterations(lr: Vec<f64>, iterations: Vec<f64>) -> Result<Self> {
        Self::new(vec![
            HyperAxis::new(LEARNING_RATE, lr)?,
            HyperAxis::new(SGD_ITERATIONS, iterations)?,
        ])
    }

    pub fn axes(&self) -> &[HyperAxis] {
        &self.axes
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(HyperAxis::len).product()
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    /// Per-axis indices of a flat grid index.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for (d, a) in self.axes.iter().enumerate().rev() {
            idx[d] = flat % a.len();
            flat /= a.len();
        }
        idx
    }

    pub fn flatten(&self, indices: &[usize]) -> Result<usize> {
        if indices.len() != self.axes.len() {
            return Err(Error::invalid(format!(
                "grid point has {} indices, grid has {} axes",
                indices.len(),
                self.axes.len()
            )));
        }
        let mut flat = 0;
        for (a, &i) in self.axes.iter().zip(indices) {
            if i >= a.len() {
                return Err(Error::invalid(format!("index {i} is off the `{}` axis", a.name)));
            }
            flat = flat * a.len() + i;
        }
        Ok(flat)
    }

    pub fn coords(&self, indices: &[usize]) -> Vec<f64> {
        self.axes.iter().zip(indices).map(|(a, &i)| a.coords[i]).collect()
    }

    pub fn raw(&self, indices: &[usize]) -> Vec<f64> {
        self.axes.iter().zip(indices).map(|(a, &i)| a.values[i]).collect()
    }

    /// Raw values at the (generally off-grid) normalized point `mu`.
    pub fn raw_at(&self, mu: &[f64]) -> Vec<f64> {
        self.axes.iter().zip(mu).map(|(a, &m)| a.raw_at(m)).collect()
    }
}

/// Grid selection for an experiment: a profile's default axes, each of
/// which can be overridden.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub profile: GridProfile,
    pub learning_rate: Option<Vec<f64>>,
    pub sgd_iterations: Option<Vec<f64>>,
}

impl GridConfig {
    pub fn build(&self) -> Result<HyperGrid> {
        let (lr, iters) = HyperGrid::default_values(self.profile);
        let lr = self.learning_rate.clone().unwrap_or(lr);
        let iters = self.sgd_iterations.clone().unwrap_or(iters);
        if lr.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("grid.learning_rate", "values must be >= 0"));
        }
        if iters.iter().any(|&v| !(v >= 1.0) || v.fract() != 0.0) {
            return Err(Error::config("grid.sgd_iterations", "values must be positive integers"));
        }
        HyperGrid::lr_iterations(lr, iters)
    }
}

/// Diagonal discrete Gaussian parameters in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperDist {
    pub mu: Vec<f64>,
    pub log_precision: Vec<f64>,
}

impl HyperDist {
    /// Mean `mu0` on every axis with per-axis standard deviation `std`.
    pub fn initial(dims: usize, mu0: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::config("tuner.init_std", format!("must be > 0, got {std}")));
        }
        if !(-0.5..=0.5).contains(&mu0) {
            return Err(Error::config(
                "tuner.init_mu",
                format!("must lie in [-0.5, 0.5], got {mu0}"),
            ));
        }
        Ok(Self {
            mu: vec![mu0; dims],
            log_precision: vec![-2.0 * std.ln(); dims],
        })
    }

    pub fn precision(&self) -> Vec<f64> {
        self.log_precision.iter().map(|l| l.exp()).collect()
    }

    fn check(&self, grid: &HyperGrid) -> Result<()> {
        if self.mu.len() != grid.dims() || self.log_precision.len() != grid.dims() {
            return Err(Error::shape(
                "hyper distribution",
                &[grid.dims(), grid.dims()],
                &[self.mu.len(), self.log_precision.len()],
            ));
        }
        if self.mu.iter().chain(&self.log_precision).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hyper distribution parameters".into()));
        }
        Ok(())
    }
}

/// Normalized probabilities along each axis. Because the precision is
/// diagonal the grid distribution is the product of these marginals.
fn marginals(grid: &HyperGrid, dist: &HyperDist) -> Result<Vec<Vec<f64>>> {
    dist.check(grid)?;
    Ok(grid
        .axes
        .iter()
        .enumerate()
        .map(|(d, axis)| {
            let a = dist.log_precision[d].exp();
            let logits: Vec<f64> = axis
                .coords
                .iter()
                .map(|h| -0.5 * a * (h - dist.mu[d]).powi(2))
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Probability of every grid point, indexed by flat index.
pub fn grid_probs(grid: &HyperGrid, dist: &HyperDist) -> Result<Vec<f64>> {
    let marg = marginals(grid, dist)?;
    Ok((0..grid.size())
        .map(|flat| {
            grid.unflatten(flat)
                .iter()
                .enumerate()
                .map(|(d, &i)| marg[d][i])
                .product()
        })
        .collect())
}

/// A drawn grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSample {
    pub indices: Vec<usize>,
    pub coords: Vec<f64>,
    pub raw: Vec<f64>,
}

pub fn sample<R: Rng + ?Sized>(grid: &HyperGrid, dist: &HyperDist, rng: &mut R) -> Result<HyperSample> {
    let probs = grid_probs(grid, dist)?;
    let flat = WeightedIndex::new(&probs)
        .map_err(|e| Error::invalid(format!("degenerate grid distribution: {e}")))?
        .sample(rng);
    let indices = grid.unflatten(flat);
    Ok(HyperSample {
        coords: grid.coords(&indices),
        raw: grid.raw(&indices),
        indices,
    })
}

/// Gradient of `log P(h | mu, log_precision)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mu: Vec<f64>,
    pub log_precision: Vec<f64>,
}

impl Score {
    fn zeros(dims: usize) -> Self {
        Self {
            mu: vec![0.0; dims],
            log_precision: vec![0.0; dims],
        }
    }

    /// All components, mean entries first.
    pub fn flat(&self) -> Vec<f64> {
        self.mu.iter().chain(&self.log_precision).copied().collect()
    }
}

/// Score of grid point `indices`, with the normalizer's expectation summed
/// exactly over the grid.
pub fn score(grid: &HyperGrid, dist: &HyperDist, indices: &[usize]) -> Result<Score> {
    grid.flatten(indices)?;
    let marg = marginals(grid, dist)?;
    let mut s = Score::zeros(grid.dims());
    for (d, axis) in grid.axes.iter().enumerate() {
        let a = dist.log_precision[d].exp();
        let mu = dist.mu[d];
        let (mut e_dev, mut e_sq) = (0.0, 0.0);
        for (p, h) in marg[d].iter().zip(&axis.coords) {
            e_dev += p * (h - mu);
            e_sq += p * (h - mu).powi(2);
        }
        let dev = axis.coords[indices[d]] - mu;
        s.mu[d] = a * (dev - e_dev);
        s.log_precision[d] = -0.5 * a * (dev * dev - e_sq);
    }
    Ok(s)
}

/// Relative loss reduction `(before - after) / before`.
pub fn reward(loss_before: f64, loss_after: f64) -> Result<f64> {
    if !(loss_before > 0.0) || !loss_before.is_finite() {
        return Err(Error::invalid(format!(
            "reward needs a positive finite starting loss, got {loss_before}"
        )));
    }
    if !loss_after.is_finite() {
        return Err(Error::NonFinite(format!("loss after round: {loss_after}")));
    }
    Ok((loss_before - loss_after) / loss_before)
}

/// The most recent `radius + 1` (reward, score) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardWindow {
    radius: usize,
    entries: VecDeque<(f64, Score)>,
}

impl RewardWindow {
    pub fn new(radius: usize) -> Self {
        Self {
            radius,
            entries: VecDeque::with_capacity(radius + 1),
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn push(&mut self, reward: f64, score: Score) {
        if self.entries.len() == self.radius + 1 {
            self.entries.pop_front();
        }
        self.entries.push_back((reward, score));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(f64, Score)> {
        self.entries.iter()
    }

    pub fn mean_reward(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(|(r, _)| r).sum::<f64>() / self.entries.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    /// Step size of the update on the distribution parameters.
    pub eta_h: f64,
    /// Reward window radius; the window holds `window + 1` rounds.
    pub window: usize,
    pub init_mu: f64,
    pub init_std: f64,
    /// Move along `+gradient` of expected reward. `false` flips the sign.
    pub ascent: bool,
    pub freeze_precision: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            eta_h: 0.01,
            window: 10,
            init_mu: 0.0,
            init_std: 0.2,
            ascent: true,
            freeze_precision: false,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_h >= 0.0) || !self.eta_h.is_finite() {
            return Err(Error::config(
                "tuner.eta_h",
                format!("must be finite and >= 0, got {}", self.eta_h),
            ));
        }
        HyperDist::initial(1, self.init_mu, self.init_std).map(|_| ())
    }
}

/// Baseline-centred update direction `Σ (r_τ - r̂) score_τ` over the window.
pub fn update_direction(window: &RewardWindow) -> Result<Score> {
    let baseline = window
        .mean_reward()
        .ok_or_else(|| Error::invalid("reinforce update needs a nonempty window"))?;
    let dims = window.entries[0].1.mu.len();
    let mut g = Score::zeros(dims);
    for (r, s) in &window.entries {
        let c = r - baseline;
        for d in 0..dims {
            g.mu[d] += c * s.mu[d];
            g.log_precision[d] += c * s.log_precision[d];
        }
    }
    Ok(g)
}

/// One causal REINFORCE step; the mean is clamped back into [-0.5, 0.5].
pub fn reinforce_update(dist: &HyperDist, window: &RewardWindow, cfg: &TunerConfig) -> Result<HyperDist> {
    let g = update_direction(window)?;
    if g.mu.len() != dist.mu.len() {
        return Err(Error::shape("reinforce window", &[dist.mu.len()], &[g.mu.len()]));
    }
    let step = if cfg.ascent { cfg.eta_h } else { -cfg.eta_h };
    let mut next = dist.clone();
    for d in 0..dist.mu.len() {
        next.mu[d] = (dist.mu[d] + step * g.mu[d]).clamp(-0.5, 0.5);
        if !cfg.freeze_precision {
            next.log_precision[d] += step * g.log_precision[d];
        }
    }
    Ok(next)
}
