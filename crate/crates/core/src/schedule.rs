//! Annealing noise schedules and the per-level spectrum partition.

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::operators::DegradationSVD;

/// Annealing levels `σ_1 > … > σ_L > 0` plus the measurement noise and
/// Langevin step parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
    sigma0: f64,
    c: f64,
    tau: usize,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f64>, sigma0: f64, c: f64, tau: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(argument("schedule needs at least one level"));
        }
        if levels.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(argument("annealing levels must be finite and positive"));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(argument("annealing levels must be strictly decreasing"));
        }
        if !sigma0.is_finite() || sigma0 < 0.0 {
            return Err(argument(format!("measurement noise must be >= 0, got {sigma0}")));
        }
        if !c.is_finite() || c <= 0.0 {
            return Err(argument(format!("step constant must be positive, got {c}")));
        }
        if tau == 0 {
            return Err(argument("need at least one inner iteration per level"));
        }
        Ok(Self {
            levels,
            sigma0,
            c,
            tau,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Same levels and step parameters with a different measurement noise.
    pub fn with_sigma0(&self, sigma0: f64) -> Result<Self> {
        Self::new(self.levels.clone(), sigma0, self.c, self.tau)
    }
}

/// `σ_i = σ_1 r^(i-1)` with `r = (σ_L / σ_1)^(1/(L-1))`; both endpoints exact.
pub fn make_geometric_schedule(
    sigma1: f64,
    sigma_l: f64,
    levels: usize,
    sigma0: f64,
    c: f64,
    tau: usize,
) -> Result<NoiseSchedule> {
    if !(sigma_l > 0.0 && sigma1 > sigma_l && sigma1.is_finite()) {
        return Err(argument(format!(
            "need sigma1 > sigmaL > 0, got sigma1={sigma1}, sigmaL={sigma_l}"
        )));
    }
    if levels < 2 {
        return Err(argument("a geometric schedule needs at least two levels"));
    }
    let ratio = (sigma_l / sigma1).powf(1.0 / (levels - 1) as f64);
    let mut values: Vec<f64> = (0..levels).map(|i| sigma1 * ratio.powi(i as i32)).collect();
    values[0] = sigma1;
    values[levels - 1] = sigma_l;
    NoiseSchedule::new(values, sigma0, c, tau)
}

/// The regime of one spectral coordinate at a given annealing level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `s_j = 0`: prior only.
    Zero,
    /// `0 < σ_i s_j <= σ_0`: measurement plus prior.
    Less,
    /// `σ_i s_j > σ_0`: measurement only.
    Greater,
}

#[inline]
pub fn classify(sigma_i: f64, sigma0: f64, s: f64) -> Regime {
    if s == 0.0 {
        Regime::Zero
    } else if sigma_i * s > sigma0 {
        Regime::Greater
    } else {
        Regime::Less
    }
}

/// Disjoint, covering split of the `N` spectral coordinates for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPartition {
    pub level_index: usize,
    pub sigma_i: f64,
    pub sigma0: f64,
    regimes: Vec<Regime>,
    zero: Vec<usize>,
    less: Vec<usize>,
    greater: Vec<usize>,
}

impl SpectrumPartition {
    pub fn regime(&self, j: usize) -> Regime {
        self.regimes[j]
    }

    pub fn regimes(&self) -> &[Regime] {
        &self.regimes
    }

    pub fn zero(&self) -> &[usize] {
        &self.zero
    }

    pub fn less(&self) -> &[usize] {
        &self.less
    }

    pub fn greater(&self) -> &[usize] {
        &self.greater
    }

    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    /// True when some coordinate consumes the prior score.
    pub fn needs_prior(&self) -> bool {
        !self.zero.is_empty() || !self.less.is_empty()
    }
}

pub fn partition_spectrum(sigma_i: f64, sigma0: f64, svd: &DegradationSVD) -> SpectrumPartition {
    partition_singulars(0, sigma_i, sigma0, svd.extended_singulars().as_slice())
}

pub(crate) fn partition_singulars(
    level_index: usize,
    sigma_i: f64,
    sigma0: f64,
    extended: &[f64],
) -> SpectrumPartition {
    let regimes: Vec<Regime> = extended
        .iter()
        .map(|&s| classify(sigma_i, sigma0, s))
        .collect();
    let pick = |r: Regime| -> Vec<usize> {
        regimes
            .iter()
            .enumerate()
            .filter(|(_, x)| **x == r)
            .map(|(j, _)| j)
            .collect()
    };
    SpectrumPartition {
        level_index,
        sigma_i,
        sigma0,
        zero: pick(Regime::Zero),
        less: pick(Regime::Less),
        greater: pick(Regime::Greater),
        regimes,
    }
}

/// Partition for level `level` (0-based) of `schedule`.
pub fn partition_level(schedule: &NoiseSchedule, level: usize, svd: &DegradationSVD) -> SpectrumPartition {
    partition_singulars(
        level,
        schedule.levels()[level],
        schedule.sigma0(),
        svd.extended_singulars().as_slice(),
    )
}

/// Crossing status of one non-zero singular value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingEntry {
    pub index: usize,
    pub singular: f64,
    /// First 0-based level with `σ_i s_j <= σ_0`, provided the level before it
    /// had `σ_{i-1} s_j > σ_0`.
    pub crossing_level: Option<usize>,
    /// Levels with `σ_i s_j == σ_0` exactly.
    pub exact_equalities: Vec<usize>,
    /// Levels with `|σ_i s_j - σ_0| <= 1e-9 σ_0`.
    pub near_boundary: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingReport {
    pub entries: Vec<CrossingEntry>,
}

impl CrossingReport {
    /// Every non-zero singular value crosses `σ_0` inside the schedule.
    pub fn is_valid(&self) -> bool {
        self.entries.iter().all(|e| e.crossing_level.is_some())
    }

    pub fn invalid_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.crossing_level.is_none())
            .map(|e| e.index)
            .collect()
    }

    pub fn has_equalities(&self) -> bool {
        self.entries.iter().any(|e| !e.exact_equalities.is_empty())
    }
}

/// Checks that each non-zero `s_j` passes from "greater" to "less" between two
/// consecutive levels. With `σ_0 = 0` the schedule is vacuously valid.
pub fn validate_crossing(schedule: &NoiseSchedule, svd: &DegradationSVD) -> CrossingReport {
    validate_singulars(schedule, svd.singulars().as_slice())
}

pub(crate) fn validate_singulars(schedule: &NoiseSchedule, singulars: &[f64]) -> CrossingReport {
    let sigma0 = schedule.sigma0();
    let levels = schedule.levels();
    let entries = singulars
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > 0.0)
        .map(|(index, &s)| {
            if sigma0 == 0.0 {
                return CrossingEntry {
                    index,
                    singular: s,
                    crossing_level: Some(levels.len()),
                    exact_equalities: Vec::new(),
                    near_boundary: Vec::new(),
                };
            }
            let first_less = levels.iter().position(|&sig| sig * s <= sigma0);
            let crossing_level = first_less.filter(|&i| i > 0);
            let exact_equalities = levels
                .iter()
                .enumerate()
                .filter(|(_, sig)| **sig * s == sigma0)
                .map(|(i, _)| i)
                .collect();
            let near_boundary = levels
                .iter()
                .enumerate()
                .filter(|(_, sig)| (**sig * s - sigma0).abs() <= 1e-9 * sigma0)
                .map(|(i, _)| i)
                .collect();
            CrossingEntry {
                index,
                singular: s,
                crossing_level,
                exact_equalities,
                near_boundary,
            }
        })
        .collect();
    CrossingReport { entries }
}
