use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{GrinError, Result};
use crate::tensor::Tensor;

/// How evaluation entries are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskPlan {
    /// Each available entry independently, with probability `rate`.
    Point { rate: f64 },
    /// Independent reading drops plus multi-step sensor failures.
    Block {
        drop_rate: f64,
        p_failure: f64,
        min_steps: usize,
        max_steps: usize,
    },
    /// Every entry of the listed nodes.
    VirtualSensor { nodes: Vec<String> },
}

impl MaskPlan {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskPlan::Point { rate } => check_rate("rate", *rate, false),
            MaskPlan::Block {
                drop_rate,
                p_failure,
                min_steps,
                max_steps,
            } => {
                check_rate("drop_rate", *drop_rate, true)?;
                check_rate("p_failure", *p_failure, true)?;
                if *min_steps == 0 || min_steps > max_steps {
                    return Err(GrinError::Parameter(format!(
                        "block durations need 1 <= min_steps <= max_steps, got [{min_steps}, {max_steps}]"
                    )));
                }
                Ok(())
            }
            MaskPlan::VirtualSensor { nodes } if nodes.is_empty() => {
                Err(GrinError::Parameter("virtual sensor plan lists no nodes".into()))
            }
            MaskPlan::VirtualSensor { .. } => Ok(()),
        }
    }

    /// Entries this plan would drop (1 = drop), before restricting to
    /// available entries.
    pub fn sample(&self, ds: &TimeSeriesDataset, seed: u64) -> Result<Tensor> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [ds.n_steps(), ds.n_nodes(), ds.n_features()];
        match self {
            MaskPlan::Point { rate } => Ok(point_missing_mask(shape, *rate, &mut rng)),
            MaskPlan::Block {
                drop_rate,
                p_failure,
                min_steps,
                max_steps,
            } => Ok(block_missing_mask(
                shape,
                *drop_rate,
                *p_failure,
                (*min_steps, *max_steps),
                ds.episode_len,
                &mut rng,
            )),
            MaskPlan::VirtualSensor { nodes } => virtual_sensor_mask(ds, nodes),
        }
    }

    /// Moves the sampled entries that are still training-visible into the
    /// dataset's evaluation mask.
    pub fn apply(&self, ds: &mut TimeSeriesDataset, seed: u64) -> Result<()> {
        let drop = self.sample(ds, seed)?;
        ds.hold_out(&drop)
    }
}

fn check_rate(name: &str, v: f64, allow_zero: bool) -> Result<()> {
    let ok = v < 1.0 && (v > 0.0 || (allow_zero && v == 0.0));
    if ok {
        Ok(())
    } else {
        Err(GrinError::Parameter(format!("{name} = {v} outside the allowed range")))
    }
}

/// Independent Bernoulli(`rate`) drops per entry.
pub fn point_missing_mask<R: Rng>(shape: [usize; 3], rate: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < rate { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Reading-level drops (all features of a node-step together): each reading
/// is dropped with `drop_rate`; in addition, at every step each sensor
/// starts a failure with `p_failure`, lasting a uniform number of steps in
/// `durations` (inclusive). Failures are cut at episode ends.
pub fn block_missing_mask<R: Rng>(
    shape: [usize; 3],
    drop_rate: f64,
    p_failure: f64,
    durations: (usize, usize),
    episode_len: Option<usize>,
    rng: &mut R,
) -> Tensor {
    let [t_total, n, d] = shape;
    let episode = episode_len.unwrap_or(t_total).max(1);
    let mut readings = vec![false; t_total * n];
    for i in 0..n {
        for t in 0..t_total {
            if rng.random::<f64>() < drop_rate {
                readings[t * n + i] = true;
            }
        }
        for t in 0..t_total {
            if rng.random::<f64>() < p_failure {
                let len = rng.random_range(durations.0..=durations.1);
                let end = (t + len).min((t / episode + 1) * episode).min(t_total);
                for s in t..end {
                    readings[s * n + i] = true;
                }
            }
        }
    }
    let data = readings
        .iter()
        .flat_map(|&r| std::iter::repeat_n(if r { 1.0 } else { 0.0 }, d))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Closed-form expected fraction of readings dropped by
/// [`block_missing_mask`] inside one episode of `len` steps.
pub fn expected_block_fraction(
    len: usize,
    drop_rate: f64,
    p_failure: f64,
    durations: (usize, usize),
) -> f64 {
    let (lo, hi) = durations;
    let choices = (hi - lo + 1) as f64;
    // P(duration > k)
    let survives = |k: usize| (lo..=hi).filter(|&l| l > k).count() as f64 / choices;
    let mut total = 0.0;
    for t in 0..len {
        let free: f64 = (0..=t).map(|s| 1.0 - p_failure * survives(t - s)).product();
        total += 1.0 - (1.0 - drop_rate) * free;
    }
    total / len as f64
}

/// Every entry of the named nodes.
pub fn virtual_sensor_mask(ds: &TimeSeriesDataset, nodes: &[String]) -> Result<Tensor> {
    let (n, d) = (ds.n_nodes(), ds.n_features());
    let mut selected = vec![false; n];
    for id in nodes {
        let i = ds
            .node_index(id)
            .ok_or_else(|| GrinError::Parameter(format!("unknown node id `{id}`")))?;
        selected[i] = true;
    }
    let data = (0..ds.n_steps() * n * d)
        .map(|k| if selected[(k / d) % n] { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(ds.values.shape(), data)
}
