use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::masks::block_missing_mask;
use super::TimeSeriesDataset;
use crate::error::{GrinError, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeMode {
    /// One set of charges, drawn once from the seed, shared by every simulation.
    Fixed,
    /// Fresh charges for every simulation.
    Random,
}

/// Charged particles bouncing in a square box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleSimConfig {
    pub n_particles: usize,
    /// The box spans `[-box_half, box_half]` on both axes.
    pub box_half: f64,
    pub charge_mode: ChargeMode,
    pub n_simulations: usize,
    /// Recorded steps per simulation.
    pub steps: usize,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps between recorded samples.
    pub substeps: usize,
    /// Std of the initial positions.
    pub loc_std: f64,
    /// Initial speed of every particle; directions are random.
    pub vel_norm: f64,
    /// Coulomb constant.
    pub interaction_strength: f64,
    /// Cap on the magnitude of each pairwise force.
    pub max_force: f64,
    /// Probability that a reading starts a failure block.
    pub p_failure: f64,
    pub min_block: usize,
    pub max_block: usize,
    /// Probability that a single reading is dropped.
    pub point_rate: f64,
    pub seed: u64,
}

impl Default for ParticleSimConfig {
    fn default() -> Self {
        ParticleSimConfig {
            n_particles: 10,
            box_half: 5.0,
            charge_mode: ChargeMode::Fixed,
            n_simulations: 5000,
            steps: 36,
            dt: 0.001,
            substeps: 100,
            loc_std: 1.0,
            vel_norm: 0.5,
            interaction_strength: 1.0,
            max_force: 100.0,
            p_failure: 0.025,
            min_block: 4,
            max_block: 9,
            point_rate: 0.025,
            seed: 0,
        }
    }
}

impl ParticleSimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_particles", self.n_particles),
            ("n_simulations", self.n_simulations),
            ("steps", self.steps),
            ("substeps", self.substeps),
            ("min_block", self.min_block),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(GrinError::Config(format!("simulation.{name} must be positive")));
            }
        }
        if self.max_block < self.min_block {
            return Err(GrinError::Config("simulation.max_block < min_block".into()));
        }
        let positive = [
            ("box_half", self.box_half),
            ("dt", self.dt),
            ("max_force", self.max_force),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GrinError::Config(format!("simulation.{name} must be positive")));
            }
        }
        for (name, v) in [
            ("p_failure", self.p_failure),
            ("point_rate", self.point_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(GrinError::Config(format!("simulation.{name} must be in [0, 1)")));
            }
        }
        if !(self.loc_std >= 0.0 && self.vel_norm >= 0.0 && self.interaction_strength.is_finite()) {
            return Err(GrinError::Config("simulation initial-state parameters are invalid".into()));
        }
        Ok(())
    }
}

/// State of one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub charge: Vec<f64>,
}

impl ParticleSystem {
    /// Pairwise Coulomb forces `k q_i q_j (x_i - x_j) / r³`, each pair's
    /// magnitude capped at `max_force`. Equal charges repel.
    pub fn forces(&self, strength: f64, max_force: f64) -> Vec<[f64; 2]> {
        let n = self.pos.len();
        let mut f = vec![[0.0; 2]; n];
        for i in 0..n {
            for j in i + 1..n {
                let dx = self.pos[i][0] - self.pos[j][0];
                let dy = self.pos[i][1] - self.pos[j][1];
                let r2 = dx * dx + dy * dy;
                if r2 == 0.0 {
                    continue;
                }
                let r = r2.sqrt();
                // signed magnitude along the unit vector from j to i
                let mag = (strength * self.charge[i] * self.charge[j] / r2).clamp(-max_force, max_force);
                let (fx, fy) = (mag * dx / r, mag * dy / r);
                f[i][0] += fx;
                f[i][1] += fy;
                f[j][0] -= fx;
                f[j][1] -= fy;
            }
        }
        f
    }

    /// Semi-implicit Euler step followed by elastic reflection at the walls.
    pub fn step(&mut self, dt: f64, strength: f64, max_force: f64, box_half: f64) {
        let f = self.forces(strength, max_force);
        for i in 0..self.pos.len() {
            for a in 0..2 {
                self.vel[i][a] += dt * f[i][a];
                self.pos[i][a] += dt * self.vel[i][a];
                if self.pos[i][a] > box_half {
                    self.pos[i][a] = 2.0 * box_half - self.pos[i][a];
                    self.vel[i][a] = -self.vel[i][a].abs();
                } else if self.pos[i][a] < -box_half {
                    self.pos[i][a] = -2.0 * box_half - self.pos[i][a];
                    self.vel[i][a] = self.vel[i][a].abs();
                }
            }
        }
    }

    pub fn momentum(&self) -> [f64; 2] {
        self.vel.iter().fold([0.0; 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]])
    }

    fn random<R: Rng>(charge: Vec<f64>, cfg: &ParticleSimConfig, rng: &mut R) -> Self {
        let n = charge.len();
        let mut pos = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = [0.0; 2];
            for c in &mut p {
                let v: f64 = rng.sample(StandardNormal);
                *c = reflect_into(v * cfg.loc_std, cfg.box_half);
            }
            pos.push(p);
        }
        for _ in 0..n {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let norm = (a * a + b * b).sqrt().max(f64::MIN_POSITIVE);
            vel.push([cfg.vel_norm * a / norm, cfg.vel_norm * b / norm]);
        }
        ParticleSystem { pos, vel, charge }
    }
}

fn reflect_into(mut x: f64, half: f64) -> f64 {
    while x.abs() > half {
        x = if x > half { 2.0 * half - x } else { -2.0 * half - x };
    }
    x
}

fn draw_charges<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| *[1.0, -1.0].choose(rng).expect("non-empty")).collect()
}

/// Result of [`simulate_particles`].
#[derive(Clone, Debug)]
pub struct ParticleDataset {
    /// Positions of all simulations laid end to end, `episode_len = steps`.
    pub dataset: TimeSeriesDataset,
    /// Fully connected, unit weights.
    pub graph: GraphSpec,
    /// Charges per simulation.
    pub charges: Vec<Vec<f64>>,
}

/// Simulates `n_simulations` independent trajectories and masks them with
/// the block scheme; masked readings form the evaluation mask.
pub fn simulate_particles(cfg: &ParticleSimConfig) -> Result<ParticleDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, steps) = (cfg.n_particles, cfg.steps);
    let fixed = draw_charges(n, &mut rng);
    let mut data = Vec::with_capacity(cfg.n_simulations * steps * n * 2);
    let mut charges = Vec::with_capacity(cfg.n_simulations);
    for _ in 0..cfg.n_simulations {
        let q = match cfg.charge_mode {
            ChargeMode::Fixed => fixed.clone(),
            ChargeMode::Random => draw_charges(n, &mut rng),
        };
        let mut sys = ParticleSystem::random(q.clone(), cfg, &mut rng);
        for t in 0..steps {
            if t > 0 {
                for _ in 0..cfg.substeps {
                    sys.step(cfg.dt, cfg.interaction_strength, cfg.max_force, cfg.box_half);
                }
            }
            for p in &sys.pos {
                data.extend_from_slice(p);
            }
        }
        charges.push(q);
    }
    let shape = [cfg.n_simulations * steps, n, 2];
    let values = Tensor::new(shape, data)?;
    let mut ds = TimeSeriesDataset::new(values, Tensor::ones(shape))?.with_episode_len(steps)?;
    ds.feature_names = vec!["x".into(), "y".into()];
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let drop = block_missing_mask(
        shape,
        cfg.point_rate,
        cfg.p_failure,
        (cfg.min_block, cfg.max_block),
        Some(steps),
        &mut mask_rng,
    );
    ds.hold_out(&drop)?;
    Ok(ParticleDataset {
        dataset: ds,
        graph: GraphSpec::fully_connected(n),
        charges,
    })
}
