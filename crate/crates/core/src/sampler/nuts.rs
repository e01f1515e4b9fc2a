//! Multinomial No-U-Turn transitions with a Euclidean metric.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::adapt::{DualAveraging, MetricAdaptation};
use super::metric::Metric;
use super::{ChainDraws, IterationStats, SamplerConfig, Target};
use crate::stats::log_add_exp;
use crate::{Error, Result};

const MAX_ENERGY_ERROR: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;
const CURVATURE_STEP: f64 = 1e-5;
const MIN_SCALE: f64 = 1e-12;
const MAX_SCALE: f64 = 1e4;

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    log_density: f64,
    grad: Vec<f64>,
}

struct Hamiltonian<'a, T: Target> {
    target: &'a T,
    metric: Metric,
}

impl<T: Target> Hamiltonian<'_, T> {
    fn energy(&self, z: &State) -> f64 {
        let h = -z.log_density + self.metric.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        self.metric.velocity(p)
    }

    fn sample_momentum(&self, z: &mut State, rng: &mut ChaCha8Rng) {
        self.metric.sample_momentum(&mut z.p, rng);
    }

    fn update_density(&self, z: &mut State) {
        z.log_density = self.target.log_density_and_gradient(&z.q, &mut z.grad);
        if !z.log_density.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.log_density = f64::NEG_INFINITY;
        }
    }

    fn leapfrog(&self, z: &mut State, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        let v = self.metric.velocity(&z.p);
        for (q, v) in z.q.iter_mut().zip(&v) {
            *q += eps * v;
        }
        self.update_density(z);
        if z.log_density.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += 0.5 * eps * g;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct Tree<'h, 'a, T: Target> {
    ham: &'h Hamiltonian<'a, T>,
    eps: f64,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Outputs of a subtree: the trajectory end points and summed momenta.
struct Edge {
    p_beg: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_end: Vec<f64>,
    rho: Vec<f64>,
    log_sum_weight: f64,
}

impl<T: Target> Tree<'_, '_, T> {
    /// Extend the trajectory from `z` by `2^depth` leapfrog steps in
    /// direction `sign`. Returns `None` on divergence or U-turn.
    fn build(
        &mut self,
        depth: usize,
        z: &mut State,
        sign: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<(State, Edge)> {
        if depth == 0 {
            self.ham.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.ham.energy(z);
            if h - self.h0 > MAX_ENERGY_ERROR {
                self.divergent = true;
            }
            let w = self.h0 - h;
            self.sum_metro_prob += if w > 0.0 { 1.0 } else { w.exp() };
            if self.divergent {
                return None;
            }
            let p_sharp = self.ham.velocity(&z.p);
            let edge = Edge {
                p_beg: z.p.clone(),
                p_sharp_beg: p_sharp.clone(),
                p_end: z.p.clone(),
                p_sharp_end: p_sharp,
                rho: z.p.clone(),
                log_sum_weight: w,
            };
            return Some((z.clone(), edge));
        }

        let (propose_init, init) = self.build(depth - 1, z, sign, rng)?;
        let (propose_final, fin) = self.build(depth - 1, z, sign, rng)?;

        let log_sum_weight = log_add_exp(init.log_sum_weight, fin.log_sum_weight);
        let accept_final = fin.log_sum_weight - log_sum_weight;
        let propose = if rng.random::<f64>() < accept_final.exp() {
            propose_final
        } else {
            propose_init
        };

        let rho = add(&init.rho, &fin.rho);
        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        let rho_ext = add(&init.rho, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = add(&fin.rho, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);
        if !persist {
            return None;
        }
        Some((
            propose,
            Edge {
                p_beg: init.p_beg,
                p_sharp_beg: init.p_sharp_beg,
                p_end: fin.p_end,
                p_sharp_end: fin.p_sharp_end,
                rho,
                log_sum_weight,
            },
        ))
    }
}

struct Transition {
    z: State,
    stats: IterationStats,
}

fn transition<T: Target>(
    ham: &Hamiltonian<'_, T>,
    z0: &State,
    eps: f64,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    let mut z = z0.clone();
    ham.sample_momentum(&mut z, rng);
    let h0 = ham.energy(&z);
    let mut tree = Tree {
        ham,
        eps,
        h0,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    // momenta at the backward-most and forward-most points of the trajectory
    let p_sharp = ham.velocity(&z.p);
    let mut whole = Edge {
        p_beg: z.p.clone(),
        p_sharp_beg: p_sharp.clone(),
        p_end: z.p.clone(),
        p_sharp_end: p_sharp,
        rho: z.p.clone(),
        log_sum_weight: 0.0,
    };
    let mut z_bck = z.clone();
    let mut z_fwd = z;
    let mut sample = z0.clone();
    let mut depth = 0;

    while depth < max_depth {
        let forward = rng.random::<f64>() > 0.5;
        let built = if forward {
            tree.build(depth, &mut z_fwd, 1.0, rng)
        } else {
            tree.build(depth, &mut z_bck, -1.0, rng)
        };
        let Some((propose, sub)) = built else {
            break;
        };
        depth += 1;

        if sub.log_sum_weight > whole.log_sum_weight
            || rng.random::<f64>() < (sub.log_sum_weight - whole.log_sum_weight).exp()
        {
            sample = propose;
        }
        let log_sum_weight = log_add_exp(whole.log_sum_weight, sub.log_sum_weight);

        // order the old trajectory and the new subtree in time
        let (left, right) = if forward {
            (whole, sub)
        } else {
            let reversed = Edge {
                p_beg: sub.p_end,
                p_sharp_beg: sub.p_sharp_end,
                p_end: sub.p_beg,
                p_sharp_end: sub.p_sharp_beg,
                rho: sub.rho,
                log_sum_weight: sub.log_sum_weight,
            };
            (reversed, whole)
        };
        let rho = add(&left.rho, &right.rho);
        let mut persist = no_u_turn(&left.p_sharp_beg, &right.p_sharp_end, &rho);
        let rho_ext = add(&left.rho, &right.p_beg);
        persist &= no_u_turn(&left.p_sharp_beg, &right.p_sharp_beg, &rho_ext);
        let rho_ext = add(&right.rho, &left.p_end);
        persist &= no_u_turn(&left.p_sharp_end, &right.p_sharp_end, &rho_ext);
        whole = Edge {
            p_beg: left.p_beg,
            p_sharp_beg: left.p_sharp_beg,
            p_end: right.p_end,
            p_sharp_end: right.p_sharp_end,
            rho,
            log_sum_weight,
        };
        if !persist {
            break;
        }
    }

    let accept_stat = if tree.n_leapfrog > 0 {
        tree.sum_metro_prob / tree.n_leapfrog as f64
    } else {
        0.0
    };
    let energy = ham.energy(&sample);
    Transition {
        stats: IterationStats {
            log_density: sample.log_density,
            accept_stat,
            tree_depth: depth,
            n_leapfrog: tree.n_leapfrog,
            divergent: tree.divergent,
            energy,
        },
        z: sample,
    }
}

/// Heuristic step size giving a one-step acceptance probability near 0.8.
fn initial_step_size<T: Target>(
    ham: &Hamiltonian<'_, T>,
    z0: &State,
    mut eps: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let threshold = 0.8f64.ln();
    let mut direction = 0.0;
    for _ in 0..200 {
        let mut z = z0.clone();
        ham.sample_momentum(&mut z, rng);
        let h0 = ham.energy(&z);
        ham.leapfrog(&mut z, eps);
        let delta = h0 - ham.energy(&z);
        if direction == 0.0 {
            direction = if delta > threshold { 1.0 } else { -1.0 };
        } else if (direction > 0.0 && !(delta > threshold))
            || (direction < 0.0 && !(delta < threshold))
        {
            break;
        }
        eps = if direction > 0.0 {
            2.0 * eps
        } else {
            0.5 * eps
        };
        if !(1e-12..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e7)
}

/// Starting inverse metric from central differences of the gradient: the
/// inverse of the negative Hessian on each dense block, reciprocal curvature
/// elsewhere, and 1 where the density is not locally concave.
fn curvature_metric<T: Target>(
    ham: &Hamiltonian<'_, T>,
    z: &State,
) -> (Vec<f64>, Vec<DMatrix<f64>>) {
    let dim = z.q.len();
    let blocks = ham.metric.block_ranges();
    let mut hessians: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|r| DMatrix::zeros(r.len(), r.len()))
        .collect();
    let mut block_of = vec![None; dim];
    for (b, r) in blocks.iter().enumerate() {
        for j in r.clone() {
            block_of[j] = Some(b);
        }
    }
    let mut probe = z.clone();
    let mut diag = vec![1.0; dim];
    let mut valid = vec![true; dim];
    for j in 0..dim {
        let h = CURVATURE_STEP * z.q[j].abs().max(1.0);
        probe.q[j] = z.q[j] + h;
        ham.update_density(&mut probe);
        let up = probe.log_density.is_finite().then(|| probe.grad.clone());
        probe.q[j] = z.q[j] - h;
        ham.update_density(&mut probe);
        let down = probe.log_density.is_finite().then(|| probe.grad.clone());
        probe.q[j] = z.q[j];
        let (Some(up), Some(down)) = (up, down) else {
            valid[j] = false;
            continue;
        };
        let second = (up[j] - down[j]) / (2.0 * h);
        if second < 0.0 {
            diag[j] = (-1.0 / second).clamp(MIN_SCALE, MAX_SCALE);
        }
        if let Some(b) = block_of[j] {
            let r = &blocks[b];
            for (a, i) in r.clone().enumerate() {
                hessians[b][(a, j - r.start)] = -(up[i] - down[i]) / (2.0 * h);
            }
        }
    }
    let dense = blocks
        .iter()
        .zip(hessians)
        .map(|(r, neg_h)| {
            let fallback = || {
                DMatrix::from_fn(r.len(), r.len(), |a, b| {
                    if a == b {
                        diag[r.start + a]
                    } else {
                        0.0
                    }
                })
            };
            if r.clone().any(|j| !valid[j]) {
                return fallback();
            }
            let sym = (&neg_h + neg_h.transpose()) * 0.5;
            match sym.cholesky().map(|c| c.inverse()) {
                Some(cov) if cov.iter().all(|v| v.is_finite()) => cov,
                _ => fallback(),
            }
        })
        .collect();
    (diag, dense)
}

fn initialize<T: Target>(target: &T, rng: &mut ChaCha8Rng) -> Result<State> {
    let dim = target.dim();
    let ham = Hamiltonian {
        target,
        metric: Metric::unit(dim, &[]),
    };
    for _ in 0..INIT_ATTEMPTS {
        let mut z = State {
            q: target.initial_position(rng),
            p: vec![0.0; dim],
            log_density: 0.0,
            grad: vec![0.0; dim],
        };
        assert_eq!(z.q.len(), dim, "initial position length");
        ham.update_density(&mut z);
        if z.log_density.is_finite() {
            return Ok(z);
        }
    }
    Err(Error::Initialization {
        attempts: INIT_ATTEMPTS,
    })
}

pub(super) fn run_chain<T: Target>(
    target: &T,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ChainDraws> {
    let dim = target.dim();
    let mut z = initialize(target, rng)?;
    let blocks = target.metric_blocks();
    let mut ham = Hamiltonian {
        target,
        metric: Metric::unit(dim, &blocks),
    };
    let (diag, dense) = curvature_metric(&ham, &z);
    ham.metric.set(diag, dense);
    let mut eps = initial_step_size(&ham, &z, 1.0, rng);
    let mut step = DualAveraging::new(config.target_accept, eps);
    let mut metric = MetricAdaptation::new(config.warmup, dim, blocks);

    for _ in 0..config.warmup {
        let t = transition(&ham, &z, eps, config.max_tree_depth, rng);
        z = t.z;
        eps = step.update(t.stats.accept_stat);
        if let Some((var, dense)) = metric.observe(&z.q, &ham.metric.block_covariances()) {
            ham.metric.set(var, dense);
            eps = initial_step_size(&ham, &z, eps, rng);
            step.restart(eps);
        }
    }
    if config.warmup > 0 {
        eps = step.final_step_size();
    }

    let mut values = vec![0.0; config.draws * dim];
    let mut stats = Vec::with_capacity(config.draws);
    for row in values.chunks_mut(dim.max(1)).take(config.draws) {
        let t = transition(&ham, &z, eps, config.max_tree_depth, rng);
        z = t.z;
        target.constrain(&z.q, row);
        stats.push(t.stats);
    }
    Ok(ChainDraws {
        values,
        stats,
        step_size: eps,
        inv_metric: ham.metric.diagonal().to_vec(),
    })
}
