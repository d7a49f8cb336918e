use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
const MAX_DELTA_H: f64 = 1000.0;

/// Position, momentum and cached density/gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub log_density: f64,
}

impl PhasePoint {
    /// Point at `x` with zero momentum, or `None` if the density or its
    /// gradient is not finite there.
    pub fn at<T: LogDensity + ?Sized>(target: &T, x: Vec<f64>) -> Option<Self> {
        let mut grad = vec![0.0; x.len()];
        let lp = target.log_density_and_gradient(&x, &mut grad).ok()?;
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some(PhasePoint {
            p: vec![0.0; x.len()],
            x,
            grad,
            log_density: lp,
        })
    }

    pub fn kinetic(&self, inv_metric: &[f64]) -> f64 {
        0.5 * self
            .p
            .iter()
            .zip(inv_metric)
            .map(|(p, m)| m * p * p)
            .sum::<f64>()
    }

    pub fn hamiltonian(&self, inv_metric: &[f64]) -> f64 {
        -self.log_density + self.kinetic(inv_metric)
    }

    fn p_sharp(&self, inv_metric: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
    }
}

/// One leapfrog step of size `eps` (negative to integrate backwards). On a
/// non-finite density the point is left with `log_density = -inf`.
pub fn leapfrog<T: LogDensity + ?Sized>(target: &T, z: &mut PhasePoint, eps: f64, inv_metric: &[f64]) {
    let half = 0.5 * eps;
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += half * g;
    }
    for ((x, p), m) in z.x.iter_mut().zip(&z.p).zip(inv_metric) {
        *x += eps * m * p;
    }
    match target.log_density_and_gradient(&z.x, &mut z.grad) {
        Ok(lp) if lp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => {
            z.log_density = lp;
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += half * g;
            }
        }
        _ => {
            z.log_density = f64::NEG_INFINITY;
        }
    }
}

/// Outcome of one NUTS transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub accept_stat: f64,
    pub depth: u32,
    pub n_leapfrog: u32,
    pub divergent: bool,
}

/// A completed (sub)trajectory in integration order: `begin` is the state
/// adjacent to where it was started, `end` the farthest.
struct Tree {
    begin: PhasePoint,
    end: PhasePoint,
    proposal: PhasePoint,
    log_sum_weight: f64,
    rho: Vec<f64>,
}

#[derive(Default)]
struct TreeStats {
    n_leapfrog: u32,
    sum_accept: f64,
    divergent: bool,
}

pub(super) struct Nuts<'a, T: LogDensity> {
    target: &'a T,
    current: PhasePoint,
    step_size: f64,
    inv_metric: Vec<f64>,
    max_depth: u32,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl<'a, T: LogDensity> Nuts<'a, T> {
    pub fn new(target: &'a T, start: PhasePoint, max_depth: u32) -> Self {
        let dim = start.x.len();
        Nuts {
            target,
            current: start,
            step_size: 1.0,
            inv_metric: vec![1.0; dim],
            max_depth,
        }
    }

    pub fn current(&self) -> &PhasePoint {
        &self.current
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn set_step_size(&mut self, eps: f64) {
        self.step_size = eps;
    }

    pub fn inv_metric(&self) -> &[f64] {
        &self.inv_metric
    }

    pub fn set_inv_metric(&mut self, inv_metric: Vec<f64>) {
        self.inv_metric = inv_metric;
    }

    fn sample_momentum(&self, z: &mut PhasePoint, rng: &mut ChaCha8Rng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// an acceptance probability of 0.8.
    pub fn init_step_size(&mut self, rng: &mut ChaCha8Rng) {
        let threshold = 0.8f64.ln();
        let trial = |this: &Self, rng: &mut ChaCha8Rng| -> f64 {
            let mut z = this.current.clone();
            this.sample_momentum(&mut z, rng);
            let h0 = z.hamiltonian(&this.inv_metric);
            leapfrog(this.target, &mut z, this.step_size, &this.inv_metric);
            let h = z.hamiltonian(&this.inv_metric);
            let h = if h.is_nan() { f64::INFINITY } else { h };
            h0 - h
        };
        let delta = trial(self, rng);
        let direction = if delta > threshold { 1 } else { -1 };
        for _ in 0..100 {
            let delta = trial(self, rng);
            if direction == 1 && !(delta > threshold) {
                break;
            }
            if direction == -1 && !(delta < threshold) {
                break;
            }
            self.step_size = if direction == 1 {
                self.step_size * 2.0
            } else {
                self.step_size * 0.5
            };
            if self.step_size > 1e7 || self.step_size < 1e-12 {
                self.step_size = self.step_size.clamp(1e-12, 1e7);
                break;
            }
        }
    }

    pub fn transition(&mut self, rng: &mut ChaCha8Rng) -> Transition {
        let mut z0 = self.current.clone();
        self.sample_momentum(&mut z0, rng);
        let h0 = z0.hamiltonian(&self.inv_metric);

        // Trajectory ends in each time direction.
        let mut fwd_end = z0.clone();
        let mut bck_end = z0.clone();
        // States adjacent to the starting point, needed for the cross checks.
        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;
        let mut proposal = z0.clone();
        let mut stats = TreeStats::default();
        let mut depth = 0;

        while depth < self.max_depth {
            let forward = rng.random::<f64>() > 0.5;
            let (start, eps) = if forward {
                (&fwd_end, self.step_size)
            } else {
                (&bck_end, -self.step_size)
            };
            let start = start.clone();
            let Some(sub) = self.build_tree(&start, eps, depth, h0, &mut stats, rng) else {
                break;
            };
            depth += 1;

            // Biased progressive sampling towards the new subtree.
            let accept = (sub.log_sum_weight - log_sum_weight).exp();
            if accept >= 1.0 || rng.random::<f64>() < accept {
                proposal = sub.proposal.clone();
            }
            log_sum_weight = log_add(log_sum_weight, sub.log_sum_weight);

            // The old trajectory's edge adjacent to the new subtree is the one
            // the subtree was grown from.
            let old_far = if forward { bck_end.clone() } else { fwd_end.clone() };
            let old_rho = rho.clone();
            rho = add(&old_rho, &sub.rho);
            let persist = self.merged_persists(&old_far, &start, &old_rho, &sub, &rho);
            if forward {
                fwd_end = sub.end;
            } else {
                bck_end = sub.end;
            }
            if !persist {
                break;
            }
        }

        let n = stats.n_leapfrog.max(1);
        self.current = PhasePoint {
            p: vec![0.0; proposal.x.len()],
            ..proposal
        };
        Transition {
            accept_stat: stats.sum_accept / n as f64,
            depth,
            n_leapfrog: stats.n_leapfrog,
            divergent: stats.divergent,
        }
    }

    /// No-U-turn checks after joining trajectory `a` (far edge `a_far`, near
    /// edge `a_near`, momentum sum `a_rho`) with subtree `b` grown from
    /// `a_near`.
    fn merged_persists(&self, a_far: &PhasePoint, a_near: &PhasePoint, a_rho: &[f64], b: &Tree, rho: &[f64]) -> bool {
        let m = &self.inv_metric;
        let sharp_far = a_far.p_sharp(m);
        let sharp_near = a_near.p_sharp(m);
        let sharp_b_begin = b.begin.p_sharp(m);
        let sharp_b_end = b.end.p_sharp(m);
        criterion(&sharp_far, &sharp_b_end, rho)
            && criterion(&sharp_far, &sharp_b_begin, &add(a_rho, &b.begin.p))
            && criterion(&sharp_near, &sharp_b_end, &add(&b.rho, &a_near.p))
    }

    fn build_tree(
        &self,
        start: &PhasePoint,
        eps: f64,
        depth: u32,
        h0: f64,
        stats: &mut TreeStats,
        rng: &mut ChaCha8Rng,
    ) -> Option<Tree> {
        if depth == 0 {
            let mut z = start.clone();
            leapfrog(self.target, &mut z, eps, &self.inv_metric);
            stats.n_leapfrog += 1;
            let h = z.hamiltonian(&self.inv_metric);
            let h = if h.is_nan() { f64::INFINITY } else { h };
            if h - h0 > MAX_DELTA_H {
                stats.divergent = true;
            }
            stats.sum_accept += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            if stats.divergent {
                return None;
            }
            return Some(Tree {
                rho: z.p.clone(),
                log_sum_weight: h0 - h,
                begin: z.clone(),
                end: z.clone(),
                proposal: z,
            });
        }

        let first = self.build_tree(start, eps, depth - 1, h0, stats, rng)?;
        let second = self.build_tree(&first.end, eps, depth - 1, h0, stats, rng)?;

        let log_sum_weight = log_add(first.log_sum_weight, second.log_sum_weight);
        let take_second = (second.log_sum_weight - log_sum_weight).exp();
        let rho = add(&first.rho, &second.rho);
        let persist = {
            let m = &self.inv_metric;
            let sharp_begin = first.begin.p_sharp(m);
            let sharp_end = second.end.p_sharp(m);
            criterion(&sharp_begin, &sharp_end, &rho)
                && criterion(&sharp_begin, &second.begin.p_sharp(m), &add(&first.rho, &second.begin.p))
                && criterion(&first.end.p_sharp(m), &sharp_end, &add(&second.rho, &first.end.p))
        };
        if !persist {
            return None;
        }
        let proposal = if rng.random::<f64>() < take_second {
            second.proposal
        } else {
            first.proposal
        };
        Some(Tree {
            begin: first.begin,
            end: second.end,
            proposal,
            log_sum_weight,
            rho,
        })
    }
}

/// Generalized no-U-turn criterion: the trajectory keeps extending while
/// both end velocities still point along the summed momentum.
fn criterion(sharp_minus: &[f64], sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(sharp_plus, rho) > 0.0 && dot(sharp_minus, rho) > 0.0
}
