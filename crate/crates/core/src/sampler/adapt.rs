//! Warmup adaptation: dual averaging for the step size and windowed
//! estimation of a diagonal inverse metric (75 / 25·2^j / 50 iteration
//! buffers, shrunk proportionally for short warmups).

const GAMMA: f64 = 0.05;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;

struct DualAveraging {
    mu: f64,
    delta: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let accept_stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let x_eta = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn restart(&mut self) {
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }
}

/// Welford running mean / variance per coordinate.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn restart(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

pub(super) struct Adaptation {
    step: DualAveraging,
    estimator: Welford,
    inv_metric: Vec<f64>,
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_counter: usize,
    window_size: usize,
    next_window: usize,
    windows_enabled: bool,
}

impl Adaptation {
    pub fn new(dim: usize, num_warmup: usize, target_accept: f64) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (INIT_BUFFER, TERM_BUFFER, BASE_WINDOW);
        let windows_enabled = num_warmup >= 20;
        if init_buffer + base_window + term_buffer > num_warmup {
            init_buffer = (0.15 * num_warmup as f64) as usize;
            term_buffer = (0.1 * num_warmup as f64) as usize;
            base_window = num_warmup - (init_buffer + term_buffer);
        }
        Adaptation {
            step: DualAveraging {
                mu: 0.0,
                delta: target_accept,
                counter: 0.0,
                s_bar: 0.0,
                x_bar: 0.0,
            },
            estimator: Welford::new(dim),
            inv_metric: vec![1.0; dim],
            num_warmup,
            init_buffer,
            term_buffer,
            window_counter: 0,
            window_size: base_window,
            next_window: (init_buffer + base_window).saturating_sub(1),
            windows_enabled,
        }
    }

    pub fn set_mu(&mut self, step_size: f64) {
        self.step.mu = (10.0 * step_size).ln();
    }

    pub fn restart_step_size(&mut self) {
        self.step.restart();
    }

    pub fn learn_step_size(&mut self, accept_stat: f64) -> f64 {
        self.step.learn(accept_stat)
    }

    pub fn final_step_size(&self) -> f64 {
        self.step.x_bar.exp()
    }

    pub fn inv_metric(&self) -> &[f64] {
        &self.inv_metric
    }

    fn in_window(&self) -> bool {
        self.window_counter >= self.init_buffer
            && self.window_counter < self.num_warmup - self.term_buffer
            && self.window_counter != self.num_warmup
    }

    fn at_window_end(&self) -> bool {
        self.window_counter == self.next_window && self.window_counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.window_counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.num_warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }

    /// Feeds a warmup position; returns true when a window closed and the
    /// inverse metric was updated.
    pub fn learn_variance(&mut self, x: &[f64]) -> bool {
        if !self.windows_enabled {
            self.window_counter += 1;
            return false;
        }
        if self.in_window() {
            self.estimator.add(x);
        }
        if self.at_window_end() {
            self.compute_next_window();
            let n = self.estimator.n as f64;
            if self.estimator.n >= 2 {
                for (m, s) in self.inv_metric.iter_mut().zip(&self.estimator.m2) {
                    let var = s / (n - 1.0);
                    *m = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
                }
            }
            self.estimator.restart();
            self.window_counter += 1;
            return true;
        }
        self.window_counter += 1;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_schedule_for_default_warmup() {
        let mut a = Adaptation::new(1, 1000, 0.8);
        let mut ends = Vec::new();
        for i in 0..1000 {
            if a.learn_variance(&[i as f64]) {
                ends.push(i);
            }
        }
        // 75 + 25 -> 99, then windows of 50, 100, 200 and a stretched last one.
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
    }

    #[test]
    fn short_warmup_uses_proportional_buffers() {
        let mut a = Adaptation::new(1, 150, 0.8);
        let mut ends = Vec::new();
        for i in 0..150 {
            if a.learn_variance(&[i as f64]) {
                ends.push(i);
            }
        }
        assert_eq!(ends, vec![99]);
    }

    #[test]
    fn dual_averaging_moves_towards_target() {
        let mut a = Adaptation::new(1, 500, 0.8);
        a.set_mu(1.0);
        let mut eps = 1.0;
        for _ in 0..50 {
            eps = a.learn_step_size(0.2);
        }
        assert!(eps < 1.0);
        assert!(a.final_step_size() < 10.0);
    }
}
