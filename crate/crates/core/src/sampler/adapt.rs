//! Step size and metric adaptation during warm-up.

use std::ops::Range;

use nalgebra::DMatrix;

/// Nesterov dual averaging of the log step size.
#[derive(Debug, Clone)]
pub(super) struct DualAveraging {
    target: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

const GAMMA: f64 = 0.05;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(target: f64, step_size: f64) -> Self {
        let mut d = DualAveraging {
            target,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        d.restart(step_size);
        d
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Updated step size after observing `accept_stat`.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let w = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warm-up schedule: a fast initial buffer, doubling slow windows in which
/// the metric is estimated, and a fast terminal buffer.
#[derive(Debug, Clone)]
pub(super) struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
    adapt_metric: bool,
}

impl Windows {
    pub fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        let adapt_metric = warmup >= 20;
        if init_buffer + base + term_buffer > warmup {
            init_buffer = warmup * 15 / 100;
            term_buffer = warmup / 10;
            base = warmup.saturating_sub(init_buffer + term_buffer);
        }
        Windows {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window_end: (init_buffer + base).saturating_sub(1),
            counter: 0,
            adapt_metric,
        }
    }

    fn in_window(&self) -> bool {
        self.adapt_metric
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
    }

    fn at_window_end(&self) -> bool {
        self.adapt_metric && self.counter == self.next_window_end && self.counter != self.warmup
    }

    fn advance_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_window_end = self.counter + self.window_size;
        if self.next_window_end != last && self.next_window_end + 2 * self.window_size > last {
            self.next_window_end = last;
        }
    }
}

/// Running covariance estimate feeding the inverse metric: variances for
/// every coordinate and full covariances on the dense blocks.
#[derive(Debug, Clone)]
pub(super) struct MetricAdaptation {
    windows: Windows,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    blocks: Vec<Range<usize>>,
    cross: Vec<DMatrix<f64>>,
}

/// Regularized estimate from a slow window.
pub(super) type MetricEstimate = (Vec<f64>, Vec<DMatrix<f64>>);

impl MetricAdaptation {
    pub fn new(warmup: usize, dim: usize, blocks: Vec<Range<usize>>) -> Self {
        let cross = blocks
            .iter()
            .map(|r| DMatrix::zeros(r.len(), r.len()))
            .collect();
        MetricAdaptation {
            windows: Windows::new(warmup),
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            blocks,
            cross,
        }
    }

    /// Record a warm-up position. Returns the regularized estimate when a
    /// slow window closes. Variances shrink towards a small constant; dense
    /// blocks shrink towards `previous`, their current covariances, so that
    /// very narrow directions already captured are kept.
    pub fn observe(
        &mut self,
        position: &[f64],
        previous: &[DMatrix<f64>],
    ) -> Option<MetricEstimate> {
        if self.windows.in_window() {
            self.n += 1;
            let n = self.n as f64;
            // deltas against the old mean, for the block cross products
            let before: Vec<Vec<f64>> = self
                .blocks
                .iter()
                .map(|r| r.clone().map(|j| position[j] - self.mean[j]).collect())
                .collect();
            for ((m, s), x) in self.mean.iter_mut().zip(&mut self.m2).zip(position) {
                let delta = x - *m;
                *m += delta / n;
                *s += delta * (x - *m);
            }
            for ((r, c), d) in self.blocks.iter().zip(&mut self.cross).zip(&before) {
                for (a, ja) in r.clone().enumerate() {
                    let after = position[ja] - self.mean[ja];
                    for (b, db) in d.iter().enumerate() {
                        c[(a, b)] += after * db;
                    }
                }
            }
        }
        let update = if self.windows.at_window_end() {
            self.windows.advance_window();
            let n = self.n as f64;
            let shrink = |s: f64, on_diagonal: bool| {
                let v = if self.n > 1 {
                    s / (n - 1.0)
                } else if on_diagonal {
                    1.0
                } else {
                    0.0
                };
                let jitter = if on_diagonal {
                    1e-3 * (5.0 / (n + 5.0))
                } else {
                    0.0
                };
                (n / (n + 5.0)) * v + jitter
            };
            let var = self.m2.iter().map(|&s| shrink(s, true)).collect();
            let weight = n / (n + 5.0);
            let dense = self
                .cross
                .iter()
                .zip(previous)
                .map(|(c, old)| {
                    let sample = if self.n > 1 {
                        c / (n - 1.0)
                    } else {
                        DMatrix::zeros(c.nrows(), c.ncols())
                    };
                    // symmetrize; the Welford cross product is only symmetric up to rounding
                    let sample = (&sample + sample.transpose()) * 0.5;
                    sample * weight + old * (1.0 - weight)
                })
                .collect();
            self.n = 0;
            self.mean.fill(0.0);
            self.m2.fill(0.0);
            for c in &mut self.cross {
                c.fill(0.0);
            }
            Some((var, dense))
        } else {
            None
        };
        self.windows.counter += 1;
        update
    }
}
