// Straight-line reference of the training loop: full (unsharded) parameter
// vectors per replica, explicit loops, no collectives.

use edit_sim::optim::{InnerOptConfig, LrSchedule, OuterOptConfig};
use edit_sim::protocol::SyncConfig;
use edit_sim::task::{CorruptionSchedule, DataShard, LayeredTask};
use edit_sim::Vector;

#[derive(Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Clone, Copy, Default)]
struct Ema {
    mu: f64,
    sigma: f64,
    seen: u64,
}

pub struct Reference {
    task: LayeredTask,
    rows: usize,
    cols: usize,
    sync: SyncConfig,
    inner: InnerOptConfig,
    schedule: LrSchedule,
    batch: usize,
    seed: u64,
    corruption: Option<CorruptionSchedule>,
    /// theta[col][layer]
    theta: Vec<Vec<Vec<f64>>>,
    anchor: Vec<Vec<f64>>,
    momentum: Vec<Vec<f64>>,
    adam: Vec<Vec<Adam>>,
    adam_snap: Vec<Vec<Adam>>,
    ema: Vec<Vec<Ema>>,
    steps: u64,
    local: u64,
    t: u64,
}

impl Reference {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: LayeredTask,
        rows: usize,
        cols: usize,
        sync: SyncConfig,
        inner: InnerOptConfig,
        schedule: LrSchedule,
        batch: usize,
        seed: u64,
        corruption: Option<CorruptionSchedule>,
    ) -> Self {
        let init: Vec<Vec<f64>> = task.initial_params().into_iter().map(|v| v.into_vec()).collect();
        let adam: Vec<Adam> = init
            .iter()
            .map(|l| Adam {
                m: vec![0.0; l.len()],
                v: vec![0.0; l.len()],
                step: 0,
            })
            .collect();
        let layers = init.len();
        Self {
            rows,
            cols,
            sync,
            inner,
            schedule,
            batch,
            seed,
            corruption,
            theta: vec![init.clone(); cols],
            momentum: init.iter().map(|l| vec![0.0; l.len()]).collect(),
            anchor: init,
            adam: vec![adam.clone(); cols],
            adam_snap: vec![adam; cols],
            ema: vec![vec![Ema::default(); layers]; cols],
            steps: 0,
            local: 0,
            t: 0,
            task,
        }
    }

    fn grads(&self, col: usize, p: u64) -> Vec<Vec<f64>> {
        let params: Vec<Vector> = self.theta[col].iter().map(|l| Vector::from_vec(l.clone())).collect();
        let mut sum: Vec<Vec<f64>> = params.iter().map(|l| vec![0.0; l.len()]).collect();
        for i in 0..self.rows {
            let w = i * self.cols + col;
            let mut shard = DataShard::new(w, self.seed);
            if let Some(c) = &self.corruption {
                shard = shard.with_corruption(c.clone());
            }
            let batch = self.task.sample_batch(&shard, self.t, p, self.batch);
            let (_, g) = self.task.loss_and_grad(&params, &batch).unwrap();
            for (s, gl) in sum.iter_mut().zip(&g) {
                for (a, b) in s.iter_mut().zip(gl.iter()) {
                    *a += b;
                }
            }
        }
        for s in &mut sum {
            for a in s.iter_mut() {
                *a /= self.rows as f64;
            }
        }
        sum
    }

    fn update(&mut self, col: usize, grads: &[Vec<f64>], lr: f64) {
        for l in 0..grads.len() {
            let theta = &mut self.theta[col][l];
            match self.inner {
                InnerOptConfig::Sgd { .. } => {
                    for k in 0..theta.len() {
                        theta[k] -= lr * grads[l][k];
                    }
                }
                InnerOptConfig::Adamw {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let a = &mut self.adam[col][l];
                    a.step += 1;
                    let bc1 = 1.0 - beta1.powi(a.step as i32);
                    let bc2 = 1.0 - beta2.powi(a.step as i32);
                    for k in 0..theta.len() {
                        let g = grads[l][k];
                        a.m[k] = beta1 * a.m[k] + (1.0 - beta1) * g;
                        a.v[k] = beta2 * a.v[k] + (1.0 - beta2) * g * g;
                        let u = lr * ((a.m[k] / bc1) / ((a.v[k] / bc2).sqrt() + eps) + weight_decay * theta[k]);
                        theta[k] -= u;
                    }
                }
            }
        }
    }

    fn sync_now(&mut self) {
        let s = self.sync;
        for l in 0..self.anchor.len() {
            let deltas: Vec<Vec<f64>> = (0..self.cols)
                .map(|j| self.theta[j][l].iter().zip(&self.anchor[l]).map(|(a, b)| a - b).collect())
                .collect();
            let mut norms = Vec::new();
            for j in 0..self.cols {
                let mut g = deltas[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                let e = &mut self.ema[j][l];
                let flagged = s.penalty.anomaly_elimination
                    && e.seen >= s.ema_warmup_rounds
                    && e.sigma > 0.0
                    && (g - e.mu) / e.sigma > s.delta;
                if flagged {
                    g = f64::INFINITY;
                } else if e.seen == 0 {
                    *e = Ema { mu: g, sigma: 0.0, seen: 1 };
                } else {
                    let mu = s.alpha * g + (1.0 - s.alpha) * e.mu;
                    e.sigma = ((1.0 - s.alpha) * e.sigma * e.sigma + s.alpha * (g - mu) * (g - mu)).sqrt();
                    e.mu = mu;
                    e.seen += 1;
                }
                norms.push(g);
            }
            let finite: Vec<f64> = norms.iter().copied().filter(|g| g.is_finite()).collect();
            if finite.is_empty() {
                for j in 0..self.cols {
                    self.theta[j][l] = self.anchor[l].clone();
                    self.adam[j][l] = self.adam_snap[j][l].clone();
                }
                continue;
            }
            let weights: Vec<f64> = if s.penalty.weighted_averaging {
                let e: Vec<f64> = norms.iter().map(|g| (-g).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            } else {
                norms
                    .iter()
                    .map(|g| if g.is_finite() { 1.0 / finite.len() as f64 } else { 0.0 })
                    .collect()
            };
            let n = self.anchor[l].len();
            let mut avg = vec![0.0; n];
            for j in 0..self.cols {
                if weights[j] > 0.0 {
                    for k in 0..n {
                        avg[k] += weights[j] * deltas[j][k];
                    }
                }
            }
            if s.penalty.gradient_clip {
                let gbar = avg.iter().map(|x| x * x).sum::<f64>().sqrt();
                let beta = (s.phi / (gbar + s.eps)).min(1.0);
                avg.iter_mut().for_each(|x| *x *= beta);
            }
            match s.outer {
                OuterOptConfig::Sgd { lr } => {
                    for k in 0..n {
                        self.anchor[l][k] += lr * avg[k];
                    }
                }
                OuterOptConfig::Nesterov { lr, momentum } => {
                    for k in 0..n {
                        self.momentum[l][k] = momentum * self.momentum[l][k] + avg[k];
                        self.anchor[l][k] += lr * (momentum * self.momentum[l][k] + avg[k]);
                    }
                }
            }
            for j in 0..self.cols {
                self.theta[j][l] = self.anchor[l].clone();
            }
        }
        self.local = 0;
    }

    pub fn run_round(&mut self) {
        if self.local > 0 {
            self.sync_now();
        }
        for p in 0..self.sync.tau {
            let warm = self.steps <= self.sync.t_warm;
            if !warm && self.local == 0 {
                self.adam_snap = self.adam.clone();
            }
            let mut grads: Vec<Vec<Vec<f64>>> = (0..self.cols).map(|j| self.grads(j, p)).collect();
            if warm {
                let mut mean = grads[0].clone();
                for g in &grads[1..] {
                    for (m, gl) in mean.iter_mut().zip(g) {
                        for (a, b) in m.iter_mut().zip(gl) {
                            *a += b;
                        }
                    }
                }
                for m in &mut mean {
                    m.iter_mut().for_each(|a| *a /= self.cols as f64);
                }
                grads = vec![mean; self.cols];
            }
            let lr = self.schedule.at_step(self.steps);
            for j in 0..self.cols {
                self.update(j, &grads[j], lr);
            }
            if warm {
                self.anchor = self.theta[0].clone();
            } else {
                self.local += 1;
            }
            self.steps += 1;
        }
        self.t += 1;
    }

    pub fn finish(&mut self) {
        if self.local > 0 {
            self.sync_now();
        }
    }

    pub fn anchor(&self) -> Vec<f64> {
        self.anchor.iter().flatten().copied().collect()
    }

    pub fn replica(&self, col: usize) -> Vec<f64> {
        self.theta[col].iter().flatten().copied().collect()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
