//! Imitation learning: the two-head loss, backpropagated gradients, a seeded
//! SGD trainer and scripted demonstration collection.

mod dataset;
mod expert;

pub use dataset::{DemoDataset, RouteSpan, Sample};
pub use expert::{collect_demos, CollectConfig, ExpertConfig, ExpertDriver, ScriptedExpert};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{HeadGradient, ParamGradients, PolicyError, PolicyNet, PolicyOutput};
use crate::world::WorldError;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (loss {loss}, lr {learning_rate})")]
    NonFinite { epoch: usize, batch: usize, loss: f64, learning_rate: f64 },
    #[error("expert failed to complete a route after {0} attempts")]
    ExpertFailed(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Smallest class probability fed to the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Squared error of the labelled action row.
    pub action: f64,
    /// `-log p[y_c]`, unweighted.
    pub ce: f64,
    /// `action + k * ce`.
    pub total: f64,
}

pub fn loss(out: &PolicyOutput, sample: &Sample, k: f64) -> LossParts {
    let row = out.v[sample.y_c.index()];
    let action = (row[0] - sample.y_s).powi(2) + (row[1] - sample.y_t).powi(2);
    let ce = -out.p[sample.y_c.index()].max(PROB_FLOOR).ln();
    LossParts { action, ce, total: action + k * ce }
}

/// Gradient of [`loss`] with respect to the head outputs.
pub fn head_gradient(out: &PolicyOutput, sample: &Sample, k: f64) -> HeadGradient {
    let c = sample.y_c.index();
    let mut g = HeadGradient::default();
    g.d_v[c][0] = 2.0 * (out.v[c][0] - sample.y_s);
    g.d_v[c][1] = 2.0 * (out.v[c][1] - sample.y_t);
    for j in 0..3 {
        let target = if j == c { 1.0 } else { 0.0 };
        g.d_logits[j] = k * (out.p[j] - target);
    }
    g
}

/// Mean loss gradient over `batch`, together with the mean loss.
pub fn grad(net: &PolicyNet, batch: &[&Sample], k: f64) -> Result<(ParamGradients, f64), LearnError> {
    if batch.is_empty() {
        return Err(LearnError::InvalidData("empty batch".into()));
    }
    let mut grads = ParamGradients::zeros_like(net);
    let mut total = 0.0;
    for s in batch {
        let trace = net.forward_trace(&s.obs)?;
        total += loss(&trace.output, s, k).total;
        net.backward(&trace, &head_gradient(&trace.output, s, k), &mut grads);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((grads, total / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term.
    pub k: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Fraction of epochs after which the learning rate drops tenfold.
    pub decay_at: f64,
    /// L2 penalty on weight tensors (biases are exempt).
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { k: 1.0, learning_rate: 1e-2, batch_size: 32, epochs: 30, seed: 0, momentum: 0.9, decay_at: 0.8, weight_decay: 0.0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.into()));
        if !(self.k >= 0.0) {
            return bad("k must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let cutoff = (self.decay_at * self.epochs as f64).floor() as usize;
        if epoch >= cutoff && cutoff > 0 {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.epochs.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

/// Seeded mini-batch SGD with momentum. The returned network is rounded to
/// checkpoint precision so that saving and reloading it is lossless.
pub fn train(mut net: PolicyNet, data: &DemoDataset, cfg: &TrainConfig) -> Result<(PolicyNet, LossCurve), LearnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LearnError::InvalidData("dataset is empty".into()));
    }
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = ParamGradients::zeros_like(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (g, mean) = grad(&net, &batch, cfg.k)?;
            if !mean.is_finite() || !g.is_finite() {
                return Err(LearnError::NonFinite { epoch, batch: bi, loss: mean, learning_rate: lr });
            }
            sum += mean * batch.len() as f64;
            for ((p, v), gp) in net.params_mut().iter_mut().zip(&mut velocity.0).zip(&g.0) {
                let decay = if p.name.ends_with(".weight") { cfg.weight_decay } else { 0.0 };
                for ((w, vel), gw) in p.data.iter_mut().zip(v.iter_mut()).zip(gp) {
                    *vel = cfg.momentum * *vel + gw + decay * *w;
                    *w -= lr * *vel;
                }
            }
        }
        let epoch_loss = sum / data.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.5}");
        curve.epochs.push(epoch_loss);
    }
    net.round_to_f32();
    Ok((net, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Instruction, LayerSpec, NetConfig};
    use crate::sensor::Observation;

    fn out_with(v: [[f64; 2]; 3], p: [f64; 3]) -> PolicyOutput {
        PolicyOutput { v, p, logits: p.map(f64::ln) }
    }

    fn sample(y_s: f64, y_t: f64, y_c: Instruction) -> Sample {
        Sample { obs: Observation::blank(1, 1), y_s, y_t, y_c }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let out = out_with([[0.0, 0.0], [0.3, 0.4], [0.0, 0.0]], [0.0, 1.0, 0.0]);
        let l = loss(&out, &sample(0.3, 0.4, Instruction::Middle), 1.0);
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn uniform_classes_cost_log_three() {
        let third = 1.0 / 3.0;
        let out = out_with([[0.3, 0.4]; 3], [third; 3]);
        let l = loss(&out, &sample(0.3, 0.4, Instruction::Left), 1.0);
        assert!((l.total - 3f64.ln()).abs() < 1e-12);
        assert!((l.total - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn unlabelled_rows_do_not_matter() {
        let s = sample(0.1, 0.2, Instruction::Right);
        let a = out_with([[0.9, 0.9], [-0.9, 0.0], [0.5, 0.5]], [0.2, 0.3, 0.5]);
        let b = out_with([[-0.2, 0.1], [0.7, 1.0], [0.5, 0.5]], [0.2, 0.3, 0.5]);
        assert_eq!(loss(&a, &s, 1.0).total, loss(&b, &s, 1.0).total);
    }

    #[test]
    fn loss_decomposes() {
        let out = out_with([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], [0.2, 0.5, 0.3]);
        let s = sample(-0.2, 0.1, Instruction::Middle);
        let l = loss(&out, &s, 2.5);
        assert_eq!(l.total, l.action + 2.5 * l.ce);
        let zero_p = out_with([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], [0.5, 0.0, 0.5]);
        assert!(loss(&zero_p, &s, 1.0).total.is_finite());
    }

    fn tiny_net() -> PolicyNet {
        PolicyNet::new(NetConfig {
            input_width: 12,
            input_height: 8,
            layers: vec![LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 2 }, LayerSpec::Dense { units: 6 }],
            seed: 4,
        })
        .unwrap()
    }

    fn obs(seed: u64) -> Observation {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut o = Observation::blank(12, 8);
        o.pixels.iter_mut().for_each(|p| *p = rng.random());
        o
    }

    #[test]
    fn zero_k_with_exact_labels_leaves_other_rows_untouched() {
        let net = tiny_net();
        let o = obs(1);
        let out = net.forward(&o).unwrap();
        let s = Sample { obs: o, y_s: out.v[0][0], y_t: out.v[0][1], y_c: Instruction::Left };
        let (g, _) = grad(&net, &[&s], 0.0).unwrap();
        let n = net.params().len();
        // action head rows are (steer, throttle) pairs; rows 1 and 2 are unlabelled
        let head_w = &g.0[n - 4];
        let head_b = &g.0[n - 3];
        let fan_in = net.params()[n - 4].shape[1];
        assert!(head_w[2 * fan_in..].iter().all(|&x| x == 0.0));
        assert!(head_b[2..].iter().all(|&x| x == 0.0));
        // k = 0 cuts the class head out entirely
        assert!(g.0[n - 2].iter().chain(&g.0[n - 1]).all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_samples_average_out() {
        let net = tiny_net();
        let s = Sample { obs: obs(2), y_s: 0.3, y_t: 0.2, y_c: Instruction::Right };
        let (once, l1) = grad(&net, &[&s], 1.0).unwrap();
        let (twice, l2) = grad(&net, &[&s, &s], 1.0).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in once.0.iter().flatten().zip(twice.0.iter().flatten()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(grad(&tiny_net(), &[], 1.0).is_err());
    }

    #[test]
    fn memorises_a_single_sample() {
        let mut data = DemoDataset::default();
        data.push_route(Instruction::Left, vec![Sample { obs: obs(3), y_s: -0.4, y_t: 0.05, y_c: Instruction::Left }]);
        let cfg = TrainConfig { epochs: 300, batch_size: 1, learning_rate: 0.05, ..Default::default() };
        let (_, curve) = train(tiny_net(), &data, &cfg).unwrap();
        assert!(curve.last().unwrap() < 1e-3, "final loss {:?}", curve.last());
    }

    #[test]
    fn training_is_deterministic() {
        let mut data = DemoDataset::default();
        let samples = (0..10)
            .map(|i| Sample { obs: obs(10 + i), y_s: (i as f64 / 10.0) - 0.5, y_t: 0.1, y_c: Instruction::Right })
            .collect();
        data.push_route(Instruction::Right, samples);
        let cfg = TrainConfig { epochs: 5, batch_size: 3, seed: 7, ..Default::default() };
        let (a, ca) = train(tiny_net(), &data, &cfg).unwrap();
        let (b, cb) = train(tiny_net(), &data, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_training_aborts() {
        let mut data = DemoDataset::default();
        data.push_route(Instruction::Left, vec![Sample { obs: obs(5), y_s: 0.9, y_t: 0.9, y_c: Instruction::Left }]);
        let cfg = TrainConfig { learning_rate: 1e200, epochs: 3, ..Default::default() };
        assert!(matches!(train(tiny_net(), &data, &cfg), Err(LearnError::NonFinite { .. })));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { epochs: 10, ..Default::default() };
        assert_eq!(cfg.learning_rate_at(7), 1e-2);
        assert!((cfg.learning_rate_at(8) - 1e-3).abs() < 1e-18);
    }
}
