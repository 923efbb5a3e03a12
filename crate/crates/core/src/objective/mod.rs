//! Bidirectional triplet ranking loss, negative mining, Adam, and the
//! freeze-then-finetune training loop.

mod grad_check;
mod trainer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape, Var};

pub use grad_check::{grad_check, GradCheckReport, GradCheckSpec, GroupCheck};
pub use trainer::{
    encode_split, evaluate_split, score_split, EpochStats, TrainConfig, Trainer, LOG_HEADER,
};

/// `[m − s_pos + s_neg_text]₊ + [m − s_pos + s_neg_img]₊`.
pub fn triplet_loss(s_pos: f64, s_neg_text: f64, s_neg_img: f64, m: f64) -> f64 {
    ((s_neg_text - s_pos) + m).max(0.0) + ((s_neg_img - s_pos) + m).max(0.0)
}

/// Tape version of [`triplet_loss`]; the hinge has zero slope at its kink.
pub fn triplet_loss_on_tape(
    tape: &mut Tape,
    s_pos: Var,
    s_neg_text: Var,
    s_neg_img: Var,
    m: f64,
) -> Result<Var> {
    let hinge = |tape: &mut Tape, neg: Var| -> Result<Var> {
        let d = tape.sub(neg, s_pos)?;
        let d = tape.add_scalar(d, m)?;
        tape.relu(d)
    };
    let a = hinge(tape, s_neg_text)?;
    let b = hinge(tape, s_neg_img)?;
    tape.add(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Epochs during which only the level projections are updated.
    pub freeze_epochs: usize,
    pub margin: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr0: 1e-5,
            decay_every: 10,
            decay_factor: 10.0,
            freeze_epochs: 10,
            margin: 0.2,
            epochs: 30,
            seed: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr0),
            ("decay_factor", self.decay_factor),
            ("margin", self.margin),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.decay_every == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "decay_every and epochs must be positive".into(),
            ));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::Config(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// `lr0 / decay_factor^⌊epoch / decay_every⌋` for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every) as i32;
        self.lr0 / self.decay_factor.powi(k)
    }

    pub fn encoders_frozen(&self, epoch: usize) -> bool {
        epoch < self.freeze_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeStrategy {
    Random,
    Hardest,
}

impl FromStr for NegativeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "hardest" | "hardest-in-batch" => Ok(Self::Hardest),
            other => Err(Error::Config(format!(
                "unknown negative strategy {other:?}"
            ))),
        }
    }
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Hardest => "hardest",
        })
    }
}

/// Positives with one negative text and one negative image each, all as
/// global ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub pairs: Vec<(usize, usize)>,
    pub neg_texts: Vec<usize>,
    pub neg_images: Vec<usize>,
}

/// Picks in-batch negatives. `scores[(a, b)]` is the similarity of the
/// image of pair `a` with the text of pair `b`. A candidate is valid when
/// its image differs from the positive's image; ties go to the earlier pair.
pub fn sample_negatives<R: Rng>(
    pairs: &[(usize, usize)],
    strategy: NegativeStrategy,
    scores: &Mat,
    rng: &mut R,
) -> Result<TripletBatch> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::Sampling(format!("batch of {b} has no negatives")));
    }
    if scores.shape() != (b, b) {
        return Err(Error::Shape {
            op: "sample_negatives",
            lhs: (b, b),
            rhs: scores.shape(),
        });
    }
    let mut neg_texts = Vec::with_capacity(b);
    let mut neg_images = Vec::with_capacity(b);
    for (k, &(img, _)) in pairs.iter().enumerate() {
        let valid: Vec<usize> = (0..b).filter(|&j| pairs[j].0 != img).collect();
        if valid.is_empty() {
            return Err(Error::Sampling(format!(
                "every pair in the batch shows image {img}"
            )));
        }
        let (jt, ji) = match strategy {
            NegativeStrategy::Random => (
                valid[rng.random_range(0..valid.len())],
                valid[rng.random_range(0..valid.len())],
            ),
            NegativeStrategy::Hardest => {
                let argmax = |f: &dyn Fn(usize) -> f64| {
                    valid
                        .iter()
                        .copied()
                        .fold(None, |best: Option<usize>, j| match best {
                            Some(bj) if f(bj) >= f(j) => Some(bj),
                            _ => Some(j),
                        })
                        .unwrap()
                };
                (argmax(&|j| scores.get(k, j)), argmax(&|j| scores.get(j, k)))
            }
        };
        neg_texts.push(pairs[jt].1);
        neg_images.push(pairs[ji].0);
    }
    Ok(TripletBatch {
        pairs: pairs.to_vec(),
        neg_texts,
        neg_images,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Step counts are kept per parameter, so a
/// tensor that starts training late gets a properly corrected first step.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<Mat>, Vec<Mat>) = shapes
            .into_iter()
            .map(|(r, c)| (Mat::zeros(r, c), Mat::zeros(r, c)))
            .unzip();
        let steps = vec![0; m.len()];
        Self {
            config,
            m,
            v,
            steps,
        }
    }

    /// Updates `param` (slot `index`) against `grad` with step size `lr`.
    pub fn step(&mut self, index: usize, param: &mut Mat, grad: &Mat, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.steps[index] += 1;
        let t = self.steps[index] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_arithmetic() {
        assert_eq!(triplet_loss(0.8, 0.5, 0.9, 0.2), 0.3);
        assert_eq!(triplet_loss(1.0, 0.5, 0.75, 0.25), 0.0);
        // margin exactly met on both sides
        assert_eq!(triplet_loss(0.75, 0.5, 0.5, 0.25), 0.0);
    }

    #[test]
    fn tape_loss_matches_and_kink_has_zero_slope() {
        let mut tape = Tape::new();
        let p = tape.leaf(Mat::scalar(0.8), true);
        let nt = tape.leaf(Mat::scalar(0.5), true);
        let ni = tape.leaf(Mat::scalar(0.9), true);
        let l = triplet_loss_on_tape(&mut tape, p, nt, ni, 0.2).unwrap();
        assert_eq!(tape.scalar(l), 0.3);
        let g = tape.backward_scalar(l).unwrap();
        assert_eq!(g.get(p).unwrap().get(0, 0), -1.0);
        assert_eq!(g.get(nt).unwrap().get(0, 0), 0.0);
        assert_eq!(g.get(ni).unwrap().get(0, 0), 1.0);

        let mut tape = Tape::new();
        let p = tape.leaf(Mat::scalar(0.5), true);
        let n = tape.leaf(Mat::scalar(0.25), true);
        let l = triplet_loss_on_tape(&mut tape, p, n, n, 0.25).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let g = tape.backward_scalar(l).unwrap();
        assert_eq!(g.get(p).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn schedule_decays_by_factor() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0), 1e-5);
        assert_eq!(s.lr_at(9), 1e-5);
        for (epoch, expected) in [(10, 1e-6), (20, 1e-7), (29, 1e-7)] {
            assert!((s.lr_at(epoch) - expected).abs() <= 1e-15 * expected);
        }
        assert_eq!(s.lr_at(10), 1e-5 / 10.0);
        assert_eq!(s.lr_at(25), 1e-5 / 100.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        let bad = TrainSchedule {
            freeze_epochs: 40,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainSchedule {
            margin: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_of_two_has_one_choice() {
        let pairs = [(3, 10), (5, 20)];
        let scores = Mat::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.7]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hard = sample_negatives(&pairs, NegativeStrategy::Hardest, &scores, &mut rng).unwrap();
        let rand = sample_negatives(&pairs, NegativeStrategy::Random, &scores, &mut rng).unwrap();
        assert_eq!(hard, rand);
        assert_eq!(hard.neg_texts, vec![20, 10]);
        assert_eq!(hard.neg_images, vec![5, 3]);
    }

    #[test]
    fn degenerate_batches_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = sample_negatives(
            &[(0, 0)],
            NegativeStrategy::Hardest,
            &Mat::zeros(1, 1),
            &mut rng,
        );
        assert!(matches!(one, Err(Error::Sampling(_))));
        let same = sample_negatives(
            &[(0, 0), (0, 1)],
            NegativeStrategy::Random,
            &Mat::zeros(2, 2),
            &mut rng,
        );
        assert!(matches!(same, Err(Error::Sampling(_))));
    }

    #[test]
    fn random_negatives_are_reproducible() {
        let pairs: Vec<(usize, usize)> = (0..8).map(|i| (i / 2, i)).collect();
        let scores = Mat::zeros(8, 8);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            sample_negatives(&pairs, NegativeStrategy::Random, &scores, &mut rng).unwrap()
        };
        let a = draw();
        assert_eq!(a, draw());
        for (k, &(img, txt)) in pairs.iter().enumerate() {
            assert_ne!(a.neg_images[k], img);
            assert_ne!(a.neg_texts[k], txt);
            assert_ne!(a.neg_texts[k] / 2, img);
        }
    }

    #[test]
    fn adam_ignores_zero_gradients_and_moves_against_sign() {
        let mut adam = Adam::new(AdamConfig::default(), [(1, 2)]);
        let mut p = Mat::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = p.clone();
        adam.step(0, &mut p, &Mat::zeros(1, 2), 0.1);
        assert_eq!(p, before);
        let mut adam = Adam::new(AdamConfig::default(), [(1, 2)]);
        adam.step(0, &mut p, &Mat::from_rows(&[vec![3.0, -0.5]]).unwrap(), 0.1);
        // the bias-corrected first step has magnitude lr
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-7);
    }
}
