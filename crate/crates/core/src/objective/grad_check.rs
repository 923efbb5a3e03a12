//! Central finite differences against the tape gradient of the full
//! pipeline: encoders, projections, alignment and triplet loss.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{sample_negatives, triplet_loss_on_tape, NegativeStrategy, TripletBatch};
use crate::alignment::{hierarchical_similarity, score_on_tape, AlignmentConfig};
use crate::encoders::{
    Binder, HatModel, ImageEncoderConfig, LevelledFeatures, ModelConfig, ParamId, TextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape};

/// Failure threshold; anything above it aborts the check.
pub const HARD_LIMIT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSpec {
    pub model: ModelConfig,
    pub alignment: AlignmentConfig,
    pub margin: f64,
    /// Image-caption pairs in the probe batch.
    pub pairs: usize,
    pub encoders_frozen: bool,
    /// Base step; central differences at it and at half of it are combined
    /// by Richardson extrapolation.
    pub step: f64,
    /// Entries probed per tensor; `None` probes every entry.
    pub max_entries: Option<usize>,
    /// Floor of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                text: TextEncoderConfig {
                    vocab_size: 16,
                    model_dim: 8,
                    num_layers: 2,
                    num_heads: 2,
                    max_len: 5,
                    tap_layers: vec![1, 2],
                    ..Default::default()
                },
                image: ImageEncoderConfig {
                    grid_side: 4,
                    in_dim: 4,
                    stage_dims: vec![4, 8, 8],
                    blocks_per_stage: vec![1, 1, 1],
                    stage_heads: vec![1, 2, 2],
                    tap_stages: vec![2, 3],
                    mlp_ratio: 2,
                },
                align_dim: 8,
            },
            alignment: AlignmentConfig::default(),
            margin: 0.2,
            pairs: 3,
            encoders_frozen: false,
            step: 3e-5,
            max_entries: None,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    /// Entries whose every probe straddled a kink.
    pub skipped: usize,
    pub analytic_max: f64,
    pub numeric_max: f64,
    /// `max|a − n| / max(max|a|, max|n|, floor)` over the probed entries.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
    /// Parameters that receive no gradient (frozen).
    pub untracked: Vec<String>,
    /// Smallest distance of any hinge argument from its kink.
    pub min_hinge_gap: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<32} {:>7} {:>12} {:>12}",
            "group", "entries", "max|grad|", "rel_error"
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<32} {:>7} {:>12.4e} {:>12.4e}",
                g.name, g.entries, g.analytic_max, g.rel_error
            );
        }
        let _ = writeln!(
            out,
            "seed={} loss={:.6} max_rel_error={:.4e}",
            self.seed,
            self.loss,
            self.max_rel_error()
        );
        out
    }
}

struct Evaluation {
    loss: f64,
    grads: Option<Vec<Option<Mat>>>,
    gap: f64,
    pattern: Vec<bool>,
}

struct Probe {
    images: Vec<Mat>,
    texts: Vec<Vec<usize>>,
    triplets: TripletBatch,
}

fn batch_loss(
    model: &HatModel,
    probe: &Probe,
    spec: &GradCheckSpec,
    trainable: Option<Vec<bool>>,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let want_grads = trainable.is_some();
    let mut binder = match trainable {
        Some(mask) => Binder::new(model.params(), mask),
        None => Binder::frozen(model.params()),
    };
    let images = probe
        .images
        .iter()
        .map(|g| model.encode_image_on_tape(&mut tape, &mut binder, g))
        .collect::<Result<Vec<_>>>()?;
    let texts = probe
        .texts
        .iter()
        .map(|t| model.encode_text_on_tape(&mut tape, &mut binder, t))
        .collect::<Result<Vec<_>>>()?;
    let t = &probe.triplets;
    let mut total = None;
    let mut gap = f64::INFINITY;
    for (k, &(i, j)) in t.pairs.iter().enumerate() {
        let pos = score_on_tape(&mut tape, &images[i], &texts[j], &spec.alignment)?;
        let nt = score_on_tape(
            &mut tape,
            &images[i],
            &texts[t.neg_texts[k]],
            &spec.alignment,
        )?;
        let ni = score_on_tape(
            &mut tape,
            &images[t.neg_images[k]],
            &texts[j],
            &spec.alignment,
        )?;
        for neg in [nt, ni] {
            gap = gap.min(((tape.scalar(neg) - tape.scalar(pos)) + spec.margin).abs());
        }
        let l = triplet_loss_on_tape(&mut tape, pos, nt, ni, spec.margin)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Input("empty probe batch".into()))?;
    let loss = tape.scalar(total);
    let grads = if want_grads {
        Some(binder.param_grads(&tape.backward_scalar(total)?))
    } else {
        None
    };
    Ok(Evaluation {
        loss,
        grads,
        gap,
        pattern: tape.kink_pattern(),
    })
}

fn probe(model: &HatModel, spec: &GradCheckSpec, rng: &mut ChaCha8Rng) -> Result<Probe> {
    let cfg = model.config();
    let side = cfg.image.grid_side;
    let images: Vec<Mat> = (0..spec.pairs)
        .map(|_| {
            Mat::from_fn(side * side, cfg.image.in_dim, |_, _| {
                rng.sample(StandardNormal)
            })
        })
        .collect();
    let texts: Vec<Vec<usize>> = (0..spec.pairs)
        .map(|_| {
            let len = rng.random_range(2.min(cfg.text.max_len)..=cfg.text.max_len);
            (0..len)
                .map(|_| rng.random_range(0..cfg.text.vocab_size))
                .collect()
        })
        .collect();
    let feats_i = images
        .iter()
        .map(|g| model.encode_image(g))
        .collect::<Result<Vec<LevelledFeatures>>>()?;
    let feats_t = texts
        .iter()
        .map(|t| model.encode_text(t))
        .collect::<Result<Vec<LevelledFeatures>>>()?;
    let pairs: Vec<(usize, usize)> = (0..spec.pairs).map(|k| (k, k)).collect();
    let scores = Mat::from_fn(spec.pairs, spec.pairs, |a, b| {
        hierarchical_similarity(&feats_i[a], &feats_t[b], &spec.alignment).unwrap_or(f64::NAN)
    });
    let triplets = sample_negatives(&pairs, NegativeStrategy::Hardest, &scores, rng)?;
    Ok(Probe {
        images,
        texts,
        triplets,
    })
}

/// Compares analytic and finite-difference gradients for every trainable
/// tensor. Hardest negatives are mined once at the unperturbed point and
/// held fixed.
pub fn grad_check(spec: &GradCheckSpec, seed: u64) -> Result<GradCheckReport> {
    spec.alignment.validate()?;
    if spec.pairs < 2 {
        return Err(Error::Config("grad check needs at least 2 pairs".into()));
    }
    let mut model = HatModel::new(spec.model.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let probe = probe(&model, spec, &mut rng)?;
    let mask = model.trainable_mask(spec.encoders_frozen);
    let base = batch_loss(&model, &probe, spec, Some(mask.clone()))?;
    let grads = base.grads.expect("gradients requested");

    let mut groups = Vec::new();
    let mut untracked = Vec::new();
    for (i, &trainable) in mask.iter().enumerate() {
        let id = ParamId(i);
        let name = model.params().name(id).to_string();
        if !trainable {
            untracked.push(name);
            continue;
        }
        let size = model.params().get(id).data().len();
        let analytic = grads[i].clone().unwrap_or_else(|| {
            let (r, c) = model.params().get(id).shape();
            Mat::zeros(r, c)
        });
        let entries: Vec<usize> = match spec.max_entries {
            Some(n) if n < size => rand::seq::index::sample(&mut rng, size, n).into_vec(),
            _ => (0..size).collect(),
        };
        let (mut a_max, mut n_max, mut diff_max) = (0.0f64, 0.0f64, 0.0f64);
        let mut skipped = 0;
        for &e in &entries {
            let original = model.params().get(id).data()[e];
            let mut numeric = None;
            // shrink the step until every probe stays on the base point's smooth piece
            'shrink: for shrink in [1.0, 0.1, 0.01] {
                let h = spec.step * shrink;
                let mut central = [0.0; 2];
                for (slot, step) in central.iter_mut().zip([h, 0.5 * h]) {
                    model.params_mut().get_mut(id).data_mut()[e] = original + step;
                    let plus = batch_loss(&model, &probe, spec, None)?;
                    model.params_mut().get_mut(id).data_mut()[e] = original - step;
                    let minus = batch_loss(&model, &probe, spec, None)?;
                    model.params_mut().get_mut(id).data_mut()[e] = original;
                    if plus.pattern != base.pattern || minus.pattern != base.pattern {
                        continue 'shrink;
                    }
                    *slot = (plus.loss - minus.loss) / (2.0 * step);
                }
                // Richardson extrapolation cancels the h^2 term
                numeric = Some((4.0 * central[1] - central[0]) / 3.0);
                break;
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = analytic.data()[e];
            a_max = a_max.max(a.abs());
            n_max = n_max.max(numeric.abs());
            diff_max = diff_max.max((a - numeric).abs());
        }
        groups.push(GroupCheck {
            name,
            entries: entries.len() - skipped,
            skipped,
            analytic_max: a_max,
            numeric_max: n_max,
            rel_error: diff_max / a_max.max(n_max).max(spec.floor),
        });
    }
    let report = GradCheckReport {
        seed,
        loss: base.loss,
        groups,
        untracked,
        min_hinge_gap: base.gap,
    };
    let failing: Vec<String> = report
        .groups
        .iter()
        .filter(|g| !(g.rel_error <= HARD_LIMIT))
        .map(|g| format!("{} ({:.3e})", g.name, g.rel_error))
        .collect();
    if !failing.is_empty() {
        return Err(Error::GradCheck(failing.join(", ")));
    }
    Ok(report)
}
