//! Paired synthetic corpora with a known alignment structure.
//!
//! Every concept owns a random signature vector and a token id. An image
//! carries a unique set of concepts, each planted as its signature over one
//! square block of the patch grid. Each caption lists the image's concept
//! tokens mixed with filler tokens in random order. `noise_level` blends
//! the grid toward Gaussian noise and replaces concept tokens with random
//! vocabulary draws.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Training images.
    pub num_pairs: usize,
    /// Held-out images appended after the training ones.
    pub val_pairs: usize,
    pub captions_per_image: usize,
    pub concept_count: usize,
    pub concepts_per_item: usize,
    /// Inclusive caption length range.
    pub sentence_len: (usize, usize),
    pub noise_level: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub grid_side: usize,
    pub in_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_pairs: 32,
            val_pairs: 0,
            captions_per_image: 5,
            concept_count: 16,
            concepts_per_item: 3,
            sentence_len: (4, 8),
            noise_level: 0.0,
            seed: 1,
            vocab_size: 64,
            grid_side: 16,
            in_dim: 16,
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

impl SyntheticSpec {
    pub fn num_images(&self) -> usize {
        self.num_pairs + self.val_pairs
    }

    /// Side of the square cell block a concept occupies.
    pub fn block_side(&self) -> usize {
        (self.grid_side / 4).max(1)
    }

    pub fn num_blocks(&self) -> usize {
        let per_side = self.grid_side / self.block_side();
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic corpus: {msg}")));
        if self.num_pairs == 0 {
            return bad("num_pairs must be positive".into());
        }
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level {} outside [0, 1]", self.noise_level));
        }
        if self.grid_side == 0 || self.in_dim == 0 {
            return bad("grid_side and in_dim must be positive".into());
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return bad(format!("sentence length range {lo}..={hi} is empty"));
        }
        if self.concept_count == 0 || self.concept_count > self.vocab_size {
            return bad(format!(
                "concept_count {} must be in 1..={}",
                self.concept_count, self.vocab_size
            ));
        }
        if self.concepts_per_item == 0 || self.concepts_per_item > self.concept_count {
            return bad(format!(
                "concepts_per_item {} must be in 1..={}",
                self.concepts_per_item, self.concept_count
            ));
        }
        if self.concepts_per_item > lo {
            return bad(format!(
                "{} concepts do not fit in a {lo}-token sentence",
                self.concepts_per_item
            ));
        }
        if hi > self.concepts_per_item && self.concept_count == self.vocab_size {
            return bad("no filler tokens left in the vocabulary".into());
        }
        if self.concepts_per_item > self.num_blocks() {
            return bad(format!(
                "{} concepts do not fit in {} grid blocks",
                self.concepts_per_item,
                self.num_blocks()
            ));
        }
        if binomial(self.concept_count, self.concepts_per_item) < self.num_images() as u128 {
            return bad(format!(
                "{} images need distinct concept sets, only {} exist",
                self.num_images(),
                binomial(self.concept_count, self.concepts_per_item)
            ));
        }
        Ok(())
    }
}

/// A generated dataset plus the latent structure behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dataset: Dataset,
    /// Sorted concept ids of every image.
    pub image_concepts: Vec<Vec<usize>>,
    /// One signature row per concept (concept_count × in_dim).
    pub signatures: Mat,
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = Mat::from_fn(spec.concept_count, spec.in_dim, |_, _| {
        rng.sample(StandardNormal)
    });

    let n = spec.num_images();
    let mut seen = BTreeSet::new();
    let mut image_concepts = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while image_concepts.len() < n {
        attempts += 1;
        if attempts > 1000 * n + 1000 {
            return Err(Error::Config(
                "could not draw distinct concept sets; raise concept_count".into(),
            ));
        }
        let mut set =
            index::sample(&mut rng, spec.concept_count, spec.concepts_per_item).into_vec();
        set.sort_unstable();
        if seen.insert(set.clone()) {
            image_concepts.push(set);
        }
    }

    let side = spec.grid_side;
    let block = spec.block_side();
    let per_side = side / block;
    let nu = spec.noise_level;
    let mut images = Vec::with_capacity(n);
    for concepts in &image_concepts {
        let mut signal = Mat::zeros(side * side, spec.in_dim);
        let blocks = index::sample(&mut rng, spec.num_blocks(), concepts.len()).into_vec();
        for (&c, &b) in concepts.iter().zip(&blocks) {
            let (br, bc) = (b / per_side, b % per_side);
            for r in br * block..(br + 1) * block {
                for col in bc * block..(bc + 1) * block {
                    signal
                        .row_mut(r * side + col)
                        .copy_from_slice(signatures.row(c));
                }
            }
        }
        let grid = Mat::from_fn(side * side, spec.in_dim, |r, c| {
            let noise: f64 = rng.sample(StandardNormal);
            (1.0 - nu) * signal.get(r, c) + nu * noise
        });
        images.push(grid);
    }

    let filler = spec.concept_count..spec.vocab_size;
    let mut texts = Vec::with_capacity(n * spec.captions_per_image);
    let mut text_image = Vec::with_capacity(n * spec.captions_per_image);
    for (i, concepts) in image_concepts.iter().enumerate() {
        for _ in 0..spec.captions_per_image {
            let len = rng.random_range(spec.sentence_len.0..=spec.sentence_len.1);
            let mut tokens: Vec<usize> = concepts
                .iter()
                .map(|&c| {
                    if rng.random::<f64>() < nu {
                        rng.random_range(0..spec.vocab_size)
                    } else {
                        c
                    }
                })
                .collect();
            while tokens.len() < len {
                tokens.push(rng.random_range(filler.clone()));
            }
            tokens.shuffle(&mut rng);
            texts.push(tokens);
            text_image.push(i);
        }
    }

    let dataset = Dataset::new(images, texts, text_image, spec.num_pairs, spec.vocab_size)?;
    Ok(Corpus {
        dataset,
        image_concepts,
        signatures,
    })
}
