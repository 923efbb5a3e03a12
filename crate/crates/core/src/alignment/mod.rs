//! Hierarchical stacked cross attention.
//!
//! At each level, every token of the query modality attends over the
//! tokens of the other modality:
//!
//! 1. `s[k][t]` = cosine between query token `k` and context token `t`;
//! 2. hinge at zero and L2-normalize each context column over the query axis;
//! 3. `α[k]` = softmax over `t` of `λ · s̄[k]`;
//! 4. `a[k] = Σ_t α[k][t] · c[t]`;
//! 5. level score = `Σ_k cos(q[k], a[k])`.
//!
//! Image-to-text (`i2t`) uses regions as queries and words as context;
//! text-to-image (`t2i`) swaps the roles. The hierarchical score is the sum of
//! enabled level scores, and the ensemble score is the mean of both
//! directions.

mod export;
mod graph;

use std::fmt;
use std::str::FromStr;

pub use export::{export_attention, parse_attention_csv, AttentionRecord};
pub use graph::score_on_tape;

use crate::encoders::LevelledFeatures;
use crate::error::{Error, Result};
use crate::eval::ScoreMatrix;
use crate::tensor::{
    cosine_matrix, hinge_col_normalize, matmul, row_cosine, softmax_rows, Mat, NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Regions attend over words.
    I2t,
    /// Words attend over regions.
    T2i,
    /// Mean of both directional scores.
    Ensemble,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Self::I2t),
            "t2i" => Ok(Self::T2i),
            "ensemble" => Ok(Self::Ensemble),
            other => Err(Error::Config(format!(
                "unknown direction {other:?} (expected i2t, t2i or ensemble)"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::I2t => "i2t",
            Self::T2i => "t2i",
            Self::Ensemble => "ensemble",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    /// Softmax temperature.
    pub lambda: f64,
    pub direction: Direction,
    /// 0-based level positions to score; `None` means every level.
    pub levels_enabled: Option<Vec<usize>>,
    /// Divide each level score by its query token count.
    pub per_level_mean: bool,
    pub eps: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda: 9.0,
            direction: Direction::I2t,
            levels_enabled: None,
            per_level_mean: false,
            eps: NORM_EPS,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda {} is not finite",
                self.lambda
            )));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if let Some(levels) = &self.levels_enabled {
            if levels.is_empty() {
                return Err(Error::Config("at least one level must be enabled".into()));
            }
        }
        Ok(())
    }

    /// Enabled level positions for an item with `num_levels` levels.
    pub fn enabled_levels(&self, num_levels: usize) -> Result<Vec<usize>> {
        match &self.levels_enabled {
            None => Ok((0..num_levels).collect()),
            Some(levels) => {
                if levels.is_empty() {
                    return Err(Error::Config("at least one level must be enabled".into()));
                }
                if let Some(&bad) = levels.iter().find(|&&l| l >= num_levels) {
                    return Err(Error::Config(format!(
                        "level {bad} enabled but features have {num_levels} levels"
                    )));
                }
                let mut sorted = levels.clone();
                sorted.sort_unstable();
                sorted.dedup();
                Ok(sorted)
            }
        }
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        Self {
            direction,
            ..self.clone()
        }
    }
}

/// Attention produced while scoring one level in one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAttention {
    pub level: usize,
    pub direction: Direction,
    /// K×T for i2t, T×K for t2i; rows sum to one.
    pub weights: Mat,
    /// Region-word cosines, always K×T.
    pub raw_sims: Mat,
}

/// `s[k][t] = cos(v_k, w_t)` for regions `v` (K×d) and words `w` (T×d).
pub fn region_word_sims(regions: &Mat, words: &Mat) -> Result<Mat> {
    if regions.rows() == 0 || words.rows() == 0 {
        return Err(Error::Input(
            "alignment needs at least one token per side".into(),
        ));
    }
    cosine_matrix(regions, words)
}

/// Hinge and normalize each column over the row (query) axis.
pub fn hinge_normalize(sims: &Mat, eps: f64) -> Mat {
    hinge_col_normalize(sims, eps)
}

/// Attended context: `softmax_rows(λ·s̄) · context`.
pub fn attend(normalized: &Mat, context: &Mat, lambda: f64) -> Result<Mat> {
    let weights = softmax_rows(normalized, lambda);
    matmul(&weights, context)
}

struct Attended {
    score: f64,
    weights: Mat,
    sims: Mat,
}

/// Queries attend over context; returns the summed query-vs-attended cosine.
fn stacked_attention(queries: &Mat, context: &Mat, lambda: f64, eps: f64) -> Result<Attended> {
    let sims = region_word_sims(queries, context)?;
    let normalized = hinge_col_normalize(&sims, eps);
    let weights = softmax_rows(&normalized, lambda);
    let attended = matmul(&weights, context)?;
    let score = row_cosine(queries, &attended)?.sum();
    Ok(Attended {
        score,
        weights,
        sims,
    })
}

fn directional_level(
    regions: &Mat,
    words: &Mat,
    direction: Direction,
    config: &AlignmentConfig,
    level: usize,
) -> Result<(f64, LevelAttention)> {
    let (queries, context) = match direction {
        Direction::I2t => (regions, words),
        Direction::T2i => (words, regions),
        Direction::Ensemble => unreachable!("ensemble is resolved by the caller"),
    };
    let att = stacked_attention(queries, context, config.lambda, config.eps)?;
    let mut score = att.score;
    if config.per_level_mean {
        score *= 1.0 / queries.rows() as f64;
    }
    let raw_sims = match direction {
        Direction::I2t => att.sims,
        _ => att.sims.transpose(),
    };
    Ok((
        score,
        LevelAttention {
            level,
            direction,
            weights: att.weights,
            raw_sims,
        },
    ))
}

/// Score of one level. For the ensemble direction the returned attention is
/// the image-to-text one.
pub fn level_similarity(
    regions: &Mat,
    words: &Mat,
    config: &AlignmentConfig,
) -> Result<(f64, LevelAttention)> {
    level_similarity_at(regions, words, config, 0)
}

fn level_similarity_at(
    regions: &Mat,
    words: &Mat,
    config: &AlignmentConfig,
    level: usize,
) -> Result<(f64, LevelAttention)> {
    match config.direction {
        Direction::Ensemble => {
            let (a, att) = directional_level(regions, words, Direction::I2t, config, level)?;
            let (b, _) = directional_level(regions, words, Direction::T2i, config, level)?;
            Ok((ensemble_score(a, b), att))
        }
        d => directional_level(regions, words, d, config, level),
    }
}

fn check_levels(img: &LevelledFeatures, txt: &LevelledFeatures) -> Result<()> {
    if img.num_levels() != txt.num_levels() {
        return Err(Error::Config(format!(
            "image has {} levels, text has {}",
            img.num_levels(),
            txt.num_levels()
        )));
    }
    Ok(())
}

/// Per-level scores of the enabled levels, in level order, for a single
/// direction.
fn directional_breakdown(
    img: &LevelledFeatures,
    txt: &LevelledFeatures,
    config: &AlignmentConfig,
    direction: Direction,
) -> Result<Vec<(usize, f64)>> {
    check_levels(img, txt)?;
    config
        .enabled_levels(img.num_levels())?
        .into_iter()
        .map(|l| {
            directional_level(&img.levels[l], &txt.levels[l], direction, config, l)
                .map(|(s, _)| (l, s))
        })
        .collect()
}

fn directional_total(
    img: &LevelledFeatures,
    txt: &LevelledFeatures,
    config: &AlignmentConfig,
    direction: Direction,
) -> Result<f64> {
    let mut total = 0.0;
    for (_, s) in directional_breakdown(img, txt, config, direction)? {
        total += s;
    }
    Ok(total)
}

/// Sum of enabled level similarities (mean of both directions for the
/// ensemble).
pub fn hierarchical_similarity(
    img: &LevelledFeatures,
    txt: &LevelledFeatures,
    config: &AlignmentConfig,
) -> Result<f64> {
    match config.direction {
        Direction::Ensemble => Ok(ensemble_score(
            directional_total(img, txt, config, Direction::I2t)?,
            directional_total(img, txt, config, Direction::T2i)?,
        )),
        d => directional_total(img, txt, config, d),
    }
}

/// Per-level contributions `(level, score)`; their in-order sum is
/// [`hierarchical_similarity`] for single directions.
pub fn level_breakdown(
    img: &LevelledFeatures,
    txt: &LevelledFeatures,
    config: &AlignmentConfig,
) -> Result<Vec<(usize, f64)>> {
    match config.direction {
        Direction::Ensemble => {
            let a = directional_breakdown(img, txt, config, Direction::I2t)?;
            let b = directional_breakdown(img, txt, config, Direction::T2i)?;
            Ok(a.into_iter()
                .zip(b)
                .map(|((l, x), (_, y))| (l, ensemble_score(x, y)))
                .collect())
        }
        d => directional_breakdown(img, txt, config, d),
    }
}

/// Attention maps of every enabled level. The ensemble direction yields
/// both directions' maps.
pub fn attention_maps(
    img: &LevelledFeatures,
    txt: &LevelledFeatures,
    config: &AlignmentConfig,
) -> Result<Vec<LevelAttention>> {
    check_levels(img, txt)?;
    let directions: &[Direction] = match config.direction {
        Direction::Ensemble => &[Direction::I2t, Direction::T2i],
        Direction::I2t => &[Direction::I2t],
        Direction::T2i => &[Direction::T2i],
    };
    let mut out = Vec::new();
    for &d in directions {
        for l in config.enabled_levels(img.num_levels())? {
            out.push(directional_level(&img.levels[l], &txt.levels[l], d, config, l)?.1);
        }
    }
    Ok(out)
}

/// Combination of the two directional scores.
#[inline]
pub fn ensemble_score(i2t: f64, t2i: f64) -> f64 {
    0.5 * (i2t + t2i)
}

/// Exhaustive images × texts score matrix. With `with_levels`, the
/// per-level breakdown is kept alongside.
pub fn score_all(
    images: &[LevelledFeatures],
    texts: &[LevelledFeatures],
    config: &AlignmentConfig,
    with_levels: bool,
) -> Result<ScoreMatrix> {
    config.validate()?;
    let (n, m) = (images.len(), texts.len());
    let num_levels = images.first().map_or(0, LevelledFeatures::num_levels);
    let mut scores = Mat::zeros(n, m);
    let mut levels = with_levels.then(|| vec![Mat::zeros(n, m); num_levels]);
    for (i, img) in images.iter().enumerate() {
        for (j, txt) in texts.iter().enumerate() {
            if let Some(levels) = levels.as_mut() {
                let parts = level_breakdown(img, txt, config)?;
                for &(l, s) in &parts {
                    levels[l].set(i, j, s);
                }
                scores.set(i, j, parts.iter().fold(0.0, |acc, &(_, s)| acc + s));
            } else {
                scores.set(i, j, hierarchical_similarity(img, txt, config)?);
            }
        }
    }
    ScoreMatrix::new(scores, levels)
}
