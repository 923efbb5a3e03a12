use super::{AlignmentConfig, Direction};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn directional_level(
    tape: &mut Tape,
    regions: Var,
    words: Var,
    direction: Direction,
    config: &AlignmentConfig,
) -> Result<Var> {
    let (queries, context) = match direction {
        Direction::I2t => (regions, words),
        Direction::T2i => (words, regions),
        Direction::Ensemble => unreachable!("ensemble is resolved by the caller"),
    };
    let sims = tape.cosine_matrix(queries, context)?;
    let normalized = tape.hinge_col_normalize(sims, config.eps)?;
    let weights = tape.softmax_rows(normalized, config.lambda)?;
    let attended = tape.matmul(weights, context)?;
    let cos = tape.row_cosine(queries, attended)?;
    let score = tape.sum(cos)?;
    if config.per_level_mean {
        let n = tape.value(queries).rows();
        tape.scale(score, 1.0 / n as f64)
    } else {
        Ok(score)
    }
}

fn directional_total(
    tape: &mut Tape,
    image: &[Var],
    text: &[Var],
    direction: Direction,
    config: &AlignmentConfig,
    levels: &[usize],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &l in levels {
        let s = directional_level(tape, image[l], text[l], direction, config)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Config("no level enabled".into()))
}

/// Records the hierarchical similarity of one image-text pair on `tape`,
/// evaluating the same kernels in the same order as
/// [`super::hierarchical_similarity`].
pub fn score_on_tape(
    tape: &mut Tape,
    image: &[Var],
    text: &[Var],
    config: &AlignmentConfig,
) -> Result<Var> {
    if image.len() != text.len() {
        return Err(Error::Config(format!(
            "image has {} levels, text has {}",
            image.len(),
            text.len()
        )));
    }
    let levels = config.enabled_levels(image.len())?;
    match config.direction {
        Direction::Ensemble => {
            let a = directional_total(tape, image, text, Direction::I2t, config, &levels)?;
            let b = directional_total(tape, image, text, Direction::T2i, config, &levels)?;
            let sum = tape.add(a, b)?;
            tape.scale(sum, 0.5)
        }
        d => directional_total(tape, image, text, d, config, &levels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::hierarchical_similarity;
    use crate::encoders::LevelledFeatures;
    use crate::tensor::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_score_is_bit_identical_to_pure_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for direction in [Direction::I2t, Direction::T2i, Direction::Ensemble] {
            for per_level_mean in [false, true] {
                let img: Vec<Mat> = [6, 3, 1]
                    .iter()
                    .map(|&k| Mat::from_fn(k, 5, |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let txt: Vec<Mat> = (0..3)
                    .map(|_| Mat::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let cfg = AlignmentConfig {
                    direction,
                    per_level_mean,
                    ..Default::default()
                };
                let pure = hierarchical_similarity(
                    &LevelledFeatures::new(img.clone()),
                    &LevelledFeatures::new(txt.clone()),
                    &cfg,
                )
                .unwrap();
                let mut tape = Tape::new();
                let iv: Vec<Var> = img.into_iter().map(|m| tape.leaf(m, true)).collect();
                let tv: Vec<Var> = txt.into_iter().map(|m| tape.leaf(m, true)).collect();
                let s = score_on_tape(&mut tape, &iv, &tv, &cfg).unwrap();
                assert_eq!(tape.scalar(s), pure);
            }
        }
    }
}
