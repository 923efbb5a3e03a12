//! Recall@K evaluation over an exhaustive image × text score matrix, with
//! full-corpus and folded (averaged over contiguous image ranges)
//! protocols. An image may have several matching captions; image-to-text
//! retrieval counts the best-ranked one.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Hierarchical similarities, images along rows and texts along columns,
/// with an optional per-level breakdown of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Mat,
    levels: Option<Vec<Mat>>,
}

impl ScoreMatrix {
    pub fn new(scores: Mat, levels: Option<Vec<Mat>>) -> Result<Self> {
        if let Some(levels) = &levels {
            if let Some(bad) = levels.iter().find(|l| l.shape() != scores.shape()) {
                return Err(Error::Shape {
                    op: "score matrix level breakdown",
                    lhs: scores.shape(),
                    rhs: bad.shape(),
                });
            }
        }
        Ok(Self { scores, levels })
    }

    pub fn scores(&self) -> &Mat {
        &self.scores
    }

    pub fn levels(&self) -> Option<&[Mat]> {
        self.levels.as_deref()
    }

    pub fn num_images(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_texts(&self) -> usize {
        self.scores.cols()
    }

    /// Scores of every text for image `i`.
    pub fn image_row(&self, i: usize) -> Vec<f64> {
        self.scores.row(i).to_vec()
    }

    /// Scores of every image for text `j`.
    pub fn text_column(&self, j: usize) -> Vec<f64> {
        (0..self.scores.rows())
            .map(|i| self.scores.get(i, j))
            .collect()
    }

    /// Restriction to the given image and text ids, in the given order.
    pub fn submatrix(&self, images: &[usize], texts: &[usize]) -> ScoreMatrix {
        let pick =
            |m: &Mat| Mat::from_fn(images.len(), texts.len(), |r, c| m.get(images[r], texts[c]));
        ScoreMatrix {
            scores: pick(&self.scores),
            levels: self.levels.as_ref().map(|ls| ls.iter().map(pick).collect()),
        }
    }
}

/// Caption ownership: every text belongs to exactly one image and every
/// image owns at least one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    text_to_image: Vec<usize>,
    image_to_texts: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(num_images: usize, text_to_image: Vec<usize>) -> Result<Self> {
        let mut image_to_texts = vec![Vec::new(); num_images];
        for (t, &i) in text_to_image.iter().enumerate() {
            let slot = image_to_texts.get_mut(i).ok_or_else(|| {
                Error::Input(format!("text {t} refers to image {i} of {num_images}"))
            })?;
            slot.push(t);
        }
        if let Some(i) = image_to_texts.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("image {i} has no matching text")));
        }
        Ok(Self {
            text_to_image,
            image_to_texts,
        })
    }

    pub fn num_images(&self) -> usize {
        self.image_to_texts.len()
    }

    pub fn num_texts(&self) -> usize {
        self.text_to_image.len()
    }

    pub fn image_of(&self, text: usize) -> usize {
        self.text_to_image[text]
    }

    pub fn texts_of(&self, image: usize) -> &[usize] {
        &self.image_to_texts[image]
    }
}

/// Candidate ids ordered by descending score; equal scores keep ascending
/// id order.
pub fn rank_candidates(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Input("no candidates to rank".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("candidate {i} has non-finite score")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// 1-based rank `target` would receive from [`rank_candidates`].
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < target))
        .count()
}

/// Fraction of ranks ≤ k. An empty rank list scores 0.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

fn median(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
}

impl DirectionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let mean_rank = if ranks.is_empty() {
            0.0
        } else {
            ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
        };
        Self {
            r1: recall_at_k(ranks, 1),
            r5: recall_at_k(ranks, 5),
            r10: recall_at_k(ranks, 10),
            median_rank: median(ranks),
            mean_rank,
        }
    }

    fn mean_of(items: &[DirectionMetrics]) -> Self {
        let n = items.len() as f64;
        let avg = |f: fn(&DirectionMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            r1: avg(|m| m.r1),
            r5: avg(|m| m.r5),
            r10: avg(|m| m.r10),
            median_rank: avg(|m| m.median_rank),
            mean_rank: avg(|m| m.mean_rank),
        }
    }

    fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("r1", self.r1),
            ("r5", self.r5),
            ("r10", self.r10),
            ("medr", self.median_rank),
            ("meanr", self.mean_rank),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    /// Image-to-text retrieval (images are queries).
    pub i2t: DirectionMetrics,
    /// Text-to-image retrieval (texts are queries).
    pub t2i: DirectionMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub i2t: DirectionMetrics,
    pub t2i: DirectionMetrics,
    /// Per-fold results; empty for a full-corpus evaluation.
    pub folds: Vec<FoldReport>,
}

/// Best rank of each image's matching texts, and rank of each text's image.
pub fn retrieval_ranks(scores: &ScoreMatrix, gt: &GroundTruth) -> Result<(Vec<usize>, Vec<usize>)> {
    if scores.num_images() != gt.num_images() || scores.num_texts() != gt.num_texts() {
        return Err(Error::Input(format!(
            "score matrix is {}x{}, ground truth covers {} images and {} texts",
            scores.num_images(),
            scores.num_texts(),
            gt.num_images(),
            gt.num_texts()
        )));
    }
    if !scores.scores().is_finite() {
        return Err(Error::Input("score matrix has non-finite entries".into()));
    }
    let i2t = (0..gt.num_images())
        .map(|i| {
            let row = scores.image_row(i);
            gt.texts_of(i)
                .iter()
                .map(|&t| rank_of(&row, t))
                .min()
                .expect("every image owns a text")
        })
        .collect();
    let t2i = (0..gt.num_texts())
        .map(|t| rank_of(&scores.text_column(t), gt.image_of(t)))
        .collect();
    Ok((i2t, t2i))
}

/// Full-corpus evaluation: every query ranks every candidate.
pub fn evaluate(scores: &ScoreMatrix, gt: &GroundTruth) -> Result<RetrievalReport> {
    let (i2t, t2i) = retrieval_ranks(scores, gt)?;
    Ok(RetrievalReport {
        i2t: DirectionMetrics::from_ranks(&i2t),
        t2i: DirectionMetrics::from_ranks(&t2i),
        folds: Vec::new(),
    })
}

/// Evaluates `num_folds` contiguous image ranges of `fold_size` images (with
/// their texts) independently and averages the metrics.
pub fn folded_eval(
    scores: &ScoreMatrix,
    gt: &GroundTruth,
    fold_size: usize,
    num_folds: usize,
) -> Result<RetrievalReport> {
    if fold_size == 0 || num_folds == 0 {
        return Err(Error::Input(
            "fold size and fold count must be positive".into(),
        ));
    }
    if gt.num_images() < fold_size * num_folds {
        return Err(Error::Input(format!(
            "{} images cannot fill {num_folds} folds of {fold_size}",
            gt.num_images()
        )));
    }
    let mut folds = Vec::with_capacity(num_folds);
    for f in 0..num_folds {
        let images: Vec<usize> = (f * fold_size..(f + 1) * fold_size).collect();
        let mut texts = Vec::new();
        let mut owner = Vec::new();
        for (local, &img) in images.iter().enumerate() {
            for &t in gt.texts_of(img) {
                texts.push(t);
                owner.push((t, local));
            }
        }
        // keep texts in ascending id order so tie-breaking matches the full corpus
        owner.sort_unstable();
        texts.sort_unstable();
        let fold_gt = GroundTruth::new(images.len(), owner.iter().map(|&(_, i)| i).collect())?;
        let report = evaluate(&scores.submatrix(&images, &texts), &fold_gt)?;
        folds.push(FoldReport {
            i2t: report.i2t,
            t2i: report.t2i,
        });
    }
    let i2t: Vec<_> = folds.iter().map(|f| f.i2t).collect();
    let t2i: Vec<_> = folds.iter().map(|f| f.t2i).collect();
    Ok(RetrievalReport {
        i2t: DirectionMetrics::mean_of(&i2t),
        t2i: DirectionMetrics::mean_of(&t2i),
        folds,
    })
}

impl RetrievalReport {
    /// Mean R@1 over both retrieval directions.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.i2t.r1 + self.t2i.r1)
    }

    /// `metric=value` per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut emit = |prefix: &str, m: &DirectionMetrics| {
            for (k, v) in m.entries() {
                let _ = writeln!(out, "{prefix}{k}={v}");
            }
        };
        emit("i2t.", &self.i2t);
        emit("t2i.", &self.t2i);
        for (f, fold) in self.folds.iter().enumerate() {
            emit(&format!("fold{}.i2t.", f + 1), &fold.i2t);
            emit(&format!("fold{}.t2i.", f + 1), &fold.t2i);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "task", "R@1", "R@5", "R@10", "medr", "meanr"
        );
        let mut row = |name: &str, m: &DirectionMetrics| {
            let _ = writeln!(
                out,
                "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.1} {:>8.2}",
                name,
                100.0 * m.r1,
                100.0 * m.r5,
                100.0 * m.r10,
                m.median_rank,
                m.mean_rank
            );
        };
        for (f, fold) in self.folds.iter().enumerate() {
            row(&format!("fold{} i2t", f + 1), &fold.i2t);
            row(&format!("fold{} t2i", f + 1), &fold.t2i);
        }
        row("i2t", &self.i2t);
        row("t2i", &self.t2i);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_candidates(&[0.1, 0.9, 0.5]).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_candidates(&[0.3; 4]).unwrap(), vec![0, 1, 2, 3]);
        assert!(rank_candidates(&[]).is_err());
        assert!(rank_candidates(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn recall_examples() {
        let ranks = [1, 2, 6];
        assert!((recall_at_k(&ranks, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&ranks, 5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&ranks, 10), 1.0);
        for k in [1, 5, 10] {
            assert_eq!(recall_at_k(&[1, 1, 1], k), 1.0);
        }
    }

    #[test]
    fn rank_of_agrees_with_ordering() {
        let scores = [0.2, 0.7, 0.2, -1.0, 0.7];
        let order = rank_candidates(&scores).unwrap();
        for (pos, &id) in order.iter().enumerate() {
            assert_eq!(rank_of(&scores, id), pos + 1);
        }
    }

    #[test]
    fn ground_truth_invariants() {
        assert!(GroundTruth::new(2, vec![0, 0, 1]).is_ok());
        assert!(GroundTruth::new(2, vec![0, 0]).is_err());
        assert!(GroundTruth::new(1, vec![0, 1]).is_err());
    }

    #[test]
    fn multi_caption_uses_best_rank() {
        // image 0 owns texts 0 and 1; text 1 is its top candidate
        let scores = Mat::from_rows(&[vec![0.1, 0.9, 0.5], vec![0.8, 0.2, 0.3]]).unwrap();
        let sm = ScoreMatrix::new(scores, None).unwrap();
        let gt = GroundTruth::new(2, vec![0, 0, 1]).unwrap();
        let (i2t, t2i) = retrieval_ranks(&sm, &gt).unwrap();
        assert_eq!(i2t, vec![1, 2]);
        assert_eq!(t2i, vec![2, 1, 2]);
    }

    #[test]
    fn two_fold_average() {
        // fold 1: 2 images, 1 of 2 i2t hits at R@1; fold 2: 2 of 2
        let scores = Mat::from_rows(&[
            vec![0.1, 0.9, 0.0, 0.0],
            vec![0.5, 0.6, 0.0, 0.0],
            vec![0.0, 0.0, 0.9, 0.1],
            vec![0.0, 0.0, 0.1, 0.9],
        ])
        .unwrap();
        let sm = ScoreMatrix::new(scores, None).unwrap();
        let gt = GroundTruth::new(4, vec![0, 1, 2, 3]).unwrap();
        let rep = folded_eval(&sm, &gt, 2, 2).unwrap();
        assert_eq!(rep.folds.len(), 2);
        assert_eq!(rep.folds[0].i2t.r1, 0.5);
        assert_eq!(rep.folds[1].i2t.r1, 1.0);
        assert_eq!(rep.i2t.r1, 0.75);
        assert!(folded_eval(&sm, &gt, 3, 2).is_err());
    }

    #[test]
    fn report_formats() {
        let sm = ScoreMatrix::new(Mat::identity(3), None).unwrap();
        let gt = GroundTruth::new(3, vec![0, 1, 2]).unwrap();
        let rep = evaluate(&sm, &gt).unwrap();
        let kv = rep.to_kv();
        assert!(kv.contains("i2t.r1=1\n"));
        assert!(kv.contains("t2i.medr=1\n"));
        assert!(rep.to_table().contains("100.00"));
    }
}
