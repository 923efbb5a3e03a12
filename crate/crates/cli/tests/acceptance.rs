//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hat::alignment::{
    attend, attention_maps, hierarchical_similarity, level_breakdown, AlignmentConfig, Direction,
};
use hat::data::{generate_corpus, FeatureFile, FeatureModality, RunConfig, Split};
use hat::encoders::{HatModel, LevelledFeatures};
use hat::eval::{evaluate, folded_eval, recall_at_k, DirectionMetrics, GroundTruth, ScoreMatrix};
use hat::objective::{
    evaluate_split, grad_check, triplet_loss, GradCheckSpec, TrainConfig, Trainer,
};
use hat::tensor::NORM_EPS;
use hat::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 200;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const INVARIANCE_CASES: usize = 100;
const INVARIANCE_TOL: f64 = 1e-6;
const OVERFIT_MAX_EPOCHS: usize = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_EPOCHS: usize = 12;
const ENSEMBLE_SLACK: f64 = 0.02;
const CORRUPTIONS: usize = 100;

/// Wide enough to memorize 32 pairs within the frozen-encoder phase.
const OVERFIT_CONFIG: &str = "\
grid_side=8
in_dim=16
stage_dims=32,64,64,64
stage_blocks=1,1,1,1
stage_heads=1,2,4,4
image_taps=2,3,4
vocab_size=32
max_len=8
text_dim=64
text_layers=3
text_heads=4
text_taps=1,2,3
align_dim=128
concepts=12
direction=ensemble
batch_size=12
lr=1e-3
";

const ABLATION_CONFIG: &str = "\
grid_side=8
in_dim=16
stage_dims=16,32,32,32
stage_blocks=1,1,1,1
stage_heads=1,2,4,4
image_taps=2,3,4
vocab_size=32
max_len=8
text_dim=32
text_layers=3
text_heads=4
text_taps=1,2,3
align_dim=64
concepts=16
direction=ensemble
batch_size=12
lr=1e-3
noise=0.3
pairs=200
val_pairs=100
";

const TINY_CONFIG: &str = "\
vocab_size=24
text_dim=8
text_layers=2
text_heads=2
max_len=6
text_taps=1,2
grid_side=4
in_dim=4
stage_dims=4,8,8
stage_blocks=1,1,1
stage_heads=1,2,2
image_taps=2,3
align_dim=8
concepts=8
concepts_per_item=2
sentence_min_len=3
sentence_max_len=6
pairs=8
val_pairs=4
lr=1e-3
epochs=3
freeze_epochs=1
batch_size=4
";

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_features(rng: &mut ChaCha8Rng, tokens: &[usize], dim: usize) -> LevelledFeatures {
    LevelledFeatures::new(tokens.iter().map(|&n| rand_mat(rng, n, dim)).collect())
}

fn config(direction: Direction, lambda: f64) -> AlignmentConfig {
    AlignmentConfig {
        lambda,
        direction,
        ..Default::default()
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// Explicit loops, no shared helpers with the library.
fn naive_direction(queries: &Mat, context: &Mat, lambda: f64, eps: f64) -> f64 {
    let (k_n, t_n, d) = (queries.rows(), context.rows(), queries.cols());
    let mut sims = vec![vec![0.0; t_n]; k_n];
    for k in 0..k_n {
        for t in 0..t_n {
            let (mut dot, mut qq, mut cc) = (0.0, 0.0, 0.0);
            for j in 0..d {
                dot += queries.get(k, j) * context.get(t, j);
                qq += queries.get(k, j) * queries.get(k, j);
                cc += context.get(t, j) * context.get(t, j);
            }
            sims[k][t] = dot / ((qq.sqrt() + NORM_EPS) * (cc.sqrt() + NORM_EPS));
        }
    }
    for t in 0..t_n {
        let mut sq = 0.0;
        for row in &sims {
            let h = if row[t] > 0.0 { row[t] } else { 0.0 };
            sq += h * h;
        }
        let n = (sq + eps).sqrt();
        for row in sims.iter_mut() {
            row[t] = if row[t] > 0.0 { row[t] / n } else { 0.0 };
        }
    }
    let mut total = 0.0;
    for k in 0..k_n {
        let mut weights = vec![0.0; t_n];
        let mut z = 0.0;
        for t in 0..t_n {
            weights[t] = (lambda * sims[k][t]).exp();
            z += weights[t];
        }
        let mut a = vec![0.0; d];
        for t in 0..t_n {
            for j in 0..d {
                a[j] += weights[t] / z * context.get(t, j);
            }
        }
        let (mut dot, mut qq, mut aa) = (0.0, 0.0, 0.0);
        for j in 0..d {
            dot += queries.get(k, j) * a[j];
            qq += queries.get(k, j) * queries.get(k, j);
            aa += a[j] * a[j];
        }
        total += dot / ((qq.sqrt() + NORM_EPS) * (aa.sqrt() + NORM_EPS));
    }
    total
}

fn naive_score(img: &LevelledFeatures, txt: &LevelledFeatures, cfg: &AlignmentConfig) -> f64 {
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for (v, w) in img.levels.iter().zip(&txt.levels) {
        i2t += naive_direction(v, w, cfg.lambda, cfg.eps);
        t2i += naive_direction(w, v, cfg.lambda, cfg.eps);
    }
    match cfg.direction {
        Direction::I2t => i2t,
        Direction::T2i => t2i,
        Direction::Ensemble => (i2t + t2i) / 2.0,
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for n in 0..ORACLE_INSTANCES {
        let d = rng.random_range(1..=16);
        let ks: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
        let ts: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
        let img = rand_features(&mut rng, &ks, d);
        let txt = rand_features(&mut rng, &ts, d);
        let direction = [Direction::I2t, Direction::T2i, Direction::Ensemble][n % 3];
        let cfg = config(direction, rng.random_range(0.0..20.0));
        let got = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - naive_score(&img, &txt, &cfg)).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!(
            "max |fast - naive| = {worst:.2e} over {ORACLE_INSTANCES} instances (tol {ORACLE_TOL:e}), {:.2}s of {}s",
            elapsed.as_secs_f64(),
            ORACLE_BUDGET.as_secs()
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let spec = GradCheckSpec::default();
    let mut worst: f64 = 0.0;
    let mut groups = 0;
    for seed in GRAD_SEEDS {
        let report = grad_check(&spec, seed).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error());
        groups = report.groups.len();
    }
    let elapsed = start.elapsed();
    check(
        worst <= GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max relative error {worst:.2e} over {groups} groups x {} seeds (tol {GRAD_TOL:e}), {:.1}s of {}s",
            GRAD_SEEDS.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn random_pair(rng: &mut ChaCha8Rng) -> (LevelledFeatures, LevelledFeatures) {
    let d = rng.random_range(2..=16);
    let ks: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
    let ts: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
    (rand_features(rng, &ks, d), rand_features(rng, &ts, d))
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    let directions = [Direction::I2t, Direction::T2i, Direction::Ensemble];

    let mut worst_row: f64 = 0.0;
    for n in 0..INVARIANCE_CASES {
        let (img, txt) = random_pair(&mut rng);
        let cfg = config(directions[n % 3], rng.random_range(0.0..100.0));
        for att in attention_maps(&img, &txt, &cfg).map_err(|e| e.to_string())? {
            for row in att.weights.iter_rows() {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    if worst_row > INVARIANCE_TOL {
        failures.push(format!("row sums off by {worst_row:.1e}"));
    }

    for n in 0..INVARIANCE_CASES {
        let (img, mut txt) = random_pair(&mut rng);
        let cfg = config(directions[n % 3], rng.random_range(0.0..20.0));
        let before = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        let level = rng.random_range(0..3);
        let c = rng.random_range(0.1..10.0);
        txt.levels[level] = txt.levels[level].map(|x| c * x);
        let after = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        if !rel_close(before, after, INVARIANCE_TOL) {
            failures.push(format!("word scale {before} vs {after}"));
            break;
        }
    }

    for _ in 0..INVARIANCE_CASES {
        let (mut img, txt) = random_pair(&mut rng);
        let cfg = config(Direction::I2t, rng.random_range(0.0..20.0));
        let before = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        let level = rng.random_range(0..3);
        let k = rng.random_range(0..img.levels[level].rows());
        let c = rng.random_range(0.1..10.0);
        for x in img.levels[level].row_mut(k) {
            *x *= c;
        }
        let after = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        if !rel_close(before, after, INVARIANCE_TOL) {
            failures.push(format!("region scale {before} vs {after}"));
            break;
        }
    }

    for _ in 0..INVARIANCE_CASES {
        let (img, txt) = random_pair(&mut rng);
        let cfg = config(Direction::I2t, rng.random_range(0.0..20.0));
        let before = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        let permuted = LevelledFeatures::new(
            txt.levels
                .iter()
                .map(|w| {
                    let mut order: Vec<usize> = (0..w.rows()).collect();
                    order.shuffle(&mut rng);
                    w.select_rows(&order).unwrap()
                })
                .collect(),
        );
        let after = hierarchical_similarity(&img, &permuted, &cfg).map_err(|e| e.to_string())?;
        if (before - after).abs() > INVARIANCE_TOL {
            failures.push(format!("permutation {before} vs {after}"));
            break;
        }
    }

    let mut worst_mean: f64 = 0.0;
    for _ in 0..INVARIANCE_CASES {
        let (k, t, d) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=16),
        );
        let s = Mat::from_fn(k, t, |_, _| rng.random_range(0.0..1.0));
        let w = rand_mat(&mut rng, t, d);
        let a = attend(&s, &w, 0.0).map_err(|e| e.to_string())?;
        for r in 0..k {
            for j in 0..d {
                let mean = (0..t).map(|i| w.get(i, j)).sum::<f64>() / t as f64;
                worst_mean = worst_mean.max((a.get(r, j) - mean).abs());
            }
        }
    }
    if worst_mean > INVARIANCE_TOL {
        failures.push(format!("lambda=0 mean off by {worst_mean:.1e}"));
    }

    for n in 0..INVARIANCE_CASES {
        let (img, txt) = random_pair(&mut rng);
        let mut cfg = config(directions[n % 2], rng.random_range(0.0..20.0));
        if n % 4 == 1 {
            cfg.levels_enabled = Some(vec![0, 2]);
        }
        let full = hierarchical_similarity(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        let parts = level_breakdown(&img, &txt, &cfg).map_err(|e| e.to_string())?;
        let sum = parts.iter().fold(0.0, |acc, &(_, s)| acc + s);
        if full.to_bits() != sum.to_bits() {
            failures.push(format!("additivity {full} vs {sum}"));
            break;
        }
    }

    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "6 properties x {INVARIANCE_CASES} cases hold (max row-sum error {worst_row:.1e})"
            )
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_4() -> Verdict {
    let exact = triplet_loss(0.8, 0.5, 0.9, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let m = 0.2;
        let s_pos = rng.random_range(-1.0..1.0);
        // land on both sides of each hinge, including exactly on it
        let pick = |rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
            0 => s_pos - m,
            _ => rng.random_range(-1.0..1.0),
        };
        let (a, b) = (pick(&mut rng), pick(&mut rng));
        let saturated = (a - s_pos) + m <= 0.0 && (b - s_pos) + m <= 0.0;
        if (triplet_loss(s_pos, a, b, m) == 0.0) != saturated {
            mismatches += 1;
        }
    }
    check(
        exact == 0.3 && mismatches == 0,
        format!("triplet_loss(0.8, 0.5, 0.9, 0.2) = {exact:?}; zero-iff-saturated mismatches: {mismatches}/10000"),
    )
}

fn hat_bin(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hat"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "hat {} failed: {}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn report_value(report: &str, key: &str) -> Result<f64, String> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
        .ok_or_else(|| format!("report lacks {key}"))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("overfit.cfg");
    std::fs::write(&cfg, OVERFIT_CONFIG).map_err(|e| e.to_string())?;
    let (data, run, ev) = (
        tmp.path().join("data"),
        tmp.path().join("run"),
        tmp.path().join("eval"),
    );
    let epochs = OVERFIT_MAX_EPOCHS.to_string();
    hat_bin(&[
        "gen-data",
        "--config",
        path(&cfg),
        "--pairs",
        "32",
        "--seed",
        "7",
        "--out",
        path(&data),
    ])?;
    hat_bin(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--seed",
        "7",
        "--epochs",
        &epochs,
        "--freeze-epochs",
        "10",
        "--target-r1",
        "1.0",
        "--out",
        path(&run),
    ])?;
    hat_bin(&[
        "eval",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--split",
        "train",
        "--out",
        path(&ev),
    ])?;
    let report = std::fs::read_to_string(ev.join("report.txt")).map_err(|e| e.to_string())?;
    let (i2t, t2i) = (
        report_value(&report, "i2t.r1")?,
        report_value(&report, "t2i.r1")?,
    );
    let log = std::fs::read_to_string(run.join("train.tsv")).map_err(|e| e.to_string())?;
    let epochs_run = log.lines().count() - 1;
    let elapsed = start.elapsed();
    check(
        i2t == 1.0 && t2i == 1.0 && epochs_run <= OVERFIT_MAX_EPOCHS && elapsed < OVERFIT_BUDGET,
        format!(
            "train R@1 i2t {i2t:.3} t2i {t2i:.3} after {epochs_run} epochs (max {OVERFIT_MAX_EPOCHS}), {:.0}s of {}s",
            elapsed.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    )
}

struct AblationRun {
    all_levels: f64,
    top_only: f64,
    i2t: f64,
    t2i: f64,
    ensemble: f64,
}

fn train_on(cfg: &RunConfig, data: &hat::data::Dataset) -> hat::Result<HatModel> {
    let model = HatModel::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, TrainConfig::from_run(cfg)?)?;
    let positives = data.positives(Split::Train);
    for _ in 0..cfg.schedule.epochs {
        trainer.train_epoch(data, &positives)?;
    }
    Ok(trainer.into_model())
}

fn ablation_run(seed: u64) -> hat::Result<AblationRun> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(ABLATION_CONFIG, Path::new("<ablation>"))?;
    cfg.set("seed", &seed.to_string())?;
    cfg.set("epochs", &ABLATION_EPOCHS.to_string())?;
    let data = generate_corpus(&cfg.synthetic)?.dataset;

    let full = train_on(&cfg, &data)?;
    let align = cfg.alignment()?;
    let score = |model: &HatModel, align: &AlignmentConfig| {
        evaluate_split(model, &data, Split::Val, align).map(|r| r.mean_r1())
    };
    let ensemble = score(&full, &align)?;
    let i2t = score(&full, &align.with_direction(Direction::I2t))?;
    let t2i = score(&full, &align.with_direction(Direction::T2i))?;

    let mut top = cfg.clone();
    let last = *cfg.model.image.tap_stages.last().unwrap();
    top.set("levels", &last.to_string())?;
    let top_model = train_on(&top, &data)?;
    let top_only = score(&top_model, &top.alignment()?)?;
    Ok(AblationRun {
        all_levels: ensemble,
        top_only,
        i2t,
        t2i,
        ensemble,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criteria_6_and_7() -> (Verdict, Verdict) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in ABLATION_SEEDS {
        match ablation_run(seed) {
            Ok(r) => runs.push(r),
            Err(e) => {
                let msg = format!("seed {seed}: {e}");
                return (Err(msg.clone()), Err(msg));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let all = mean(runs.iter().map(|r| r.all_levels));
    let top = mean(runs.iter().map(|r| r.top_only));
    let i2t = mean(runs.iter().map(|r| r.i2t));
    let t2i = mean(runs.iter().map(|r| r.t2i));
    let ens = mean(runs.iter().map(|r| r.ensemble));
    let c6 = check(
        all >= top,
        format!(
            "mean val R@1 all levels {all:.4} vs top only {top:.4} over {} seeds ({secs:.0}s for both)",
            runs.len()
        ),
    );
    let best = i2t.max(t2i);
    let c7 = check(
        ens >= best - ENSEMBLE_SLACK,
        format!(
            "mean val R@1 ensemble {ens:.4} vs i2t {i2t:.4}, t2i {t2i:.4} (slack {ENSEMBLE_SLACK})"
        ),
    );
    (c6, c7)
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut mismatches = 0;
    for _ in 0..50 {
        let images = rng.random_range(2..=12);
        let per = rng.random_range(1..=5);
        let owners: Vec<usize> = (0..images)
            .flat_map(|i| std::iter::repeat_n(i, per))
            .collect();
        let gt = GroundTruth::new(images, owners).map_err(|e| e.to_string())?;
        // coarse values force ties
        let scores = Mat::from_fn(images, images * per, |_, _| rng.random_range(0..4) as f64);
        let scores = ScoreMatrix::new(scores, None).map_err(|e| e.to_string())?;
        let full = evaluate(&scores, &gt).map_err(|e| e.to_string())?;
        let folded = folded_eval(&scores, &gt, images, 1).map_err(|e| e.to_string())?;
        if full.i2t != folded.i2t || full.t2i != folded.t2i {
            mismatches += 1;
        }
    }
    let ranks = [1, 2, 6];
    let r = [
        recall_at_k(&ranks, 1),
        recall_at_k(&ranks, 5),
        recall_at_k(&ranks, 10),
    ];
    let m = DirectionMetrics::from_ranks(&ranks);
    let want = [1.0 / 3.0, 2.0 / 3.0, 1.0];
    check(
        mismatches == 0 && r == want && [m.r1, m.r5, m.r10] == want,
        format!("single fold == full on 50/50 matrices ({mismatches} mismatches); ranks {{1,2,6}} -> R@1/5/10 = {:.4}/{:.4}/{:.4}", r[0], r[1], r[2]),
    )
}

/// Byte offsets of every header and length field.
fn structural_offsets(file: &FeatureFile) -> Vec<(usize, usize)> {
    let mut fields = vec![(0, 4), (4, 2), (6, 2), (8, 4)];
    let mut pos = 12;
    for item in &file.items {
        fields.push((pos, 4));
        pos += 4;
        for level in &item.levels {
            fields.push((pos, 4));
            fields.push((pos + 4, 4));
            pos += 8 + 8 * level.rows() * level.cols();
        }
    }
    fields
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let items: Vec<LevelledFeatures> = (0..4)
        .map(|_| {
            let tokens: Vec<usize> = (0..3).map(|_| rng.random_range(1..=6)).collect();
            let dim = rng.random_range(1..=5);
            let mut f = rand_features(&mut rng, &tokens, dim);
            f.levels[0].set(0, 0, f64::MIN_POSITIVE / 3.0);
            f
        })
        .collect();
    let file = FeatureFile::new(FeatureModality::Text, items);
    let bytes = file.to_bytes();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = tmp.path().join("f.hatf");
    hat::data::write_features(&p, &file).map_err(|e| e.to_string())?;
    let back = hat::data::read_features(&p).map_err(|e| e.to_string())?;
    let bit_exact = back.modality == file.modality
        && back.items.len() == file.items.len()
        && back.items.iter().zip(&file.items).all(|(a, b)| {
            a.levels.len() == b.levels.len()
                && a.levels.iter().zip(&b.levels).all(|(x, y)| {
                    x.shape() == y.shape()
                        && x.data()
                            .iter()
                            .zip(y.data())
                            .all(|(u, v)| u.to_bits() == v.to_bits())
                })
        })
        && back.to_bytes() == bytes;

    let fields = structural_offsets(&file);
    let (mut rejected, mut crashed, mut accepted) = (0, 0, 0);
    for n in 0..CORRUPTIONS {
        let mut bad = bytes.clone();
        match n % 3 {
            0 => bad.truncate(rng.random_range(0..bytes.len())),
            1 => {
                let extra = rng.random_range(1..=16);
                bad.extend((0..extra).map(|_| rng.random::<u8>()));
            }
            _ => {
                let (at, len) = fields[rng.random_range(0..fields.len())];
                let original = bad[at..at + len].to_vec();
                while bad[at..at + len] == original[..] {
                    for b in &mut bad[at..at + len] {
                        *b = rng.random();
                    }
                }
            }
        }
        match catch_unwind(AssertUnwindSafe(|| FeatureFile::from_bytes(&bad))) {
            Ok(Err(hat::Error::Parse { .. })) => rejected += 1,
            Ok(_) => accepted += 1,
            Err(_) => crashed += 1,
        }
    }
    check(
        bit_exact && rejected == CORRUPTIONS,
        format!(
            "round trip bit-exact: {bit_exact}; {rejected}/{CORRUPTIONS} damaged files rejected, {accepted} accepted, {crashed} panics"
        ),
    )
}

fn pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).map_err(|e| e.to_string())?;
    let (data, run, ev) = (root.join("data"), root.join("run"), root.join("eval"));
    hat_bin(&[
        "gen-data",
        "--config",
        path(&cfg),
        "--seed",
        "11",
        "--out",
        path(&data),
    ])?;
    hat_bin(&[
        "train",
        "--config",
        path(&cfg),
        "--seed",
        "11",
        "--data",
        path(&data),
        "--out",
        path(&run),
    ])?;
    hat_bin(&[
        "eval",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--out",
        path(&ev),
    ])?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((
        read(&run.join("model.ckpt"))?,
        read(&ev.join("report.txt"))?,
        read(&run.join("train.tsv"))?,
    ))
}

fn criterion_10() -> Verdict {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    check(
        first == second,
        format!(
            "checkpoint ({} bytes) identical: {}; report identical: {}; training log identical: {}",
            first.0.len(),
            first.0 == second.0,
            first.1 == second.1,
            first.2 == second.2
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let names = [
        "oracle equivalence",
        "gradient fidelity",
        "invariance suite",
        "triplet loss arithmetic",
        "overfit reproduction",
        "hierarchy ablation direction",
        "ensemble direction",
        "protocol correctness",
        "format robustness",
        "determinism",
    ];
    let mut verdicts: Vec<Option<Verdict>> = vec![None; 10];
    let mut report = |n: usize, v: Verdict| {
        let (tag, detail) = match &v {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {:>2} {tag} {}: {detail}", n, names[n - 1]);
        verdicts[n - 1] = Some(v);
    };
    report(1, guarded(criterion_1));
    report(2, guarded(criterion_2));
    report(3, guarded(criterion_3));
    report(4, guarded(criterion_4));
    report(5, guarded(criterion_5));
    let (c6, c7) = catch_unwind(criteria_6_and_7)
        .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    report(6, c6);
    report(7, c7);
    report(8, guarded(criterion_8));
    report(9, guarded(criterion_9));
    report(10, guarded(criterion_10));
    let failed = verdicts
        .iter()
        .filter(|v| !matches!(v, Some(Ok(_))))
        .count();
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
