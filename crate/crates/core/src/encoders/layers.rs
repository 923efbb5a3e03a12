//! Building blocks shared by both encoders: affine maps, layer norm,
//! pre-norm transformer blocks with multi-head self attention, and 2×2
//! patch merging.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Binder, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Mat, Tape, Var, LAYER_NORM_EPS};

/// Uniform in ±1/sqrt(fan_in).
pub(crate) fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn init(
        params: &mut ModelParams,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = params.insert(format!("{name}.w"), fan_in_uniform(rng, fan_in, fan_out));
        let bias = bias.then(|| params.insert(format!("{name}.b"), Mat::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.var(tape, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = binder.var(tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn init(params: &mut ModelParams, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.insert(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: params.insert(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let g = binder.var(tape, self.gamma);
        let b = binder.var(tape, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `h + mlp(ln(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub num_heads: usize,
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub(crate) fn init(
        params: &mut ModelParams,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            num_heads,
            ln_attn: LayerNorm::init(params, &format!("{name}.ln_attn"), dim),
            query: Linear::init(params, rng, &format!("{name}.attn.q"), dim, dim, true),
            key: Linear::init(params, rng, &format!("{name}.attn.k"), dim, dim, true),
            value: Linear::init(params, rng, &format!("{name}.attn.v"), dim, dim, true),
            out: Linear::init(params, rng, &format!("{name}.attn.o"), dim, dim, true),
            ln_mlp: LayerNorm::init(params, &format!("{name}.ln_mlp"), dim),
            fc1: Linear::init(params, rng, &format!("{name}.mlp.fc1"), dim, hidden, true),
            fc2: Linear::init(params, rng, &format!("{name}.mlp.fc2"), hidden, dim, true),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let normed = self.ln_attn.forward(tape, binder, x)?;
        let attended = self.self_attention(tape, binder, normed)?;
        let h = tape.add(x, attended)?;

        let normed = self.ln_mlp.forward(tape, binder, h)?;
        let hidden = self.fc1.forward(tape, binder, normed)?;
        let hidden = tape.gelu(hidden)?;
        let mlp = self.fc2.forward(tape, binder, hidden)?;
        tape.add(h, mlp)
    }

    fn self_attention(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let q = self.query.forward(tape, binder, x)?;
        let k = self.key.forward(tape, binder, x)?;
        let v = self.value.forward(tape, binder, x)?;
        let dim = tape.value(q).cols();
        let head_dim = dim / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let start = h * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let weights = tape.softmax_rows(logits, scale)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.out.forward(tape, binder, merged)
    }
}

/// Side length of a square token grid, or a shape error if `tokens` is not
/// a square with an even side.
fn reducible_side(tokens: usize, dim: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side == 0 || side * side != tokens || side % 2 != 0 {
        return Err(Error::Shape {
            op: "patch_merge (token grid must be square with even side)",
            lhs: (tokens, dim),
            rhs: (side, side),
        });
    }
    Ok(side)
}

/// Row indices of the four members of every 2×2 neighbourhood, in the
/// order (top-left, top-right, bottom-left, bottom-right), one list per
/// member, raster order over output tokens.
fn merge_gathers(side: usize) -> [Vec<usize>; 4] {
    let half = side / 2;
    let mut out: [Vec<usize>; 4] = Default::default();
    for i in 0..half {
        for j in 0..half {
            let (r, c) = (2 * i, 2 * j);
            out[0].push(r * side + c);
            out[1].push(r * side + c + 1);
            out[2].push((r + 1) * side + c);
            out[3].push((r + 1) * side + c + 1);
        }
    }
    out
}

/// Concatenates every 2×2 neighbourhood of a raster-ordered square token
/// grid ((2h·2w)×d → (h·w)×4d) and applies `projection` (4d×d').
pub fn patch_merge(tokens: &Mat, projection: &Mat) -> Result<Mat> {
    let side = reducible_side(tokens.rows(), tokens.cols())?;
    let d = tokens.cols();
    let gathers = merge_gathers(side);
    let n = gathers[0].len();
    let concat = Mat::from_fn(n, 4 * d, |r, c| tokens.get(gathers[c / d][r], c % d));
    matmul(&concat, projection)
}

pub(crate) fn patch_merge_on_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    projection: &Linear,
) -> Result<Var> {
    let (tokens, dim) = tape.value(x).shape();
    let side = reducible_side(tokens, dim)?;
    let parts = merge_gathers(side)
        .iter()
        .map(|ids| tape.gather_rows(x, ids))
        .collect::<Result<Vec<_>>>()?;
    let concat = tape.concat_cols(&parts)?;
    projection.forward(tape, binder, concat)
}

/// Per-level affine map into the shared alignment space.
pub fn project_level(raw: &Mat, weight: &Mat, bias: &Mat) -> Result<Mat> {
    if raw.cols() != weight.rows() {
        return Err(Error::Shape {
            op: "project_level",
            lhs: raw.shape(),
            rhs: weight.shape(),
        });
    }
    if bias.shape() != (1, weight.cols()) {
        return Err(Error::Shape {
            op: "project_level bias",
            lhs: weight.shape(),
            rhs: bias.shape(),
        });
    }
    let mut y = matmul(raw, weight)?;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn patch_merge_counts() {
        let proj = Mat::identity(4 * 3);
        let two = Mat::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(patch_merge(&two, &proj).unwrap().shape(), (1, 12));
        let eight = Mat::zeros(64, 3);
        assert_eq!(patch_merge(&eight, &proj).unwrap().shape(), (16, 12));
    }

    #[test]
    fn identity_projection_yields_concatenation() {
        // 4×4 grid of 2-d tokens; token (r, c) = (r, c)
        let tokens = Mat::from_fn(16, 2, |t, k| {
            if k == 0 {
                (t / 4) as f64
            } else {
                (t % 4) as f64
            }
        });
        let merged = patch_merge(&tokens, &Mat::identity(8)).unwrap();
        assert_eq!(merged.shape(), (4, 8));
        // output token 1 is the neighbourhood with top-left (0, 2)
        assert_eq!(merged.row(1), &[0.0, 2.0, 0.0, 3.0, 1.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn patch_merge_rejects_irreducible_grids() {
        let proj = Mat::identity(8);
        assert!(matches!(
            patch_merge(&Mat::zeros(9, 2), &proj),
            Err(Error::Shape { .. })
        ));
        assert!(patch_merge(&Mat::zeros(6, 2), &proj).is_err());
        assert!(patch_merge(&Mat::zeros(0, 2), &proj).is_err());
    }

    #[test]
    fn patch_merge_on_tape_matches_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::new();
        let lin = Linear::init(&mut params, &mut rng, "merge", 12, 5, false);
        let tokens = uniform(&mut rng, 16, 3, 1.0);
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&params);
        let x = tape.constant(tokens.clone());
        let y = patch_merge_on_tape(&mut tape, &mut binder, x, &lin).unwrap();
        let pure = patch_merge(&tokens, params.get(lin.weight)).unwrap();
        assert_eq!(tape.value(y), &pure);
    }

    #[test]
    fn project_level_identity_and_zero_input() {
        let x = Mat::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let y = project_level(&x, &Mat::identity(2), &Mat::zeros(1, 2)).unwrap();
        assert_eq!(y, x);
        let bias = Mat::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let z = project_level(&Mat::zeros(4, 2), &Mat::zeros(2, 3), &bias).unwrap();
        for r in z.iter_rows() {
            assert_eq!(r, bias.data());
        }
        assert!(project_level(&x, &Mat::zeros(3, 3), &bias).is_err());
    }
}
