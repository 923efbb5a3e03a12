//! Hierarchical image encoder: patch embedding, then stages of global
//! self-attention blocks separated by 2×2 patch merging. Every stage halves
//! the grid side.

use rand_chacha::ChaCha8Rng;

use super::layers::{patch_merge_on_tape, uniform, Block, Linear};
use super::params::{Binder, ModelParams, ParamId};
use super::ImageEncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape, Var};

#[derive(Clone, Debug)]
struct Stage {
    merge: Option<Linear>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub(crate) struct ImageEncoder {
    patch_embed: Linear,
    pos_embed: ParamId,
    stages: Vec<Stage>,
}

impl ImageEncoder {
    pub(crate) fn init(
        params: &mut ModelParams,
        rng: &mut ChaCha8Rng,
        cfg: &ImageEncoderConfig,
    ) -> Self {
        let d0 = cfg.stage_dims[0];
        let patch_embed = Linear::init(params, rng, "image.patch_embed", cfg.in_dim, d0, true);
        let tokens = cfg.grid_side * cfg.grid_side;
        let pos_embed = params.insert("image.pos_embed", uniform(rng, tokens, d0, 0.2));
        let stages = (0..cfg.stage_dims.len())
            .map(|s| {
                let dim = cfg.stage_dims[s];
                let merge = (s > 0).then(|| {
                    Linear::init(
                        params,
                        rng,
                        &format!("image.stage{}.merge", s + 1),
                        4 * cfg.stage_dims[s - 1],
                        dim,
                        false,
                    )
                });
                let blocks = (0..cfg.blocks_per_stage[s])
                    .map(|b| {
                        Block::init(
                            params,
                            rng,
                            &format!("image.stage{}.block{}", s + 1, b + 1),
                            dim,
                            cfg.stage_heads[s],
                            cfg.mlp_ratio,
                        )
                    })
                    .collect();
                Stage { merge, blocks }
            })
            .collect();
        Self {
            patch_embed,
            pos_embed,
            stages,
        }
    }

    /// Raw stage outputs for every tapped stage, in tap order.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        cfg: &ImageEncoderConfig,
        grid: &Mat,
    ) -> Result<Vec<Var>> {
        let expected = (cfg.grid_side * cfg.grid_side, cfg.in_dim);
        if grid.shape() != expected {
            return Err(Error::Input(format!(
                "patch grid is {:?}, expected {:?} ({}x{} patches of dim {})",
                grid.shape(),
                expected,
                cfg.grid_side,
                cfg.grid_side,
                cfg.in_dim
            )));
        }
        let input = tape.constant(grid.clone());
        let x = self.patch_embed.forward(tape, binder, input)?;
        let pos = binder.var(tape, self.pos_embed);
        let mut x = tape.add(x, pos)?;

        let last_tap = *cfg.tap_stages.last().unwrap_or(&0);
        let mut taps = Vec::with_capacity(cfg.tap_stages.len());
        for (s, stage) in self.stages.iter().enumerate().take(last_tap) {
            if let Some(merge) = &stage.merge {
                x = patch_merge_on_tape(tape, binder, x, merge)?;
            }
            for block in &stage.blocks {
                x = block.forward(tape, binder, x)?;
            }
            if cfg.tap_stages.contains(&(s + 1)) {
                taps.push(x);
            }
        }
        Ok(taps)
    }
}
