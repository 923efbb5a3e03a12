//! Text encoders: a BERT-style transformer with tap layers, and a gated
//! recurrent baseline.

use rand_chacha::ChaCha8Rng;

use super::layers::{uniform, Block, LayerNorm, Linear};
use super::params::{Binder, ModelParams, ParamId};
use super::{TextEncoderConfig, TextEncoderKind};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape, Var};

#[derive(Clone, Debug)]
pub(crate) struct TransformerText {
    token_embed: ParamId,
    pos_embed: ParamId,
    segment: ParamId,
    embed_ln: LayerNorm,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub(crate) struct RecurrentText {
    token_embed: ParamId,
    update_x: Linear,
    update_h: Linear,
    reset_x: Linear,
    reset_h: Linear,
    cand_x: Linear,
    cand_h: Linear,
}

#[derive(Clone, Debug)]
pub(crate) enum TextEncoder {
    Transformer(TransformerText),
    Recurrent(RecurrentText),
}

impl TextEncoder {
    pub(crate) fn init(
        params: &mut ModelParams,
        rng: &mut ChaCha8Rng,
        cfg: &TextEncoderConfig,
    ) -> Self {
        let d = cfg.model_dim;
        match cfg.kind {
            TextEncoderKind::Transformer => {
                let token_embed =
                    params.insert("text.token_embed", uniform(rng, cfg.vocab_size, d, 0.1));
                let pos_embed = params.insert("text.pos_embed", uniform(rng, cfg.max_len, d, 0.02));
                let segment = params.insert("text.segment", uniform(rng, 1, d, 0.02));
                let embed_ln = LayerNorm::init(params, "text.embed_ln", d);
                let blocks = (0..cfg.num_layers)
                    .map(|l| {
                        Block::init(
                            params,
                            rng,
                            &format!("text.layer{}", l + 1),
                            d,
                            cfg.num_heads,
                            cfg.mlp_ratio,
                        )
                    })
                    .collect();
                TextEncoder::Transformer(TransformerText {
                    token_embed,
                    pos_embed,
                    segment,
                    embed_ln,
                    blocks,
                })
            }
            TextEncoderKind::Recurrent => {
                let token_embed =
                    params.insert("text.token_embed", uniform(rng, cfg.vocab_size, d, 1.0));
                let mut lin = |name: &str, bias: bool| {
                    Linear::init(params, rng, &format!("text.gru.{name}"), d, d, bias)
                };
                TextEncoder::Recurrent(RecurrentText {
                    token_embed,
                    update_x: lin("update_x", true),
                    update_h: lin("update_h", false),
                    reset_x: lin("reset_x", true),
                    reset_h: lin("reset_h", false),
                    cand_x: lin("cand_x", true),
                    cand_h: lin("cand_h", true),
                })
            }
        }
    }

    /// Raw (unprojected) features, one per tap level.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        cfg: &TextEncoderConfig,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        validate_tokens(cfg, tokens)?;
        match self {
            TextEncoder::Transformer(enc) => enc.forward(tape, binder, cfg, tokens),
            TextEncoder::Recurrent(enc) => {
                let states = enc.forward(tape, binder, tokens)?;
                Ok(vec![states; cfg.tap_layers.len()])
            }
        }
    }
}

fn validate_tokens(cfg: &TextEncoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

impl TransformerText {
    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        cfg: &TextEncoderConfig,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        let table = binder.var(tape, self.token_embed);
        let words = tape.gather_rows(table, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos_table = binder.var(tape, self.pos_embed);
        let pos = tape.gather_rows(pos_table, &positions)?;
        let segment = binder.var(tape, self.segment);

        let x = tape.add(words, pos)?;
        let x = tape.add_row(x, segment)?;
        let mut x = self.embed_ln.forward(tape, binder, x)?;

        let mut taps = Vec::with_capacity(cfg.tap_layers.len());
        let mut next_tap = cfg.tap_layers.iter().peekable();
        for (layer, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, binder, x)?;
            if next_tap.peek() == Some(&&(layer + 1)) {
                taps.push(x);
                next_tap.next();
            }
            if next_tap.peek().is_none() {
                break;
            }
        }
        Ok(taps)
    }
}

impl RecurrentText {
    /// Hidden state after every step, stacked as T×d.
    fn forward(&self, tape: &mut Tape, binder: &mut Binder, tokens: &[usize]) -> Result<Var> {
        let table = binder.var(tape, self.token_embed);
        let d = tape.value(table).cols();
        let mut h = tape.constant(Mat::zeros(1, d));
        let mut states = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let x = tape.gather_rows(table, &[tok])?;

            let zx = self.update_x.forward(tape, binder, x)?;
            let zh = self.update_h.forward(tape, binder, h)?;
            let z = tape.add(zx, zh)?;
            let z = tape.sigmoid(z)?;

            let rx = self.reset_x.forward(tape, binder, x)?;
            let rh = self.reset_h.forward(tape, binder, h)?;
            let r = tape.add(rx, rh)?;
            let r = tape.sigmoid(r)?;

            let nx = self.cand_x.forward(tape, binder, x)?;
            let nh = self.cand_h.forward(tape, binder, h)?;
            let gated = tape.mul(r, nh)?;
            let n = tape.add(nx, gated)?;
            let n = tape.tanh(n)?;

            // h' = n + z ⊙ (h − n)
            let delta = tape.sub(h, n)?;
            let keep = tape.mul(z, delta)?;
            h = tape.add(n, keep)?;
            states.push(h);
        }
        tape.concat_rows(&states)
    }
}
