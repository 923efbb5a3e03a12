//! Two-stream encoders producing token features at several depths, plus the
//! per-(modality, level) projections into a shared alignment space.

mod image;
pub mod layers;
pub mod params;
mod text;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{patch_merge, project_level};
pub use params::{Binder, ModelParams, ParamId};

use crate::data::config::{format_list, parse_list, parse_value};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape, Var};
use image::ImageEncoder;
use layers::Linear;
use text::TextEncoder;

/// Prefix shared by every alignment projection parameter.
pub const PROJECTION_PREFIX: &str = "proj.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextEncoderKind {
    Transformer,
    Recurrent,
}

impl FromStr for TextEncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "recurrent" | "gru" => Ok(Self::Recurrent),
            other => Err(Error::Config(format!(
                "unknown text encoder kind {other:?}"
            ))),
        }
    }
}

impl fmt::Display for TextEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Transformer => "transformer",
            Self::Recurrent => "recurrent",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    /// 1-based layer indices whose outputs are tapped.
    pub tap_layers: Vec<usize>,
    pub kind: TextEncoderKind,
    pub mlp_ratio: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 64,
            num_layers: 12,
            num_heads: 4,
            max_len: 32,
            tap_layers: vec![4, 10, 12],
            kind: TextEncoderKind::Transformer,
            mlp_ratio: 2,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("text encoder: {msg}")));
        if self.vocab_size == 0 || self.model_dim == 0 || self.max_len == 0 {
            return bad("vocab_size, model_dim and max_len must be positive".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.tap_layers.is_empty() {
            return bad("no tap layers".into());
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "tap layers {:?} not strictly increasing",
                self.tap_layers
            ));
        }
        if self.tap_layers[0] == 0 || *self.tap_layers.last().unwrap() > self.num_layers {
            return bad(format!(
                "tap layers {:?} must lie in 1..={}",
                self.tap_layers, self.num_layers
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderConfig {
    /// Side of the initial square patch-token grid.
    pub grid_side: usize,
    /// Dimension of one input patch token.
    pub in_dim: usize,
    pub stage_dims: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// 1-based stage numbers whose outputs are tapped.
    pub tap_stages: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            grid_side: 16,
            in_dim: 16,
            stage_dims: vec![32, 64, 128, 256],
            blocks_per_stage: vec![1, 1, 1, 1],
            stage_heads: vec![1, 2, 4, 8],
            tap_stages: vec![2, 3, 4],
            mlp_ratio: 2,
        }
    }
}

impl ImageEncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Token count of the given 1-based stage.
    pub fn stage_tokens(&self, stage: usize) -> usize {
        let side = self.grid_side >> (stage - 1);
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("image encoder: {msg}")));
        let n = self.num_stages();
        if n == 0 || self.in_dim == 0 {
            return bad("need at least one stage and a positive in_dim".into());
        }
        if self.blocks_per_stage.len() != n || self.stage_heads.len() != n {
            return bad(format!(
                "stage_dims, stage_blocks and stage_heads must have equal length ({n}, {}, {})",
                self.blocks_per_stage.len(),
                self.stage_heads.len()
            ));
        }
        let reduction = 1usize << (n - 1);
        if self.grid_side == 0 || self.grid_side % reduction != 0 {
            return bad(format!(
                "grid_side {} not divisible by 2^{} for {n} stages",
                self.grid_side,
                n - 1
            ));
        }
        for s in 0..n {
            let (d, h) = (self.stage_dims[s], self.stage_heads[s]);
            if d == 0 || h == 0 || d % h != 0 {
                return bad(format!(
                    "stage {} dim {d} not divisible by {h} heads",
                    s + 1
                ));
            }
        }
        if self.tap_stages.is_empty() {
            return bad("no tap stages".into());
        }
        if self.tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "tap stages {:?} not strictly increasing",
                self.tap_stages
            ));
        }
        if self.tap_stages[0] < 2 || *self.tap_stages.last().unwrap() > n {
            return bad(format!(
                "tap stages {:?} must lie in 2..={n} (stage 1 is never tapped)",
                self.tap_stages
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub align_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
            align_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn num_levels(&self) -> usize {
        self.text.tap_layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        if self.align_dim == 0 {
            return Err(Error::Config("align_dim must be positive".into()));
        }
        if self.text.tap_layers.len() != self.image.tap_stages.len() {
            return Err(Error::Config(format!(
                "text taps {:?} and image taps {:?} define different level counts",
                self.text.tap_layers, self.image.tap_stages
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` setting; `Ok(false)` if the key is not a
    /// model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "vocab_size" => self.text.vocab_size = parse_value(key, value)?,
            "text_dim" => self.text.model_dim = parse_value(key, value)?,
            "text_layers" => self.text.num_layers = parse_value(key, value)?,
            "text_heads" => self.text.num_heads = parse_value(key, value)?,
            "max_len" => self.text.max_len = parse_value(key, value)?,
            "text_taps" => self.text.tap_layers = parse_list(key, value)?,
            "text_kind" => self.text.kind = value.parse()?,
            "text_mlp_ratio" => self.text.mlp_ratio = parse_value(key, value)?,
            "grid_side" => self.image.grid_side = parse_value(key, value)?,
            "in_dim" => self.image.in_dim = parse_value(key, value)?,
            "stage_dims" => self.image.stage_dims = parse_list(key, value)?,
            "stage_blocks" => self.image.blocks_per_stage = parse_list(key, value)?,
            "stage_heads" => self.image.stage_heads = parse_list(key, value)?,
            "image_taps" => self.image.tap_stages = parse_list(key, value)?,
            "image_mlp_ratio" => self.image.mlp_ratio = parse_value(key, value)?,
            "align_dim" => self.align_dim = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.text;
        let i = &self.image;
        [
            ("vocab_size", t.vocab_size.to_string()),
            ("text_dim", t.model_dim.to_string()),
            ("text_layers", t.num_layers.to_string()),
            ("text_heads", t.num_heads.to_string()),
            ("max_len", t.max_len.to_string()),
            ("text_taps", format_list(&t.tap_layers)),
            ("text_kind", t.kind.to_string()),
            ("text_mlp_ratio", t.mlp_ratio.to_string()),
            ("grid_side", i.grid_side.to_string()),
            ("in_dim", i.in_dim.to_string()),
            ("stage_dims", format_list(&i.stage_dims)),
            ("stage_blocks", format_list(&i.blocks_per_stage)),
            ("stage_heads", format_list(&i.stage_heads)),
            ("image_taps", format_list(&i.tap_stages)),
            ("image_mlp_ratio", i.mlp_ratio.to_string()),
            ("align_dim", self.align_dim.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in entries {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-item token features, one matrix per level (tokens × align_dim).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelledFeatures {
    pub levels: Vec<Mat>,
}

impl LevelledFeatures {
    pub fn new(levels: Vec<Mat>) -> Self {
        Self { levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Both encoders, the level projections, and their parameters.
#[derive(Clone, Debug)]
pub struct HatModel {
    config: ModelConfig,
    params: ModelParams,
    text: TextEncoder,
    image: ImageEncoder,
    text_proj: Vec<Linear>,
    image_proj: Vec<Linear>,
}

impl HatModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let text = TextEncoder::init(&mut params, &mut rng, &config.text);
        let image = ImageEncoder::init(&mut params, &mut rng, &config.image);
        let text_proj = (0..config.num_levels())
            .map(|l| {
                Linear::init(
                    &mut params,
                    &mut rng,
                    &format!("{PROJECTION_PREFIX}text.l{}", l + 1),
                    config.text.model_dim,
                    config.align_dim,
                    true,
                )
            })
            .collect();
        let image_proj = config
            .image
            .tap_stages
            .iter()
            .enumerate()
            .map(|(l, &stage)| {
                Linear::init(
                    &mut params,
                    &mut rng,
                    &format!("{PROJECTION_PREFIX}image.l{}", l + 1),
                    config.image.stage_dims[stage - 1],
                    config.align_dim,
                    true,
                )
            })
            .collect();
        Ok(Self {
            config,
            params,
            text,
            image,
            text_proj,
            image_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn is_projection(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with(PROJECTION_PREFIX)
    }

    /// Which parameters receive gradients. With `encoders_frozen`, only the
    /// level projections do.
    pub fn trainable_mask(&self, encoders_frozen: bool) -> Vec<bool> {
        self.params
            .ids()
            .map(|id| !encoders_frozen || self.is_projection(id))
            .collect()
    }

    /// Projection (weight, bias) of one level of one modality.
    pub fn projection(&self, modality: Modality, level: usize) -> (&Mat, &Mat) {
        let lin = match modality {
            Modality::Image => &self.image_proj[level],
            Modality::Text => &self.text_proj[level],
        };
        (
            self.params.get(lin.weight),
            self.params.get(lin.bias.expect("projections carry a bias")),
        )
    }

    pub fn encode_text_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        let raw = self.text.forward(tape, binder, &self.config.text, tokens)?;
        project_all(tape, binder, &self.text_proj, raw)
    }

    pub fn encode_image_on_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        grid: &Mat,
    ) -> Result<Vec<Var>> {
        let raw = self.image.forward(tape, binder, &self.config.image, grid)?;
        project_all(tape, binder, &self.image_proj, raw)
    }

    /// Unprojected tap outputs of the text encoder.
    pub fn raw_text_levels(&self, tokens: &[usize]) -> Result<Vec<Mat>> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let raw = self
            .text
            .forward(&mut tape, &mut binder, &self.config.text, tokens)?;
        Ok(raw.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Unprojected tap outputs of the image encoder.
    pub fn raw_image_levels(&self, grid: &Mat) -> Result<Vec<Mat>> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let raw = self
            .image
            .forward(&mut tape, &mut binder, &self.config.image, grid)?;
        Ok(raw.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<LevelledFeatures> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let levels = self.encode_text_on_tape(&mut tape, &mut binder, tokens)?;
        Ok(LevelledFeatures::new(
            levels.into_iter().map(|v| tape.value(v).clone()).collect(),
        ))
    }

    pub fn encode_image(&self, grid: &Mat) -> Result<LevelledFeatures> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let levels = self.encode_image_on_tape(&mut tape, &mut binder, grid)?;
        Ok(LevelledFeatures::new(
            levels.into_iter().map(|v| tape.value(v).clone()).collect(),
        ))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.params.to_checkpoint_bytes(&self.config.entries())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save_checkpoint(path, &self.config.entries())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = ModelParams::load_checkpoint(path)?;
        let config = ModelConfig::from_entries(&meta)?;
        let mut model = HatModel::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params.load_from(&params)?;
        Ok(model)
    }
}

fn project_all(
    tape: &mut Tape,
    binder: &mut Binder,
    projections: &[Linear],
    raw: Vec<Var>,
) -> Result<Vec<Var>> {
    raw.into_iter()
        .zip(projections)
        .map(|(x, p)| p.forward(tape, binder, x))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}
