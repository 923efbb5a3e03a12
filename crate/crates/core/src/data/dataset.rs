//! A dataset directory holds `manifest.txt` (key=value lines, one caption
//! per `text.<id>=<image>|<tokens>` line) and `images.hatf` (patch grids).

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use super::features::{read_features, FeatureFile, FeatureModality};
use super::write_atomic;
use crate::encoders::LevelledFeatures;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::tensor::Mat;

pub const MANIFEST: &str = "manifest.txt";
pub const IMAGES: &str = "images.hatf";
const FORMAT_TAG: &str = "hat-dataset-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Images as patch grids, captions as token ids. Captions of an image are
/// stored contiguously; training images come first.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Mat>,
    texts: Vec<Vec<usize>>,
    text_image: Vec<usize>,
    num_train: usize,
    vocab_size: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<Mat>,
        texts: Vec<Vec<usize>>,
        text_image: Vec<usize>,
        num_train: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if texts.len() != text_image.len() {
            return Err(Error::Input(format!(
                "{} captions but {} caption owners",
                texts.len(),
                text_image.len()
            )));
        }
        if num_train > images.len() {
            return Err(Error::Input(format!(
                "{num_train} training images of {}",
                images.len()
            )));
        }
        if text_image.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("captions must be grouped by image".into()));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|m| m.shape() != first.shape()) {
                return Err(Error::Input("images differ in grid shape".into()));
            }
        }
        if let Some(t) = texts.iter().flatten().find(|&&t| t >= vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary {vocab_size}"
            )));
        }
        // validates every owner id and that each image has a caption
        GroundTruth::new(images.len(), text_image.clone())?;
        Ok(Self {
            images,
            texts,
            text_image,
            num_train,
            vocab_size,
        })
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_texts(&self) -> usize {
        self.texts.len()
    }

    pub fn num_train(&self) -> usize {
        self.num_train
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn images(&self) -> &[Mat] {
        &self.images
    }

    pub fn texts(&self) -> &[Vec<usize>] {
        &self.texts
    }

    pub fn image_of(&self, text: usize) -> usize {
        self.text_image[text]
    }

    pub fn image_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.num_train,
            Split::Val => self.num_train..self.images.len(),
            Split::All => 0..self.images.len(),
        }
    }

    pub fn text_range(&self, split: Split) -> Range<usize> {
        let images = self.image_range(split);
        let start = self.text_image.partition_point(|&i| i < images.start);
        let end = self.text_image.partition_point(|&i| i < images.end);
        start..end
    }

    /// Ground truth of a split, with ids local to the split.
    pub fn ground_truth(&self, split: Split) -> Result<GroundTruth> {
        let images = self.image_range(split);
        let texts = self.text_range(split);
        GroundTruth::new(
            images.len(),
            self.text_image[texts]
                .iter()
                .map(|&i| i - images.start)
                .collect(),
        )
    }

    /// Positive (image, text) pairs of a split, in global ids.
    pub fn positives(&self, split: Split) -> Vec<(usize, usize)> {
        self.text_range(split)
            .map(|t| (self.text_image[t], t))
            .collect()
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let side = (self.images.first().map_or(0, Mat::rows) as f64).sqrt() as usize;
        let in_dim = self.images.first().map_or(0, Mat::cols);
        let _ = writeln!(out, "format={FORMAT_TAG}");
        let _ = writeln!(out, "images={}", self.images.len());
        let _ = writeln!(out, "train_images={}", self.num_train);
        let _ = writeln!(out, "texts={}", self.texts.len());
        let _ = writeln!(out, "vocab_size={}", self.vocab_size);
        let _ = writeln!(out, "grid_side={side}");
        let _ = writeln!(out, "in_dim={in_dim}");
        for (t, tokens) in self.texts.iter().enumerate() {
            let words: Vec<String> = tokens.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "text.{t}={}|{}", self.text_image[t], words.join(" "));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let grids = FeatureFile::new(
            FeatureModality::PatchGrid,
            self.images
                .iter()
                .map(|m| LevelledFeatures::new(vec![m.clone()]))
                .collect(),
        );
        write_atomic(&dir.join(IMAGES), &grids.to_bytes())?;
        write_atomic(&dir.join(MANIFEST), self.manifest().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut header = std::collections::BTreeMap::new();
        let mut captions: Vec<Option<(usize, Vec<usize>)>> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::ConfigLine {
                path: manifest_path.clone(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            if let Some(id) = key.strip_prefix("text.") {
                let id: usize = id
                    .parse()
                    .map_err(|_| err(format!("bad caption id {id:?}")))?;
                let (owner, tokens) = value
                    .split_once('|')
                    .ok_or_else(|| err("caption needs <image>|<tokens>".into()))?;
                let owner = owner
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad image id {owner:?}")))?;
                let tokens = tokens
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| err(format!("bad token {t:?}"))))
                    .collect::<Result<Vec<usize>>>()?;
                if captions.len() <= id {
                    captions.resize(id + 1, None);
                }
                if captions[id].replace((owner, tokens)).is_some() {
                    return Err(err(format!("caption {id} listed twice")));
                }
            } else {
                header.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        let get = |key: &str| -> Result<usize> {
            header
                .get(key)
                .ok_or_else(|| Error::Input(format!("{}: missing {key}", manifest_path.display())))?
                .parse()
                .map_err(|_| Error::Input(format!("{}: bad {key}", manifest_path.display())))
        };
        if header.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(Error::Input(format!(
                "{}: not a {FORMAT_TAG} manifest",
                manifest_path.display()
            )));
        }
        let num_texts = get("texts")?;
        if captions.len() != num_texts || captions.iter().any(Option::is_none) {
            return Err(Error::Input(format!(
                "{}: expected captions 0..{num_texts}",
                manifest_path.display()
            )));
        }
        let (text_image, texts): (Vec<usize>, Vec<Vec<usize>>) =
            captions.into_iter().flatten().unzip();

        let grids = read_features(&dir.join(IMAGES))?;
        if grids.modality != FeatureModality::PatchGrid {
            return Err(Error::Input(format!("{IMAGES} does not hold patch grids")));
        }
        let images = grids
            .items
            .into_iter()
            .map(|mut item| match item.levels.len() {
                1 => Ok(item.levels.pop().unwrap()),
                n => Err(Error::Input(format!("patch grid item with {n} levels"))),
            })
            .collect::<Result<Vec<Mat>>>()?;
        if images.len() != get("images")? {
            return Err(Error::Input(format!(
                "manifest lists {} images, {IMAGES} holds {}",
                get("images")?,
                images.len()
            )));
        }
        let side = get("grid_side")?;
        let in_dim = get("in_dim")?;
        if images.iter().any(|m| m.shape() != (side * side, in_dim)) {
            return Err(Error::Input(format!(
                "grids do not match grid_side={side}, in_dim={in_dim}"
            )));
        }
        Self::new(
            images,
            texts,
            text_image,
            get("train_images")?,
            get("vocab_size")?,
        )
    }
}
