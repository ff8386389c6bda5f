//! Renders a text description as an image: every word's embedding vector
//! becomes a short horizontal run of colored pixels, consecutive component
//! triples giving the (R, G, B) of consecutive pixels. Words are laid out
//! left to right in reading order and wrap onto the next row when the canvas
//! width is exhausted, so the relative position of words survives.

mod canvas;
mod vocab;

pub use canvas::Canvas;
pub use vocab::{Vocabulary, WordVector};

use thiserror::Error;

pub type EncodedTextImage = Canvas;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("description has no in-vocabulary tokens")]
    EmptyDescription,
    #[error("description overflows the canvas at token `{token}` (index {index})")]
    Overflow { token: String, index: usize },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Side of the square pixel block drawn for one logical pixel.
    pub superpixel: usize,
    /// Logical pixels left blank between consecutive words and between rows.
    pub word_gap: usize,
    pub value_min: f64,
    pub value_max: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            canvas_h: 256,
            canvas_w: 256,
            superpixel: 4,
            word_gap: 1,
            value_min: -1.0,
            value_max: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn logical_cols(&self) -> usize {
        self.canvas_w / self.superpixel
    }

    pub fn logical_rows(&self) -> usize {
        self.canvas_h / self.superpixel
    }

    /// Checks the configuration against a word dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<(), EncodeError> {
        if self.superpixel == 0 {
            return Err(EncodeError::Config("superpixel must be at least 1".into()));
        }
        if !(self.value_max > self.value_min) {
            return Err(EncodeError::Config(
                "value_max must exceed value_min".into(),
            ));
        }
        let block = block_len(dim) * self.superpixel;
        if dim == 0 || block > self.canvas_w || self.superpixel > self.canvas_h {
            return Err(EncodeError::Config(format!(
                "a {dim}-dimensional word block ({block} px) does not fit a {}x{} canvas",
                self.canvas_h, self.canvas_w
            )));
        }
        Ok(())
    }
}

/// Logical pixels needed for a `dim`-dimensional word.
pub fn block_len(dim: usize) -> usize {
    dim.div_ceil(3)
}

pub fn quantize_component(v: f64, cfg: &EncoderConfig) -> u8 {
    let clamped = v.clamp(cfg.value_min, cfg.value_max);
    let unit = (clamped - cfg.value_min) / (cfg.value_max - cfg.value_min);
    (unit * 255.0).round() as u8
}

/// One word's pixel run; a trailing partial triple leaves its missing channels at 0.
pub fn encode_word(vector: &[f32], cfg: &EncoderConfig) -> Vec<[u8; 3]> {
    vector
        .chunks(3)
        .map(|triple| {
            let mut px = [0u8; 3];
            for (c, &v) in px.iter_mut().zip(triple) {
                *c = quantize_component(v as f64, cfg);
            }
            px
        })
        .collect()
}

/// Lowercases, splits on whitespace and strips ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDescription {
    pub image: EncodedTextImage,
    pub placed: usize,
    /// Tokens skipped because the vocabulary has no vector for them.
    pub out_of_vocabulary: Vec<String>,
}

pub fn encode_description<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<EncodedDescription, EncodeError> {
    cfg.validate(vocab.dim())?;
    let mut out_of_vocabulary = Vec::new();
    let mut words = Vec::with_capacity(tokens.len());
    for (index, token) in tokens.iter().enumerate() {
        let token = token.as_ref();
        match vocab.get(token) {
            Some(v) => words.push((index, token, v)),
            None => out_of_vocabulary.push(token.to_string()),
        }
    }
    if words.is_empty() {
        return Err(EncodeError::EmptyDescription);
    }
    if !out_of_vocabulary.is_empty() {
        log::warn!(
            "skipped {} out-of-vocabulary tokens",
            out_of_vocabulary.len()
        );
    }

    let s = cfg.superpixel;
    let cols = cfg.logical_cols();
    let rows = cfg.logical_rows();
    let len = block_len(vocab.dim());
    let mut image = Canvas::new(cfg.canvas_h, cfg.canvas_w);
    let (mut row, mut col) = (0usize, 0usize);
    for &(index, token, vector) in &words {
        if col + len > cols {
            row += 1 + cfg.word_gap;
            col = 0;
        }
        if row >= rows {
            return Err(EncodeError::Overflow {
                token: token.to_string(),
                index,
            });
        }
        for (k, px) in encode_word(vector, cfg).into_iter().enumerate() {
            let x0 = (col + k) * s;
            for y in row * s..(row + 1) * s {
                for x in x0..x0 + s {
                    image.set_pixel(y, x, px);
                }
            }
        }
        col += len + cfg.word_gap;
    }
    Ok(EncodedDescription {
        image,
        placed: words.len(),
        out_of_vocabulary,
    })
}

pub const CROP_SIZE: usize = 227;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    /// Centered 227×227 crop, enlarged back to the input size (nearest neighbor).
    Crop227Enlarge,
    HFlip,
    /// Halves each side by 2×2 block averaging.
    Downsample128,
}

pub fn augment_encoded(img: &Canvas, mode: Augmentation) -> Result<Canvas, EncodeError> {
    match mode {
        Augmentation::Crop227Enlarge => crop_enlarge(img),
        Augmentation::HFlip => Ok(hflip(img)),
        Augmentation::Downsample128 => downsample2(img),
    }
}

fn hflip(img: &Canvas) -> Canvas {
    let (h, w) = (img.height(), img.width());
    let mut out = Canvas::new(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, w - 1 - x, img.pixel(y, x));
        }
    }
    out
}

fn crop_enlarge(img: &Canvas) -> Result<Canvas, EncodeError> {
    let (h, w) = (img.height(), img.width());
    if h < CROP_SIZE || w < CROP_SIZE {
        return Err(EncodeError::Size(format!(
            "cannot crop {CROP_SIZE}x{CROP_SIZE} from a {h}x{w} canvas"
        )));
    }
    let (oy, ox) = ((h - CROP_SIZE) / 2, (w - CROP_SIZE) / 2);
    let mut out = Canvas::new(h, w);
    for y in 0..h {
        let sy = oy + y * CROP_SIZE / h;
        for x in 0..w {
            let sx = ox + x * CROP_SIZE / w;
            out.set_pixel(y, x, img.pixel(sy, sx));
        }
    }
    Ok(out)
}

fn downsample2(img: &Canvas) -> Result<Canvas, EncodeError> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(EncodeError::Size(format!("cannot halve a {h}x{w} canvas")));
    }
    let mut out = Canvas::new(h / 2, w / 2);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let sum: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| img.pixel(2 * y + dy, 2 * x + dx)[c] as u32)
                    .sum();
                *v = ((sum + 2) / 4) as u8;
            }
            out.set_pixel(y, x, px);
        }
    }
    Ok(out)
}
