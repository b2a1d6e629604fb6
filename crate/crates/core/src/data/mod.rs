//! Synthetic labeled caption-image data.
//!
//! Images are 16×16 RGB grids in `[-1, 1]` showing coloured shapes on a
//! black background. Two regimes are provided:
//!
//! * **single**: one object per image; the label is the (shape, colour)
//!   class id.
//! * **multi**: one to three objects per image; the labels are the colour
//!   and shape attribute ids present, and the caption mentions only a
//!   random non-empty subset of the objects.

mod format;
mod render;

pub use format::{read_dataset, write_dataset, DatasetReader, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::TextInput;
use render::Canvas;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
pub const CAPTION_LEN: usize = 8;
/// Standard deviation of the per-pixel Gaussian noise.
pub const PIXEL_NOISE: f64 = 0.05;
/// Maximum absolute jitter, in pixels, of single-object placement.
pub const JITTER: i32 = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("dataset checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("dataset manifest describes no examples")]
    EmptyManifest,
    #[error("{0} bytes of trailing data after the checksum")]
    TrailingData(u64),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid generator parameters: {0}")]
    Parameters(String),
}

/// Sorted, deduplicated label ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelSet(Vec<u32>);

impl LabelSet {
    /// Sorts and deduplicates; an empty input is an error.
    pub fn new(labels: impl IntoIterator<Item = u32>) -> Result<Self, DataError> {
        let mut v: Vec<u32> = labels.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(DataError::Invalid("empty label set".into()));
        }
        Ok(Self(v))
    }

    pub fn single(label: u32) -> Self {
        Self(vec![label])
    }

    /// The empty set. Datasets never contain it; validation code does.
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn contains(&self, label: u32) -> bool {
        self.0.binary_search(&label).is_ok()
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Single,
    Multi,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Single => "single",
            Regime::Multi => "multi",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Regime::Single),
            "multi" => Ok(Regime::Multi),
            other => Err(format!("unknown regime `{other}` (expected single|multi)")),
        }
    }
}

/// One (caption, image, labels) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Row-major `H × W × C` pixels in `[-1, 1]`.
    pub image: Vec<f64>,
    pub caption: TextInput,
    pub labels: LabelSet,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub regime: Regime,
    /// Display names of the label ids; `label_names.len()` is the label
    /// vocabulary size.
    pub label_names: Vec<String>,
    pub token_vocab: u32,
    pub caption_len: u32,
    pub image_side: u32,
    pub channels: u32,
    pub n_train: u64,
    pub n_test: u64,
    pub seed: u64,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<LabeledExample> {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect()
    }

    pub fn train(&self) -> Vec<LabeledExample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<LabeledExample> {
        self.split(Split::Test)
    }

    pub fn label_mode(&self) -> crate::sampling::LabelMode {
        match self.manifest.regime {
            Regime::Single => crate::sampling::LabelMode::Single,
            Regime::Multi => crate::sampling::LabelMode::Multi,
        }
    }

    /// Checks counts, id ranges, pixel range and caption/label consistency.
    pub fn validate(&self) -> Result<(), DataError> {
        let m = &self.manifest;
        let n_train = self.examples.iter().filter(|e| e.split == Split::Train).count() as u64;
        let n_test = self.examples.len() as u64 - n_train;
        if (n_train, n_test) != (m.n_train, m.n_test) {
            return Err(DataError::Invalid(format!(
                "manifest counts {}/{} but found {n_train}/{n_test}",
                m.n_train, m.n_test
            )));
        }
        let pixels = (m.image_side * m.image_side * m.channels) as usize;
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.labels.is_empty() {
                return Err(DataError::Invalid(format!("example {i} has no labels")));
            }
            if let Some(l) = ex.labels.iter().find(|&l| l as usize >= m.label_names.len()) {
                return Err(DataError::Invalid(format!(
                    "example {i} label {l} outside vocabulary of {}",
                    m.label_names.len()
                )));
            }
            if ex.caption.len() != m.caption_len as usize || ex.caption.vocab_size() != m.token_vocab {
                return Err(DataError::Invalid(format!("example {i} caption shape mismatch")));
            }
            if ex.image.len() != pixels {
                return Err(DataError::Invalid(format!(
                    "example {i} has {} pixels, expected {pixels}",
                    ex.image.len()
                )));
            }
            if ex.image.iter().any(|p| !(-1.0..=1.0).contains(p)) {
                return Err(DataError::Invalid(format!("example {i} pixel outside [-1, 1]")));
            }
            if !caption_consistent(m.regime, &ex.caption, &ex.labels) {
                return Err(DataError::Invalid(format!(
                    "example {i} caption mentions attributes outside its labels"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    fn ordinal(self) -> usize {
        SHAPES.iter().position(|s| *s == self).unwrap()
    }
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }

    fn ordinal(self) -> usize {
        COLORS.iter().position(|c| *c == self).unwrap()
    }
}

/// Number of distinct (shape, colour) classes.
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

/// The `k`-th single-label class. The ordering walks the colour offset so
/// that the first four classes differ in both shape and colour.
pub fn class_combo(k: usize) -> (Shape, Color) {
    assert!(k < MAX_CLASSES);
    let shape = SHAPES[k % 4];
    let color = COLORS[(k % 4 + k / 4) % 4];
    (shape, color)
}

/// Caption vocabulary. Token 0 is padding.
pub mod vocab {
    use super::{Color, Shape};

    pub const WORDS: [&str; 24] = [
        "<pad>", "a", "the", "and", "of", "picture", "there", "is", "with", "small", "big",
        "shape", "image", "an", "showing", "one", "red", "green", "blue", "yellow", "circle",
        "square", "triangle", "cross",
    ];
    pub const SIZE: u32 = WORDS.len() as u32;
    pub const PAD: u32 = 0;

    pub fn id(word: &str) -> u32 {
        WORDS
            .iter()
            .position(|w| *w == word)
            .unwrap_or_else(|| panic!("`{word}` not in vocabulary")) as u32
    }

    pub fn color(c: Color) -> u32 {
        16 + c.ordinal() as u32
    }

    pub fn shape(s: Shape) -> u32 {
        20 + s.ordinal() as u32
    }

    /// Colour/shape word for an attribute token, as a multi-label id
    /// (colours 0..4, shapes 4..8).
    pub fn attribute(token: u32) -> Option<u32> {
        (16..24).contains(&token).then(|| token - 16)
    }

    pub fn decode(tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| WORDS.get(t as usize).copied().unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Multi-label attribute id of a colour (0..4) or shape (4..8).
pub fn color_attribute(c: Color) -> u32 {
    c.ordinal() as u32
}

pub fn shape_attribute(s: Shape) -> u32 {
    4 + s.ordinal() as u32
}

fn multi_label_names() -> Vec<String> {
    COLORS
        .iter()
        .map(|c| c.name().to_string())
        .chain(SHAPES.iter().map(|s| s.name().to_string()))
        .collect()
}

/// Whether every colour/shape word in the caption is backed by the labels.
pub fn caption_consistent(regime: Regime, caption: &TextInput, labels: &LabelSet) -> bool {
    let attrs: Vec<u32> = caption.tokens().iter().filter_map(|&t| vocab::attribute(t)).collect();
    match regime {
        Regime::Multi => attrs.iter().all(|a| labels.contains(*a)),
        Regime::Single => {
            let Some(class) = labels.iter().next() else {
                return false;
            };
            if class as usize >= MAX_CLASSES {
                return false;
            }
            let (shape, color) = class_combo(class as usize);
            attrs
                .iter()
                .all(|&a| a == color_attribute(color) || a == shape_attribute(shape))
        }
    }
}

fn pad_caption(mut tokens: Vec<u32>) -> TextInput {
    tokens.truncate(CAPTION_LEN);
    tokens.resize(CAPTION_LEN, vocab::PAD);
    TextInput::new(tokens, vocab::SIZE).expect("generated tokens are in vocabulary")
}

fn object_phrase(rng: &mut ChaCha8Rng, shape: Shape, color: Color, allow_size: bool) -> Vec<u32> {
    let mut phrase = vec![vocab::id("a")];
    if allow_size {
        match rng.random_range(0..3) {
            0 => phrase.push(vocab::id("small")),
            1 => phrase.push(vocab::id("big")),
            _ => {}
        }
    }
    phrase.push(vocab::color(color));
    phrase.push(vocab::shape(shape));
    phrase
}

fn single_caption(rng: &mut ChaCha8Rng, shape: Shape, color: Color) -> TextInput {
    let object = object_phrase(rng, shape, color, true);
    let words = |ws: &[&str]| ws.iter().map(|w| vocab::id(w)).collect::<Vec<_>>();
    let mut tokens = match rng.random_range(0..5) {
        0 => Vec::new(),
        1 => words(&["a", "picture", "of"]),
        2 => words(&["there", "is"]),
        3 => words(&["an", "image", "showing"]),
        _ => words(&["the", "image", "of"]),
    };
    tokens.extend(object);
    pad_caption(tokens)
}

fn render_noise(rng: &mut ChaCha8Rng, canvas: &mut Canvas) {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    for p in canvas.pixels_mut() {
        *p = (*p + noise.sample(rng)).clamp(-1.0, 1.0);
    }
}

/// Single-object dataset with `k` classes and `n_per_class` instances each.
/// The first 80% of every class's instances form the train split.
pub fn generate_single_label(n_per_class: usize, k: usize, seed: u64) -> Result<Dataset, DataError> {
    if !(2..=MAX_CLASSES).contains(&k) {
        return Err(DataError::Parameters(format!(
            "class count {k} outside 2..={MAX_CLASSES}"
        )));
    }
    if n_per_class < 2 {
        return Err(DataError::Parameters("need at least 2 instances per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train_per_class = (n_per_class * 4).div_ceil(5).min(n_per_class - 1);
    let mut examples = Vec::with_capacity(n_per_class * k);
    for i in 0..n_per_class {
        for class in 0..k {
            let (shape, color) = class_combo(class);
            let mut canvas = Canvas::new();
            let center = IMAGE_SIDE as f64 / 2.0;
            let dx = rng.random_range(-JITTER..=JITTER) as f64;
            let dy = rng.random_range(-JITTER..=JITTER) as f64;
            canvas.draw(shape, color, center + dx, center + dy, 4.5);
            render_noise(&mut rng, &mut canvas);
            examples.push(LabeledExample {
                image: canvas.into_pixels(),
                caption: single_caption(&mut rng, shape, color),
                labels: LabelSet::single(class as u32),
                split: if i < n_train_per_class { Split::Train } else { Split::Test },
            });
        }
    }
    let n_train = (n_train_per_class * k) as u64;
    let manifest = DatasetManifest {
        regime: Regime::Single,
        label_names: (0..k)
            .map(|c| {
                let (s, col) = class_combo(c);
                format!("{} {}", col.name(), s.name())
            })
            .collect(),
        token_vocab: vocab::SIZE,
        caption_len: CAPTION_LEN as u32,
        image_side: IMAGE_SIDE as u32,
        channels: IMAGE_CHANNELS as u32,
        n_train,
        n_test: examples.len() as u64 - n_train,
        seed,
        version: FORMAT_VERSION,
    };
    Ok(Dataset { manifest, examples })
}

/// Multi-object generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelConfig {
    /// Probability of rendering 1, 2, … objects; index 0 is one object.
    pub object_count_probs: Vec<f64>,
    /// Most objects a caption will mention.
    pub max_mentioned: usize,
}

impl Default for MultiLabelConfig {
    fn default() -> Self {
        Self {
            object_count_probs: vec![1.0 / 3.0; 3],
            max_mentioned: 2,
        }
    }
}

impl MultiLabelConfig {
    /// Probability that a given colour (or shape) attribute appears in an
    /// image, given independent uniform object attributes.
    pub fn attribute_presence_probability(&self) -> f64 {
        self.object_count_probs
            .iter()
            .enumerate()
            .map(|(k, p)| p * (1.0 - 0.75f64.powi(k as i32 + 1)))
            .sum()
    }
}

const GRID_CENTERS: [(f64, f64); 4] = [(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)];

/// Multi-object dataset of `n` images; the first 80% are the train split.
pub fn generate_multi_label(n: usize, config: &MultiLabelConfig, seed: u64) -> Result<Dataset, DataError> {
    let probs = &config.object_count_probs;
    if probs.len() < 2 || probs.len() > GRID_CENTERS.len() {
        return Err(DataError::Parameters(
            "object count distribution must cover 2..=4 objects".into(),
        ));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Parameters("object count probabilities must sum to 1".into()));
    }
    if n < 5 {
        return Err(DataError::Parameters("need at least 5 examples".into()));
    }
    if config.max_mentioned == 0 {
        return Err(DataError::Parameters("captions must mention at least one object".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (n * 4) / 5;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut count = probs.len();
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                count = k + 1;
                break;
            }
        }
        let cells = rand::seq::index::sample(&mut rng, GRID_CENTERS.len(), count);
        let mut canvas = Canvas::new();
        let mut objects = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(2 * count);
        for cell in cells.iter() {
            let shape = SHAPES[rng.random_range(0..SHAPES.len())];
            let color = COLORS[rng.random_range(0..COLORS.len())];
            let (cx, cy) = GRID_CENTERS[cell];
            let dx = rng.random_range(-1..=1) as f64;
            let dy = rng.random_range(-1..=1) as f64;
            canvas.draw(shape, color, cx + dx, cy + dy, 3.0);
            objects.push((shape, color));
            labels.push(color_attribute(color));
            labels.push(shape_attribute(shape));
        }
        render_noise(&mut rng, &mut canvas);
        let mention = rng.random_range(1..=count.min(config.max_mentioned));
        let chosen = rand::seq::index::sample(&mut rng, count, mention);
        let mut tokens = Vec::new();
        for (j, o) in chosen.iter().enumerate() {
            if j > 0 {
                tokens.push(vocab::id("and"));
            }
            let (shape, color) = objects[o];
            tokens.extend(object_phrase(&mut rng, shape, color, mention == 1));
        }
        examples.push(LabeledExample {
            image: canvas.into_pixels(),
            caption: pad_caption(tokens),
            labels: LabelSet::new(labels).expect("at least one object"),
            split: if i < n_train { Split::Train } else { Split::Test },
        });
    }
    let manifest = DatasetManifest {
        regime: Regime::Multi,
        label_names: multi_label_names(),
        token_vocab: vocab::SIZE,
        caption_len: CAPTION_LEN as u32,
        image_side: IMAGE_SIDE as u32,
        channels: IMAGE_CHANNELS as u32,
        n_train: n_train as u64,
        n_test: (n - n_train) as u64,
        seed,
        version: FORMAT_VERSION,
    };
    Ok(Dataset { manifest, examples })
}

/// Single-object images over all 16 (shape, colour) classes, used to train
/// the frozen evaluation classifier. Labels are class ids `0..16`.
pub fn generate_reference_set(n_per_class: usize, seed: u64) -> Result<Dataset, DataError> {
    generate_single_label(n_per_class, MAX_CLASSES, seed)
}
