//! Toy networks: image encoder `g`, text encoder `f`, conditional
//! generator `G`, conditional discriminator `D`, and the frozen evaluation
//! classifier.
//!
//! Every network is a plain [`MlpNetwork`]. Batches are matrices with one
//! example per row. Passing a whole `2N` paired batch through one bound
//! network is how the two contrast branches share parameters: both halves
//! read the same tape handles.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{glorot_uniform, Activation, BoundMlp, Linear, MlpNetwork};
pub use optim::Adam;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{vocab, LabeledExample, IMAGE_PIXELS};
use crate::tensor::{Matrix, Tape, TensorError, Var};

/// Width of image and text embeddings.
pub const EMBED_DIM: usize = 64;
/// Width of token embeddings before pooling.
pub const TOKEN_DIM: usize = 32;
pub const NOISE_DIM: usize = 32;
pub const GENERATOR_HIDDEN: usize = 256;
pub const DISCRIMINATOR_HIDDEN: usize = 256;
pub const TEXT_HIDDEN: usize = 128;
pub const IMAGE_HIDDEN: [usize; 2] = [256, 128];
pub const CLASSIFIER_FEATURES: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input width {found} does not match the expected {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    Token { token: u32, vocab: u32 },
    #[error("caption in row {row} has no tokens")]
    EmptyCaption { row: usize },
    #[error("classifier used before it was frozen")]
    NotFrozen,
    #[error("classifier is frozen; training is no longer allowed")]
    Frozen,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}

/// Fixed-length caption token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextInput {
    tokens: Vec<u32>,
    vocab_size: u32,
}

impl TextInput {
    pub fn new(tokens: Vec<u32>, vocab_size: u32) -> Result<Self, ModelError> {
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(ModelError::Token {
                token,
                vocab: vocab_size,
            });
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `n` standard-normal noise rows of width [`NOISE_DIM`].
pub fn sample_noise(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, NOISE_DIM, |_, _| StandardNormal.sample(rng))
}

/// Stacks example images into a `B × IMAGE_PIXELS` matrix.
pub fn image_batch<'a>(examples: impl IntoIterator<Item = &'a LabeledExample>) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for ex in examples {
        data.extend_from_slice(&ex.image);
        rows += 1;
    }
    Matrix::new(rows, IMAGE_PIXELS, data).expect("images have IMAGE_PIXELS entries")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Image encoder `g`: pixels → 256 → 128 → [`EMBED_DIM`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub net: MlpNetwork,
}

impl ImageEncoder {
    pub fn new(seed: u64) -> Self {
        let dims = [IMAGE_PIXELS, IMAGE_HIDDEN[0], IMAGE_HIDDEN[1], EMBED_DIM];
        let acts = [Activation::Tanh, Activation::Tanh, Activation::Identity];
        Self {
            net: MlpNetwork::new(&dims, &acts, &mut rng(seed)),
        }
    }

    /// Raw (unnormalized) embeddings of a `B × pixels` batch.
    pub fn encode(&self, images: &Matrix) -> Result<Matrix, ModelError> {
        self.net.forward_value(images)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }
}

/// Text encoder `f`: token embedding, mean pooling over non-padding
/// tokens, then 32 → 128 → [`EMBED_DIM`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub table: Matrix,
    pub net: MlpNetwork,
}

impl TextEncoder {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let table = glorot_uniform(&mut r, vocab::SIZE as usize, TOKEN_DIM);
        let net = MlpNetwork::new(
            &[TOKEN_DIM, TEXT_HIDDEN, EMBED_DIM],
            &[Activation::Tanh, Activation::Identity],
            &mut r,
        );
        Self { table, net }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    /// Gather indices and the `B × T` pooling matrix for a caption batch.
    fn pooling(&self, captions: &[&TextInput]) -> Result<(Vec<usize>, Matrix), ModelError> {
        let mut flat = Vec::new();
        let mut spans = Vec::with_capacity(captions.len());
        for (row, cap) in captions.iter().enumerate() {
            let start = flat.len();
            for &t in cap.tokens() {
                if t as usize >= self.vocab_size() {
                    return Err(ModelError::Token {
                        token: t,
                        vocab: self.vocab_size() as u32,
                    });
                }
                if t != vocab::PAD {
                    flat.push(t as usize);
                }
            }
            if flat.len() == start {
                return Err(ModelError::EmptyCaption { row });
            }
            spans.push((start, flat.len()));
        }
        let mut pool = Matrix::zeros(captions.len(), flat.len());
        for (row, &(s, e)) in spans.iter().enumerate() {
            let w = 1.0 / (e - s) as f64;
            for c in s..e {
                pool.set(row, c, w);
            }
        }
        Ok((flat, pool))
    }

    /// Mean-pooled token embeddings, `B × TOKEN_DIM`.
    pub fn pooled(&self, captions: &[&TextInput]) -> Result<Matrix, ModelError> {
        let (flat, pool) = self.pooling(captions)?;
        Ok(pool.matmul(&self.table.select_rows(&flat))?)
    }

    pub fn encode(&self, captions: &[&TextInput]) -> Result<Matrix, ModelError> {
        self.net.forward_value(&self.pooled(captions)?)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTextEncoder<'_> {
        let table = if trainable {
            tape.leaf(self.table.clone())
        } else {
            tape.constant(self.table.clone())
        };
        BoundTextEncoder {
            encoder: self,
            table,
            net: self.net.bind(tape, trainable),
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        std::iter::once(&self.table).chain(self.net.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        std::iter::once(&mut self.table).chain(self.net.params_mut()).collect()
    }
}

pub struct BoundTextEncoder<'a> {
    encoder: &'a TextEncoder,
    table: Var,
    net: BoundMlp,
}

impl BoundTextEncoder<'_> {
    pub fn forward(&self, tape: &mut Tape, captions: &[&TextInput]) -> Result<Var, ModelError> {
        let (flat, pool) = self.encoder.pooling(captions)?;
        let tokens = tape.select_rows(self.table, &flat)?;
        let pool = tape.constant(pool);
        let pooled = tape.matmul(pool, tokens)?;
        self.net.forward(tape, pooled)
    }

    /// Handles in [`TextEncoder::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        std::iter::once(self.table).chain(self.net.param_vars()).collect()
    }
}

/// Conditional generator `G`: `(z ⊕ e)` → 256 → pixels, tanh output.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: MlpNetwork,
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        Self {
            net: MlpNetwork::new(
                &[NOISE_DIM + EMBED_DIM, GENERATOR_HIDDEN, IMAGE_PIXELS],
                &[Activation::Tanh, Activation::Tanh],
                &mut rng(seed),
            ),
        }
    }

    pub fn generate(&self, noise: &Matrix, text: &Matrix) -> Result<Matrix, ModelError> {
        check_width(noise, NOISE_DIM)?;
        check_width(text, EMBED_DIM)?;
        self.net.forward_value(&Matrix::concat_cols(noise, text)?)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundConditional {
        BoundConditional {
            net: self.net.bind(tape, trainable),
            left_width: NOISE_DIM,
        }
    }
}

/// Conditional discriminator `D`: `(x ⊕ e)` → 256 → scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: MlpNetwork,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        Self {
            net: MlpNetwork::new(
                &[IMAGE_PIXELS + EMBED_DIM, DISCRIMINATOR_HIDDEN, 1],
                &[Activation::Tanh, Activation::Identity],
                &mut rng(seed),
            ),
        }
    }

    /// One score per row, as a `B × 1` column.
    pub fn score(&self, images: &Matrix, text: &Matrix) -> Result<Matrix, ModelError> {
        check_width(images, IMAGE_PIXELS)?;
        check_width(text, EMBED_DIM)?;
        self.net.forward_value(&Matrix::concat_cols(images, text)?)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundConditional {
        BoundConditional {
            net: self.net.bind(tape, trainable),
            left_width: IMAGE_PIXELS,
        }
    }
}

fn check_width(m: &Matrix, expected: usize) -> Result<(), ModelError> {
    if m.cols() != expected {
        return Err(ModelError::InputWidth {
            expected,
            found: m.cols(),
        });
    }
    Ok(())
}

/// A network over the column concatenation of two inputs.
#[derive(Debug, Clone)]
pub struct BoundConditional {
    net: BoundMlp,
    left_width: usize,
}

impl BoundConditional {
    pub fn forward(&self, tape: &mut Tape, left: Var, right: Var) -> Result<Var, ModelError> {
        let width = tape.value(left).cols();
        if width != self.left_width {
            return Err(ModelError::InputWidth {
                expected: self.left_width,
                found: width,
            });
        }
        let joined = tape.concat_cols(left, right)?;
        self.net.forward(tape, joined)
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.net.param_vars()
    }
}

/// Evaluation classifier: pixels → [`CLASSIFIER_FEATURES`] (tanh) → K
/// logits. Must be frozen before it can score images.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: MlpNetwork,
    frozen: bool,
}

/// Class probabilities and penultimate features of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub probabilities: Matrix,
    pub features: Matrix,
}

impl Classifier {
    pub fn new(classes: usize, seed: u64) -> Self {
        Self {
            net: MlpNetwork::new(
                &[IMAGE_PIXELS, CLASSIFIER_FEATURES, classes],
                &[Activation::Tanh, Activation::Identity],
                &mut rng(seed),
            ),
            frozen: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn net(&self) -> &MlpNetwork {
        &self.net
    }

    /// Minibatch cross-entropy training on `(image, class)` pairs.
    /// Returns the final training accuracy.
    pub fn fit(
        &mut self,
        images: &Matrix,
        classes: &[usize],
        epochs: usize,
        batch: usize,
        seed: u64,
    ) -> Result<f64, ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        let mut opt = Adam::new(3e-3, 0.9, 0.999);
        let mut order: Vec<usize> = (0..images.rows()).collect();
        let mut r = rng(seed);
        for _ in 0..epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
            for chunk in order.chunks(batch) {
                let mut tape = Tape::new();
                let bound = self.net.bind(&mut tape, true);
                let x = tape.constant(images.select_rows(chunk));
                let logits = bound.forward(&mut tape, x)?;
                let targets: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
                let loss = crate::losses::cross_entropy(&mut tape, logits, &targets)?;
                tape.backward(loss)?;
                let grads: Vec<Matrix> = bound.param_vars().iter().map(|v| tape.grad_or_zeros(*v)).collect();
                opt.step(self.net.params_mut(), &grads);
            }
        }
        let logits = self.net.forward_value(images)?;
        let correct = (0..images.rows())
            .filter(|&i| argmax(logits.row(i)) == classes[i])
            .count();
        Ok(correct as f64 / images.rows() as f64)
    }

    pub fn predict(&self, images: &Matrix) -> Result<ClassifierOutput, ModelError> {
        if !self.frozen {
            return Err(ModelError::NotFrozen);
        }
        let mut layers = self.net.forward_layers(images)?;
        let logits = layers.pop().expect("two layers");
        let features = layers.pop().expect("two layers");
        Ok(ClassifierOutput {
            probabilities: softmax_rows(&logits),
            features,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend(self.net.named_params("classifier"));
        c
    }

    /// Restores parameters and marks the classifier frozen.
    pub fn load_frozen(&mut self, c: &Checkpoint) -> Result<(), ModelError> {
        load_named(&mut self.net, "classifier", c)?;
        self.frozen = true;
        Ok(())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn load_named(net: &mut MlpNetwork, prefix: &str, c: &Checkpoint) -> Result<(), CheckpointError> {
    let names: Vec<String> = net.named_params(prefix).into_iter().map(|(n, _)| n).collect();
    for (name, dst) in names.iter().zip(net.params_mut()) {
        c.load_into(name, dst)?;
    }
    Ok(())
}

/// The pre-trained encoder pair `(g, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl EncoderPair {
    pub fn new(seed: u64) -> Self {
        Self {
            image: ImageEncoder::new(seed.wrapping_mul(2).wrapping_add(11)),
            text: TextEncoder::new(seed.wrapping_mul(2).wrapping_add(12)),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend(self.image.net.named_params("image_encoder"));
        c.push("text_encoder.table", self.text.table.clone());
        c.extend(self.text.net.named_params("text_encoder"));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut pair = Self::new(0);
        load_named(&mut pair.image.net, "image_encoder", c)?;
        c.load_into("text_encoder.table", &mut pair.text.table)?;
        load_named(&mut pair.text.net, "text_encoder", c)?;
        Ok(pair)
    }

    /// Every parameter value, in a fixed order; used for freeze checks.
    pub fn snapshot(&self) -> Vec<Matrix> {
        self.image
            .net
            .params()
            .into_iter()
            .chain(self.text.params())
            .cloned()
            .collect()
    }
}

/// Generator and discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct GanPair {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanPair {
    pub fn new(seed: u64) -> Self {
        Self {
            generator: Generator::new(seed.wrapping_mul(2).wrapping_add(21)),
            discriminator: Discriminator::new(seed.wrapping_mul(2).wrapping_add(22)),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.extend(self.generator.net.named_params("generator"));
        c.extend(self.discriminator.net.named_params("discriminator"));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut pair = Self::new(0);
        load_named(&mut pair.generator.net, "generator", c)?;
        load_named(&mut pair.discriminator.net, "discriminator", c)?;
        Ok(pair)
    }
}
