//! Scoring trained generators with the frozen toy classifier.
//!
//! The classifier is fit on a separate single-object reference set that
//! covers every shape/color combination, so one frozen instance serves
//! both dataset regimes and every run compared against it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_reference_set, LabeledExample, MAX_CLASSES};
use crate::metrics::{self, ClusterSimilarity, GaussianStats, InceptionScore};
use crate::models::{image_batch, sample_noise, Classifier, EncoderPair, GanPair, TextInput};
use crate::tensor::Matrix;
use crate::trainer::TrainError;

pub const DEFAULT_SAMPLES: usize = 2000;
const GENERATION_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluatorSettings {
    pub reference_per_class: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EvaluatorSettings {
    fn default() -> Self {
        Self {
            reference_per_class: 60,
            epochs: 25,
            batch: 32,
            seed: 7,
        }
    }
}

/// Frozen classifier plus its training accuracy.
#[derive(Debug, Clone)]
pub struct Evaluator {
    classifier: Classifier,
    pub train_accuracy: f64,
}

/// Toy-IS and toy-FID of one generated population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationScores {
    pub inception: InceptionScore,
    pub fid: f64,
}

impl Evaluator {
    pub fn train(settings: &EvaluatorSettings) -> Result<Self, TrainError> {
        let reference = generate_reference_set(settings.reference_per_class, settings.seed)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let images = image_batch(&reference.examples);
        let classes: Vec<usize> = reference
            .examples
            .iter()
            .map(|e| e.labels.as_slice()[0] as usize)
            .collect();
        let mut classifier = Classifier::new(MAX_CLASSES, settings.seed);
        let train_accuracy = classifier.fit(&images, &classes, settings.epochs, settings.batch, settings.seed)?;
        classifier.freeze();
        Ok(Self {
            classifier,
            train_accuracy,
        })
    }

    pub fn from_classifier(classifier: Classifier) -> Result<Self, TrainError> {
        if !classifier.is_frozen() {
            return Err(crate::models::ModelError::NotFrozen.into());
        }
        Ok(Self {
            classifier,
            train_accuracy: f64::NAN,
        })
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn feature_stats(&self, images: &Matrix) -> Result<GaussianStats, TrainError> {
        let out = self.classifier.predict(images)?;
        Ok(metrics::gaussian_stats(&out.features)?)
    }

    /// IS of `fake` and FID between `fake` and `real`.
    pub fn score_images(&self, fake: &Matrix, real: &Matrix) -> Result<GenerationScores, TrainError> {
        let out = self.classifier.predict(fake)?;
        let inception = metrics::inception_score(&out.probabilities)?;
        let fake_stats = metrics::gaussian_stats(&out.features)?;
        let real_stats = self.feature_stats(real)?;
        let fid = metrics::frechet_distance(&fake_stats, &real_stats)?;
        Ok(GenerationScores { inception, fid })
    }

    /// Generates `samples` images from the test captions (cycled) and scores
    /// them against the test images.
    pub fn evaluate_generator(
        &self,
        gan: &GanPair,
        encoders: &EncoderPair,
        test: &[LabeledExample],
        samples: usize,
        seed: u64,
    ) -> Result<GenerationScores, TrainError> {
        let fake = generate_from_captions(gan, encoders, test, samples, seed)?;
        self.score_images(&fake, &image_batch(test))
    }
}

/// `samples` generated images conditioned on the captions of `examples`,
/// taken in order and cycled.
pub fn generate_from_captions(
    gan: &GanPair,
    encoders: &EncoderPair,
    examples: &[LabeledExample],
    samples: usize,
    seed: u64,
) -> Result<Matrix, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Config("no captions to condition on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < samples {
        let end = (start + GENERATION_CHUNK).min(samples);
        let caps: Vec<&TextInput> = (start..end).map(|i| &examples[i % examples.len()].caption).collect();
        let text = encoders.text.encode(&caps)?.normalize_rows()?;
        let noise = sample_noise(end - start, &mut rng);
        parts.push(gan.generator.generate(&noise, &text)?);
        start = end;
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(Matrix::concat_rows(&refs)?)
}

/// Within- and between-class cosine similarity of image embeddings.
pub fn image_cluster_similarity(encoders: &EncoderPair, examples: &[LabeledExample]) -> Result<ClusterSimilarity, TrainError> {
    let v = encoders.image.encode(&image_batch(examples))?;
    let labels: Vec<_> = examples.iter().map(|e| e.labels.clone()).collect();
    Ok(metrics::same_label_similarity(&v, &labels)?)
}
