//! Teacher pretraining, student distillation and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity_graph::{compute_intra_affinity, OffsetSet};
use crate::data::{mix_seed, Dataset, Sample};
use crate::error::{contract_err, Result};
use crate::memory_bank::{BankEntry, MemoryBank};
use crate::metrics::{affinity_cluster, evaluate, MetricReport, Segmentation};
use crate::tensor::EmbeddingMap;

use super::adam::{adam_step, AdamState};
use super::network::{backward_cached, forward, forward_cached, ConvNetParams};
use super::objective::{objective, LossReport, LossWeights, TrainerConfig};

// independent random streams derived from the run seed
const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_STUDENT_INIT: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_BANK: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ConvNetParams,
    /// One batch-mean report per iteration.
    pub trace: Vec<LossReport>,
}

pub fn teacher_init(config: &TrainerConfig) -> ConvNetParams {
    ConvNetParams::init(config.teacher_width, config.embed_dim, mix_seed(config.seed, STREAM_TEACHER_INIT))
}

pub fn student_init(config: &TrainerConfig) -> ConvNetParams {
    ConvNetParams::init(config.student_width, config.embed_dim, mix_seed(config.seed, STREAM_STUDENT_INIT))
}

fn draw_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, batch.min(n)).into_vec()
}

fn check_run(samples: &[Sample], config: &TrainerConfig) -> Result<()> {
    config.validate()?;
    if samples.is_empty() {
        return contract_err("training set is empty");
    }
    Ok(())
}

/// Trains `params` on the affinity supervision term alone.
pub fn train_supervised(
    mut params: ConvNetParams,
    samples: &[Sample],
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    check_run(samples, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_BATCHES));
    let mut adam = AdamState::new(&params);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = draw_batch(&mut rng, samples.len(), config.batch);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = params.zeros_like();
        let mut reports = Vec::with_capacity(batch.len());
        for &i in &batch {
            let s = &samples[i];
            let (emb, cache) = forward_cached(&params, &s.image)?;
            let (report, g) = objective(&emb, None, &s.mask, &[], &LossWeights::ZERO, &config.offsets)?;
            grads.add_scaled(scale, &backward_cached(&params, &s.image, &cache, &g)?);
            reports.push(report);
        }
        adam_step(&mut params, &grads, &mut adam, &config.adam);
        trace.push(LossReport::mean(&reports, &LossWeights::ZERO, it));
    }
    Ok(TrainOutcome { params, trace })
}

/// Teacher pretraining: a `teacher_width` network trained on supervision only.
pub fn train_teacher(dataset: &Dataset, config: &TrainerConfig) -> Result<TrainOutcome> {
    train_supervised(teacher_init(config), &dataset.train, config)
}

/// A `student_width` network trained without a teacher.
pub fn train_plain_student(dataset: &Dataset, config: &TrainerConfig) -> Result<TrainOutcome> {
    train_supervised(student_init(config), &dataset.train, config)
}

/// Distills `teacher` into a fresh student. Each iteration draws a batch,
/// pushes the teacher's maps into the memory bank, samples up to `L` bank
/// entries and takes one Adam step on the batch-mean composite objective.
pub fn distill_student(
    teacher: &ConvNetParams,
    dataset: &Dataset,
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    let samples = &dataset.train;
    check_run(samples, config)?;
    if teacher.embed_dim() != config.embed_dim {
        return contract_err("teacher embedding size differs from the configured one");
    }
    let mut params = student_init(config);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_BATCHES));
    let mut bank = MemoryBank::new(config.bank_capacity, mix_seed(config.seed, STREAM_BANK))?;
    let mut adam = AdamState::new(&params);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = draw_batch(&mut rng, samples.len(), config.batch);
        let teacher_maps: Vec<EmbeddingMap> =
            batch.iter().map(|&i| forward(teacher, &samples[i].image)).collect::<Result<_>>()?;
        let entries = batch
            .iter()
            .zip(&teacher_maps)
            .map(|(&i, t)| BankEntry::new(t.clone(), samples[i].mask.clone(), it as u64))
            .collect::<Result<_>>()?;
        bank.enqueue(entries)?;
        let drawn = bank.sample(config.bank_sample);

        let scale = 1.0 / batch.len() as f64;
        let mut grads = params.zeros_like();
        let mut reports = Vec::with_capacity(batch.len());
        for (&i, t) in batch.iter().zip(&teacher_maps) {
            let s = &samples[i];
            let (emb, cache) = forward_cached(&params, &s.image)?;
            let (report, g) = objective(&emb, Some(t), &s.mask, &drawn, &config.weights, &config.offsets)?;
            grads.add_scaled(scale, &backward_cached(&params, &s.image, &cache, &g)?);
            reports.push(report);
        }
        adam_step(&mut params, &grads, &mut adam, &config.adam);
        trace.push(LossReport::mean(&reports, &config.weights, it));
    }
    Ok(TrainOutcome { params, trace })
}

/// Embeds the image, takes its affinities and clusters them.
pub fn predict(
    params: &ConvNetParams,
    image: &EmbeddingMap,
    offsets: &OffsetSet,
    threshold: f64,
) -> Result<Segmentation> {
    let emb = forward(params, image)?;
    affinity_cluster(&compute_intra_affinity(&emb, offsets), offsets, threshold)
}

/// Mean metrics of `params` over `samples`.
pub fn evaluate_model(
    params: &ConvNetParams,
    samples: &[Sample],
    offsets: &OffsetSet,
    threshold: f64,
) -> Result<MetricReport> {
    let reports = samples
        .iter()
        .map(|s| evaluate(&predict(params, &s.image, offsets, threshold)?, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::mean(&reports))
}
