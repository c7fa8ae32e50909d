//! Training orchestration: SGD with momentum, single gradient steps over
//! sampled triplets, the epoch loop with best-validation tracking, and the
//! finite-difference harness over the full training objective.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{sample_triplets, total_loss, Triplet};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, Dataset, Split, SplitCounts, SyntheticSpec};
use crate::encoder::{encode_image, encode_text, BundleValues, EncoderParams};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, FdOptions, GradCheckReport};
use crate::params::{NamedParams, ParamSnapshot};
use crate::retrieval::{evaluate, RetrievalReport};
use crate::tensor::Tape;
use crate::text::{Alphabet, TextInstance};

/// Seed streams, so one run seed drives independent generators.
const STREAM_INIT: u64 = 0;
const STREAM_TRIPLETS: u64 = 2;

/// Stochastic gradient descent with classical momentum:
/// v = momentum * v + g, then theta -= lr * v.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> SgdMomentum {
        SgdMomentum { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Apply one update from the gradients currently held by `params`.
    /// Parameters without a gradient are untouched.
    pub fn step(&mut self, params: &NamedParams) {
        for (name, t) in params.iter() {
            let Some(grad) = t.grad() else { continue };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (vi, gi) in v.iter_mut().zip(&grad) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.lr;
            t.update_data(|data| {
                for (d, vi) in data.iter_mut().zip(v.iter()) {
                    *d -= lr * vi;
                }
            });
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub relation: f64,
    pub lr: f64,
}

/// Seeded parameter initialization for a run.
pub fn init_params(cfg: &RunConfig) -> Result<EncoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(STREAM_INIT);
    EncoderParams::init(&cfg.model, &mut rng)
}

/// One gradient step on a batch: encode, sample triplets, build the
/// weighted loss, backpropagate, update. A non-finite loss aborts the step
/// with parameters and optimizer state untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    dataset: &Dataset,
    batch: &[usize],
    alphabet: &Alphabet,
    params: &EncoderParams,
    named: &NamedParams,
    cfg: &RunConfig,
    opt: &mut SgdMomentum,
    triplet_rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let mut images = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    let mut groups = Vec::with_capacity(batch.len());
    for &i in batch {
        let pair = &dataset.pairs[i];
        let text = TextInstance::encode(&pair.caption, alphabet, cfg.model.seq_len)?;
        images.push(encode_image(&mut tape, &pair.image, params)?);
        texts.push(encode_text(&mut tape, &text, params)?);
        groups.push(dataset.groups[i]);
    }
    let triplets = sample_triplets(&groups, triplet_rng)?;
    let (loss, breakdown) = total_loss(&mut tape, &triplets, &images, &texts, &cfg.loss)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {step} (global {}, local {}, relation {})",
            breakdown.global, breakdown.local, breakdown.relation
        )));
    }
    tape.backward(&loss)?;
    opt.step(named);
    named.zero_grads();
    Ok(StepRecord {
        step,
        total: breakdown.total,
        global: breakdown.global,
        local: breakdown.local,
        relation: breakdown.relation,
        lr: opt.lr,
    })
}

/// Outcome of a training run. When a non-finite loss aborts training,
/// `aborted` carries the diagnostic and the parameters are the last good
/// state.
pub struct TrainingRun {
    pub params: EncoderParams,
    pub named: NamedParams,
    pub records: Vec<StepRecord>,
    /// Snapshot of the best-validation parameters (the final parameters
    /// when there is no validation split).
    pub best: ParamSnapshot,
    pub best_epoch: Option<usize>,
    /// Mean of the two directions' R@1 on the validation split per epoch.
    pub val_history: Vec<(usize, f64)>,
    pub aborted: Option<String>,
}

/// Run the configured number of epochs over the train split.
pub fn run_training(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainingRun> {
    cfg.validate()?;
    if dataset.meta.feature_dim != cfg.model.feature_dim {
        return Err(Error::Config(format!(
            "dataset feature_dim {} does not match model feature_dim {}",
            dataset.meta.feature_dim, cfg.model.feature_dim
        )));
    }
    let alphabet = Alphabet::from_symbols(&cfg.model.alphabet)?;
    let params = init_params(cfg)?;
    let named = params.named();
    let mut opt = SgdMomentum::new(cfg.optim.lr, cfg.optim.momentum);
    let mut triplet_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    triplet_rng.set_stream(STREAM_TRIPLETS);

    let has_val = !dataset.split_range(Split::Val).is_empty();
    let mut best = named.snapshot();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut val_history = Vec::new();
    let mut records = Vec::new();
    let mut aborted = None;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.train.epochs {
        let batches =
            dataset.epoch_batches(Split::Train, cfg.train.batch_size, cfg.train.seed, epoch as u64)?;
        for batch in batches {
            match train_step(
                dataset, &batch, &alphabet, &params, &named, cfg, &mut opt, &mut triplet_rng, step,
            ) {
                Ok(record) => {
                    on_step(&record);
                    records.push(record);
                    step += 1;
                }
                Err(Error::NonFinite(msg)) => {
                    aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if has_val {
            let (annotation, retrieval) =
                evaluate(dataset, Split::Val, &params, cfg, cfg.loss.mode)?;
            let score = (annotation.recall(1) + retrieval.recall(1)) / 2.0;
            val_history.push((epoch, score));
            if score > best_score {
                best_score = score;
                best = named.snapshot();
                best_epoch = Some(epoch);
            }
        }
    }
    if !has_val {
        best = named.snapshot();
    }
    Ok(TrainingRun { params, named, records, best, best_epoch, val_history, aborted })
}

/// Convenience wrapper: train and evaluate the test split with the final
/// parameters.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    dataset: &Dataset,
) -> Result<(TrainingRun, RetrievalReport, RetrievalReport)> {
    let run = run_training(cfg, dataset, |_| {})?;
    let (a, r) = evaluate(dataset, Split::Test, &run.params, cfg, cfg.loss.mode)?;
    Ok((run, a, r))
}

/// The fixed two-pair batch scenario the gradient checker sweeps: one
/// triplet per pair, each using the other pair as both negatives.
const GRADCHECK_TRIPLETS: [Triplet; 2] = [
    Triplet { anchor: 0, neg_text: 1, neg_image: 1 },
    Triplet { anchor: 1, neg_text: 0, neg_image: 0 },
];

/// Distance of the scenario from the nearest hinge or KNN-selection
/// boundary. Finite differences sit on the smooth interior of the loss;
/// a scenario too close to a kink is discarded and rebuilt.
fn kink_margin(
    images: &[BundleValues],
    texts: &[BundleValues],
    margin: f64,
    k: usize,
) -> f64 {
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let knn_mean_and_gap = |query: &[f64], cands: &[Vec<f64>]| -> (f64, f64) {
        let mut scores: Vec<f64> = cands.iter().map(|c| dot(query, c)).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let keep = k.min(scores.len());
        let mean = scores[..keep].iter().sum::<f64>() / keep as f64;
        let gap = if scores.len() > keep {
            scores[keep - 1] - scores[keep]
        } else {
            f64::INFINITY
        };
        (mean, gap)
    };
    let mut min_margin = f64::INFINITY;
    for t in GRADCHECK_TRIPLETS {
        let (img, txt) = (&images[t.anchor], &texts[t.anchor]);
        let d_pos = dot(&img.global, &txt.global);
        let z1 = margin - d_pos + dot(&img.global, &texts[t.neg_text].global);
        let z2 = margin - d_pos + dot(&images[t.neg_image].global, &txt.global);
        min_margin = min_margin.min(z1.abs()).min(z2.abs());
        let (pos_mean, pos_gap) = knn_mean_and_gap(&txt.locals[0], &img.locals);
        let (neg_mean, neg_gap) =
            knn_mean_and_gap(&txt.locals[0], &images[t.neg_image].locals);
        min_margin = min_margin
            .min((margin - pos_mean + neg_mean).abs())
            .min(pos_gap)
            .min(neg_gap);
        if !img.relations.is_empty() && !images[t.neg_image].relations.is_empty() {
            let (rp, gp) = knn_mean_and_gap(&txt.relations[0], &img.relations);
            let (rn, gn) = knn_mean_and_gap(&txt.relations[0], &images[t.neg_image].relations);
            min_margin = min_margin.min((margin - rp + rn).abs()).min(gp).min(gn);
        }
    }
    min_margin
}

/// Verify the analytic gradient of the full training objective on a seeded
/// two-pair batch against central finite differences. The numeric route
/// rebuilds everything from a plain parameter snapshot, fully independent
/// of the recorded tape.
pub fn gradcheck_total_loss(cfg: &RunConfig, opts: &FdOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let alphabet = Alphabet::from_symbols(&cfg.model.alphabet)?;
    for attempt in 0..20u64 {
        let spec = SyntheticSpec {
            num_pairs: 2,
            feature_dim: cfg.model.feature_dim,
            num_regions: cfg.model.num_regions.max(2),
            noise_sigma: 0.1,
            seed: opts.seed.wrapping_add(attempt.wrapping_mul(1009)),
            ..Default::default()
        };
        let dataset = generate_synthetic(&spec, SplitCounts::all_train(2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(attempt));
        rng.set_stream(STREAM_INIT);
        let params = EncoderParams::init(&cfg.model, &mut rng)?;
        let named = params.named();

        // forward + backward on the recording tape for analytic gradients
        let mut tape = Tape::new();
        let mut images = Vec::new();
        let mut texts = Vec::new();
        for pair in &dataset.pairs {
            let text = TextInstance::encode(&pair.caption, &alphabet, cfg.model.seq_len)?;
            images.push(encode_image(&mut tape, &pair.image, params.as_ref())?);
            texts.push(encode_text(&mut tape, &text, params.as_ref())?);
        }
        let image_values: Vec<BundleValues> = images.iter().map(|b| b.values()).collect();
        let text_values: Vec<BundleValues> = texts.iter().map(|b| b.values()).collect();
        if kink_margin(&image_values, &text_values, cfg.loss.margin, cfg.loss.k) < 1e-3 {
            continue; // too close to a hinge/KNN boundary; rebuild
        }
        let (loss, _) = total_loss(&mut tape, &GRADCHECK_TRIPLETS, &images, &texts, &cfg.loss)?;
        tape.backward(&loss)?;
        let analytic = named.grads();
        let snapshot = named.snapshot();
        named.zero_grads();

        // the numeric route: plain data in, scalar loss out
        let model_cfg = cfg.model.clone();
        let loss_cfg = cfg.loss.clone();
        let pairs = dataset.pairs.clone();
        let alphabet = Alphabet::from_symbols(&cfg.model.alphabet)?;
        let eval = move |snap: &ParamSnapshot| -> Result<f64> {
            let rebuilt = EncoderParams::zeros(&model_cfg)?;
            rebuilt.named().restore(snap)?;
            let mut tape = Tape::inference();
            let mut images = Vec::with_capacity(pairs.len());
            let mut texts = Vec::with_capacity(pairs.len());
            for pair in &pairs {
                let text = TextInstance::encode(&pair.caption, &alphabet, model_cfg.seq_len)?;
                images.push(encode_image(&mut tape, &pair.image, &rebuilt)?);
                texts.push(encode_text(&mut tape, &text, &rebuilt)?);
            }
            let (loss, _) =
                total_loss(&mut tape, &GRADCHECK_TRIPLETS, &images, &texts, &loss_cfg)?;
            Ok(loss.item())
        };
        return finite_difference_check(&snapshot, &analytic, eval, opts);
    }
    Err(Error::InvalidArgument(
        "could not build a gradient-check batch away from hinge/KNN boundaries".into(),
    ))
}
