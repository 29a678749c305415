//! Deterministic training and evaluation loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Checkpoint, RunConfig};
use crate::crf::{crf_refine, CrfParams};
use crate::dataset::{generate_synthetic, load_pairs, preprocess, stack, SampleRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::network::Network;
use crate::optim::{poly_lr, sgd_step};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Weight kept by running batch-norm statistics at each update.
pub const NORM_MOMENTUM: f64 = 0.9;

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Iterations completed so far.
    pub iteration: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Learning rate of the last step.
    pub lr: f64,
    pub train_iou: Option<f64>,
}

impl EpochLog {
    pub fn record(&self) -> String {
        let mut s = format!(
            "epoch={} iter={} loss={:.9} lr={:.6e}",
            self.epoch, self.iteration, self.loss, self.lr
        );
        if let Some(iou) = self.train_iou {
            s.push_str(&format!(" train_iou={iou:.6}"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
    /// Forward operations recorded over the whole run, by op name.
    pub op_counts: BTreeMap<String, usize>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn best_iou(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.train_iou).reduce(f64::max)
    }

    pub fn op_count(&self, name: &str) -> usize {
        self.op_counts.get(name).copied().unwrap_or(0)
    }
}

/// Training images named by `config`: the pairs in `data.train_dir`, or
/// `data.synthetic_scenes` synthetic scenes at the network resolution seeded
/// by `run.seed`.
pub fn training_records(config: &RunConfig) -> Result<Vec<SampleRecord>> {
    match &config.data.train_dir {
        Some(dir) => load_pairs(dir),
        None => generate_synthetic(
            config.data.synthetic_scenes,
            config.network.resolution,
            config.run.seed,
            &config.data.synth,
        ),
    }
}

/// Probability maps (level 1) for `records` at the network resolution,
/// `batch` images at a time, optionally refined by the CRF. Returns the
/// maps with the resized ground truth.
pub fn predict_records<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    records: &[SampleRecord],
    batch: usize,
    crf: Option<&CrfParams>,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let resolution = network.config().resolution;
    // augmentation is off, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let pairs = chunk
            .iter()
            .map(|r| preprocess::<T, _>(r, resolution, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (images, masks): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let images = stack(&images)?;
        let mut prob = network.probabilities(store, &images)?;
        if let Some(params) = crf {
            prob = crf_refine(&images, &prob, params)?;
        }
        let s = prob.shape();
        for (n, mask) in masks.into_iter().enumerate() {
            let single = Tensor::from_vec(crate::tensor::Shape::new(1, 1, s.h, s.w), prob.sample(n).to_vec())?;
            out.push((single, mask));
        }
    }
    Ok(out)
}

/// The five metrics of `records`; binarization is at the metric threshold.
pub fn evaluate<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    records: &[SampleRecord],
    batch: usize,
    crf: Option<&CrfParams>,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("no images to evaluate".into()));
    }
    let mut acc = MetricsAccumulator::new();
    for (prob, gt) in predict_records(network, store, records, batch, crf)? {
        acc.add(&prob, &gt)?;
    }
    acc.finish()
}

/// Trains from scratch on `records`. `on_epoch` sees every epoch record as
/// it completes; an error from it aborts the run.
pub fn train<T: Real>(
    config: &RunConfig,
    records: &[SampleRecord],
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<(Network, Checkpoint<T>, TrainReport)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    data_rng.set_stream(DATA_STREAM);

    let network = Network::new(config.network.clone())?;
    let mut store: ParamStore<T> = network.init(&mut init_rng);
    let optim = &config.optim;
    let max_iter = optim.max_iter(records.len());
    let resolution = config.network.resolution;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_early: false,
        op_counts: BTreeMap::new(),
    };
    let mut iteration = 0;

    for epoch in 1..=optim.epochs {
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(optim.batch_size) {
            let pairs = chunk
                .iter()
                .map(|&i| preprocess::<T, _>(&records[i], resolution, config.data.augment, &mut data_rng))
                .collect::<Result<Vec<_>>>()?;
            let (images, masks): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let (images, masks) = (stack(&images)?, stack(&masks)?);

            let mut g = Graph::new(Mode::Train);
            let x = g.input(images);
            let out = network.forward_graph(&mut g, &store, x)?;
            let loss = network.loss_graph(&mut g, &out, &masks)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Data(format!("loss diverged at iteration {iteration}")));
            }
            g.backward(loss)?.accumulate_into(&g, &mut store)?;
            store.apply_norm_stats(&g.take_norm_updates(), T::of(NORM_MOMENTUM))?;
            for (name, count) in g.op_counts() {
                *report.op_counts.entry(name.to_string()).or_default() += count;
            }

            lr = poly_lr(optim.base_lr, iteration, max_iter, optim.power)?;
            sgd_step(&mut store, lr, optim)?;
            iteration += 1;
            loss_sum += value;
            batches += 1;
        }

        let every = config.run.eval_every;
        let train_iou = if every > 0 && (epoch % every == 0 || epoch == optim.epochs) {
            let m = evaluate(&network, &store, records, optim.batch_size, None)?;
            Some(m.iou)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            iteration,
            loss: loss_sum / batches as f64,
            lr,
            train_iou,
        };
        on_epoch(&log)?;
        report.epochs.push(log);
        if let (Some(target), Some(iou)) = (config.run.stop_at_iou, train_iou) {
            if iou >= target {
                report.stopped_early = epoch < optim.epochs;
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        store,
    };
    Ok((network, checkpoint, report))
}
