//! Training: validation split, data-parallel SGD with momentum, evaluation
//! and throughput measurement.
//!
//! Data parallelism follows all-reduce semantics. Each of `K` replicas runs
//! forward and backward on its own batch; the gradients are combined in rank
//! order (weighted by batch size, which is the plain mean for equal batches)
//! and every replica applies the same update. Batch-norm statistics are
//! computed per replica and the rank-0 running statistics are broadcast after
//! each step, so all replicas stay bit-identical.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{build_model, save_checkpoint, softmax_cross_entropy, EpochMetrics, Model, ModelConfig, NetError};
use crate::scalar::Scalar;
use crate::store::{read_pgm, CorpusLabel, CorpusManifest, StoreError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: usize, world_size: usize },
    #[error("replica divergence after step {step}: rank {rank} hash {hash} != rank 0 hash {reference}")]
    ReplicaDivergence {
        step: usize,
        rank: usize,
        hash: String,
        reference: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Samples per replica per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidHyperparams(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stratified, seeded split of manifest record indices into `(train, val)`.
///
/// Each label contributes `round(n * val_fraction)` records to validation.
/// Both sides are returned in ascending index order.
pub fn split_train_val(manifest: &CorpusManifest, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if manifest.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::InvalidSplit(format!("fraction {val_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in CorpusLabel::ALL {
        let mut idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.records[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val == idx.len() {
            return Err(TrainError::InvalidSplit(format!(
                "fraction {val_fraction} leaves an empty side for {} {label} records",
                idx.len()
            )));
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Indices assigned to one worker for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub worker_rank: usize,
    pub world_size: usize,
    pub indices: Vec<usize>,
}

/// Shuffles `indices` with `epoch_seed`, then gives rank `r` positions
/// `r, r + world_size, ...`. Sizes differ by at most one, lower ranks first.
pub fn partition(indices: &[usize], world_size: usize, rank: usize, epoch_seed: u64) -> Result<Partition> {
    if world_size == 0 || rank >= world_size {
        return Err(TrainError::RankOutOfRange { rank, world_size });
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(Partition {
        worker_rank: rank,
        world_size,
        indices: order.into_iter().skip(rank).step_by(world_size).collect(),
    })
}

/// Tiles held in memory as unit-scaled pixels.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub tile_size: usize,
    pixels: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(tile_size: usize, pixels: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * tile_size * tile_size {
            return Err(TrainError::Data(format!(
                "{} pixels for {} tiles of size {tile_size}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { tile_size, pixels, labels })
    }

    /// Reads every tile of a manifest (pixels divided by 255).
    pub fn from_manifest(manifest: &CorpusManifest) -> Result<Self> {
        let s = manifest.tile_size;
        let mut pixels = Vec::with_capacity(manifest.len() * s * s);
        let mut labels = Vec::with_capacity(manifest.len());
        let max = T::lit(255.0);
        for rec in &manifest.records {
            let path = manifest.absolute_path(rec);
            let (w, h, px) = read_pgm(&path)?;
            if w != s || h != s {
                return Err(TrainError::Data(format!("{} is {w}x{h}, expected {s}x{s}", path.display())));
            }
            pixels.extend(px.iter().map(|&p| T::from_u8(p).unwrap() / max));
            labels.push(rec.label.index());
        }
        Self::new(s, pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let per = self.tile_size * self.tile_size;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Gathers the given samples into one contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        let mut data = Vec::with_capacity(indices.len() * self.tile_size * self.tile_size);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Batch {
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let b = self.batch(indices);
        Self {
            tile_size: self.tile_size,
            pixels: b.data,
            labels: b.labels,
        }
    }
}

/// Contiguous `[n, 1, S, S]` pixels with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch<T> {
    pub data: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss and accuracy accumulated over one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Sum of per-sample losses.
    pub loss_sum: f64,
    pub correct: usize,
    pub samples: usize,
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `K` parameter-identical replicas trained with gradient averaging.
#[derive(Debug, Clone)]
pub struct DataParallel<T: Scalar> {
    replicas: Vec<Model<T>>,
    velocity: Vec<Vec<T>>,
    learning_rate: T,
    momentum: T,
    steps: usize,
}

impl<T: Scalar> DataParallel<T> {
    pub fn new(model: Model<T>, world_size: usize, hyper: &Hyperparams) -> Result<Self> {
        if world_size == 0 {
            return Err(TrainError::RankOutOfRange { rank: 0, world_size });
        }
        let n = model.param_count();
        Ok(Self {
            replicas: vec![model; world_size],
            velocity: vec![vec![T::zero(); n]; world_size],
            learning_rate: T::lit(hyper.learning_rate),
            momentum: T::lit(hyper.momentum),
            steps: 0,
        })
    }

    pub fn world_size(&self) -> usize {
        self.replicas.len()
    }

    pub fn replica(&self, rank: usize) -> &Model<T> {
        &self.replicas[rank]
    }

    pub fn replicas_mut(&mut self) -> &mut [Model<T>] {
        &mut self.replicas
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn into_model(mut self) -> Model<T> {
        self.replicas.swap_remove(0)
    }

    /// One synchronized step; `batches[r]` goes to replica `r` and may be empty.
    pub fn step(&mut self, batches: &[Batch<T>]) -> Result<StepStats> {
        if batches.len() != self.replicas.len() {
            return Err(TrainError::Data(format!("{} batches for {} replicas", batches.len(), self.replicas.len())));
        }
        let total: usize = batches.iter().map(|b| b.len()).sum();
        if total == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let results: Vec<Result<StepStats>> = if self.replicas.len() == 1 {
            vec![local_step(&mut self.replicas[0], &batches[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .replicas
                    .iter_mut()
                    .zip(batches)
                    .map(|(m, b)| s.spawn(move || local_step(m, b)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("replica thread panicked")).collect()
            })
        };
        let mut stats = StepStats::default();
        for r in results {
            let r = r?;
            stats.loss_sum += r.loss_sum;
            stats.correct += r.correct;
            stats.samples += r.samples;
        }

        // Rank-ordered reduction into a single averaged gradient.
        let mut avg = vec![T::zero(); self.replicas[0].param_count()];
        for (m, b) in self.replicas.iter().zip(batches) {
            if b.is_empty() {
                continue;
            }
            let w = T::from_usize_lossy(b.len()) / T::from_usize_lossy(total);
            for (a, &g) in avg.iter_mut().zip(m.grads()) {
                *a += w * g;
            }
        }
        for (m, v) in self.replicas.iter_mut().zip(&mut self.velocity) {
            for ((p, v), &g) in m.params_mut().iter_mut().zip(v.iter_mut()).zip(&avg) {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
        let (first, rest) = self.replicas.split_at_mut(1);
        for m in rest.iter_mut() {
            m.running_stats_mut().copy_from_slice(first[0].running_stats());
        }
        self.steps += 1;
        self.check_consistency()?;
        Ok(stats)
    }

    /// Errors unless every replica's parameters and statistics equal rank 0's.
    pub fn check_consistency(&self) -> Result<()> {
        let reference = &self.replicas[0];
        for (rank, m) in self.replicas.iter().enumerate().skip(1) {
            let same = |a: &[T], b: &[T]| a.iter().zip(b).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits());
            if !same(m.params(), reference.params()) || !same(m.running_stats(), reference.running_stats()) {
                return Err(TrainError::ReplicaDivergence {
                    step: self.steps,
                    rank,
                    hash: m.parameter_hash(),
                    reference: reference.parameter_hash(),
                });
            }
        }
        Ok(())
    }
}

fn local_step<T: Scalar>(model: &mut Model<T>, batch: &Batch<T>) -> Result<StepStats> {
    let n = batch.len();
    if n == 0 {
        return Ok(StepStats::default());
    }
    let classes = model.config().num_classes;
    let logits = model.forward_train_flat(&batch.data, n)?;
    let view = ArrayView2::from_shape((n, classes), &logits).expect("logit shape");
    let (loss, d) = softmax_cross_entropy(view, &batch.labels)?;
    model.backward(d.view())?;
    let correct = (0..n).filter(|&i| argmax(&logits[i * classes..(i + 1) * classes]) == batch.labels[i]).count();
    Ok(StepStats {
        loss_sum: loss.to_f64_lossy() * n as f64,
        correct,
        samples: n,
    })
}

/// Performs one data-parallel step (see [`DataParallel::step`]).
pub fn train_step<T: Scalar>(replicas: &mut DataParallel<T>, batches: &[Batch<T>]) -> Result<StepStats> {
    replicas.step(batches)
}

/// Mean cross-entropy and argmax accuracy in evaluation mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.config().num_classes;
    let logits = model.forward_eval_flat(&data.pixels, data.len())?;
    let view = ArrayView2::from_shape((data.len(), classes), &logits).expect("logit shape");
    let (loss, _) = softmax_cross_entropy(view, &data.labels)?;
    let correct = (0..data.len())
        .filter(|&i| argmax(&logits[i * classes..(i + 1) * classes]) == data.labels[i])
        .count();
    Ok((loss.to_f64_lossy(), correct as f64 / data.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ModelConfig,
    pub hyperparams: Hyperparams,
    pub world_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub epochs: Vec<EpochMetrics>,
    pub val_loss: Vec<f64>,
    pub wall_time_s: f64,
    /// Training samples processed per second, excluding validation.
    pub throughput_samples_per_s: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_acc)
    }

    /// `epoch,train_loss,train_acc,val_acc` rows.
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.train_acc, e.val_acc));
        }
        out
    }
}

/// Outputs of [`train`] beyond the report itself.
#[derive(Debug, Default, Clone)]
pub struct TrainOptions {
    /// Where to save the final model.
    pub checkpoint: Option<PathBuf>,
}

/// Trains on a manifest's tiles with `world_size` data-parallel replicas.
///
/// Deterministic for fixed seeds and world size. Per-epoch training metrics
/// come from the train-mode passes; validation runs in evaluation mode on
/// rank 0 after every epoch. `on_epoch` sees each epoch's metrics.
pub fn train<T: Scalar>(
    manifest: &CorpusManifest,
    config: &ModelConfig,
    hyper: &Hyperparams,
    world_size: usize,
    options: &TrainOptions,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainReport, Model<T>)> {
    hyper.validate()?;
    if manifest.tile_size != config.input_size {
        return Err(TrainError::Data(format!(
            "corpus tile size {} differs from model input size {}",
            manifest.tile_size, config.input_size
        )));
    }
    let data = Dataset::<T>::from_manifest(manifest)?;
    let (train_idx, val_idx) = split_train_val(manifest, hyper.val_fraction, hyper.seed)?;
    train_on(&data, &train_idx, &val_idx, config, hyper, world_size, options, on_epoch)
}

/// [`train`] over an in-memory dataset and explicit train/validation indices.
#[allow(clippy::too_many_arguments)]
pub fn train_on<T: Scalar>(
    data: &Dataset<T>,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &ModelConfig,
    hyper: &Hyperparams,
    world_size: usize,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainReport, Model<T>)> {
    hyper.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let mut dp = DataParallel::new(build_model::<T>(config)?, world_size, hyper)?;
    let val = data.subset(val_idx);
    let mut history = Vec::new();
    let mut val_loss = Vec::new();
    let mut train_time = 0.0;
    let mut trained = 0usize;
    for epoch in 0..hyper.epochs {
        let t0 = Instant::now();
        let epoch_seed = mix_seed(hyper.seed, epoch as u64);
        let parts: Vec<Partition> = (0..world_size)
            .map(|r| partition(train_idx, world_size, r, epoch_seed))
            .collect::<Result<_>>()?;
        let longest = parts.iter().map(|p| p.indices.len()).max().unwrap_or(0);
        let mut totals = StepStats::default();
        for start in (0..longest).step_by(hyper.batch_size) {
            let batches: Vec<Batch<T>> = parts
                .iter()
                .map(|p| {
                    let end = (start + hyper.batch_size).min(p.indices.len());
                    data.batch(p.indices.get(start..end).unwrap_or(&[]))
                })
                .collect();
            let s = dp.step(&batches)?;
            totals.loss_sum += s.loss_sum;
            totals.correct += s.correct;
            totals.samples += s.samples;
        }
        train_time += t0.elapsed().as_secs_f64();
        trained += totals.samples;
        let (vl, va) = evaluate(dp.replica(0), &val)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: totals.loss_sum / totals.samples as f64,
            train_acc: totals.correct as f64 / totals.samples as f64,
            val_acc: va,
        };
        on_epoch(&m);
        history.push(m);
        val_loss.push(vl);
    }
    let model = dp.into_model();
    if let Some(path) = &options.checkpoint {
        save_checkpoint(&model, hyper.epochs, &history, path)?;
    }
    let report = TrainReport {
        config: config.clone(),
        hyperparams: hyper.clone(),
        world_size,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        epochs: history,
        val_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
        throughput_samples_per_s: trained as f64 / train_time.max(f64::MIN_POSITIVE),
        checkpoint: options.checkpoint.clone(),
    };
    Ok((report, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub world_size: usize,
    pub samples_per_s: f64,
    /// `throughput_w / (w * throughput_1)`.
    pub fraction_of_ideal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub rows: Vec<ThroughputRow>,
    pub steps: usize,
    pub batch_size: usize,
    /// Hardware threads reported by the OS.
    pub available_workers: usize,
}

impl ThroughputReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("world_size,samples_per_s,fraction_of_ideal\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.world_size, r.samples_per_s, r.fraction_of_ideal));
        }
        out
    }
}

/// Times `steps` data-parallel steps on random tiles for each world size,
/// with a fixed per-replica batch (weak scaling). The smallest world size in
/// the list is the reference; list 1 first to get the usual table.
pub fn throughput_benchmark<T: Scalar>(config: &ModelConfig, world_sizes: &[usize], steps: usize, batch_size: usize, seed: u64) -> Result<ThroughputReport> {
    let hyper = Hyperparams {
        batch_size,
        seed,
        ..Default::default()
    };
    hyper.validate()?;
    let per = config.input_size * config.input_size * config.in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<ThroughputRow> = Vec::new();
    for &w in world_sizes {
        let mut dp = DataParallel::new(build_model::<T>(config)?, w, &hyper)?;
        let batches: Vec<Batch<T>> = (0..w)
            .map(|_| Batch {
                data: (0..batch_size * per).map(|_| T::lit(rng.random::<f64>())).collect(),
                labels: (0..batch_size).map(|_| rng.random_range(0..config.num_classes)).collect(),
            })
            .collect();
        dp.step(&batches)?;
        let t = Instant::now();
        for _ in 0..steps {
            dp.step(&batches)?;
        }
        let thr = (steps * batch_size * w) as f64 / t.elapsed().as_secs_f64();
        let (w0, t0) = rows.first().map_or((w, thr), |r| (r.world_size, r.samples_per_s));
        rows.push(ThroughputRow {
            world_size: w,
            samples_per_s: thr,
            fraction_of_ideal: thr * w0 as f64 / (w as f64 * t0),
        });
    }
    Ok(ThroughputReport {
        rows,
        steps,
        batch_size,
        available_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

/// Writes the per-epoch CSV next to a report.
pub fn write_epoch_csv(report: &TrainReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.epoch_csv()).map_err(|source| {
        TrainError::Store(StoreError::Io {
            path: path.to_owned(),
            source,
        })
    })
}
