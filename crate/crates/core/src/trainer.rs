//! Description-level training of the adapter.
//!
//! For a pair with ground-truth relation `r`, every description `n` gets the
//! regression target `α·C[r][n] + margin`, where the margin is
//! `β·sim(pair, r) − λ` from the frozen model's relation similarity. The
//! per-sample loss is the mean squared gap between the scaled self-normalized
//! deltas and those targets.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapter::{
    forward_on_tape, init_params, AdapterDims, AdapterParams, DirectionalMarkers, RegionFeatures,
};
use crate::checkpoint::Checkpoint;
use crate::dataio::DatasetFixture;
use crate::error::{Error, Result};
use crate::pack::DescriptionPack;
use crate::par;
use crate::rng;
use crate::tensor::{backward, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Keep at most this many training samples per relation, first come first kept.
    pub max_per_relation: Option<usize>,
    /// `None` picks [`AdapterDims::CLIP_B32`] at width 512 and
    /// [`AdapterDims::small`] otherwise.
    pub adapter_dims: Option<AdapterDims>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.1,
            lambda_margin: 0.03,
            lr: 2e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            temperature: crate::scoring::DEFAULT_TEMPERATURE,
            max_per_relation: None,
            adapter_dims: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_margin", self.lambda_margin),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in finite_nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_per_relation == Some(0) {
            return Err(Error::Config("max_per_relation must be positive when set".into()));
        }
        crate::scoring::SimilarityConfig::new(self.temperature)?;
        if let Some(d) = &self.adapter_dims {
            d.validate()?;
        }
        Ok(())
    }

    pub fn margin(&self, gt_similarity: f64) -> f64 {
        self.beta * gt_similarity - self.lambda_margin
    }

    pub fn dims_for(&self, embed_dim: usize) -> AdapterDims {
        match self.adapter_dims {
            Some(d) => d,
            None if embed_dim == AdapterDims::CLIP_B32.embed_dim => AdapterDims::CLIP_B32,
            None => AdapterDims::small(embed_dim),
        }
    }
}

fn check_lengths(deltas: &[f64], c_row: &[i8]) -> Result<()> {
    if deltas.len() != c_row.len() || deltas.is_empty() {
        return Err(Error::dim("loss", &[deltas.len()], &[c_row.len()]));
    }
    Ok(())
}

/// `mean_n (deltaₙ − α·Cₙ − margin)²`.
pub fn loss_eq9(deltas: &[f64], c_row: &[i8], margin: f64, alpha: f64) -> Result<f64> {
    check_lengths(deltas, c_row)?;
    let sum: f64 = deltas
        .iter()
        .zip(c_row)
        .map(|(d, &c)| {
            let gap = d - alpha * c as f64 - margin;
            gap * gap
        })
        .sum();
    Ok(sum / deltas.len() as f64)
}

/// The margin-free form `mean_n (deltaₙ − α·Cₙ)²`, kept as its own code path.
pub fn loss_eq8(deltas: &[f64], c_row: &[i8], alpha: f64) -> Result<f64> {
    check_lengths(deltas, c_row)?;
    let mut acc = 0.0;
    for (n, d) in deltas.iter().enumerate() {
        let target = match c_row[n] {
            1 => alpha,
            -1 => -alpha,
            _ => 0.0,
        };
        acc += (d - target).powi(2);
    }
    Ok(acc / deltas.len() as f64)
}

/// Per-description regression targets `α·Cₙ + margin`.
pub fn targets(c_row: &[i8], alpha: f64, margin: f64) -> Vec<f64> {
    c_row.iter().map(|&c| alpha * c as f64 + margin).collect()
}

/// The pack's `t_a − t_p` columns as a `D × N` matrix, differenced in f64.
#[derive(Clone, Debug)]
pub struct DescriptionBasis<T: Scalar = f32> {
    delta_t: Tensor<T>,
}

impl<T: Scalar> DescriptionBasis<T> {
    pub fn new(pack: &DescriptionPack) -> Self {
        let (d, n) = (pack.embedding_dim(), pack.description_count());
        let mut data = vec![T::zero(); d * n];
        for (j, p) in pack.pairs().iter().enumerate() {
            for i in 0..d {
                data[i * n + j] = T::from_f64(p.raw_embedding[i] as f64 - p.opposite_embedding[i] as f64);
            }
        }
        Self {
            delta_t: Tensor::new(vec![d, n], data).expect("d × n"),
        }
    }

    pub fn description_count(&self) -> usize {
        self.delta_t.cols()
    }
}

/// Loss of one pair and its gradient for every adapter tensor, in
/// [`crate::adapter::Param::ALL`] order.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss_and_grads<T: Scalar>(
    params: &AdapterParams<T>,
    basis: &DescriptionBasis<T>,
    subject: &RegionFeatures<T>,
    object: &RegionFeatures<T>,
    markers: &DirectionalMarkers<T>,
    target: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if target.len() != basis.description_count() {
        return Err(Error::dim("targets", &[target.len()], &[basis.description_count()]));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = forward_on_tape(&mut tape, &bound, params.dims(), subject, object, markers)?;
    let vn = tape.normalize_rows(v)?;
    let basis_var = tape.constant(basis.delta_t.clone());
    let deltas = tape.matmul(vn, basis_var)?;
    let deltas = tape.scale(deltas, T::from_f64(temperature));
    let target = tape.constant(Tensor::row(target.iter().map(|&t| T::from_f64(t)).collect()));
    let gap = tape.sub(deltas, target)?;
    let sq = tape.mul(gap, gap)?;
    let loss = tape.mean_all(sq);
    let loss_value = tape.value(loss).data()[0].as_f64();
    let mut grads = backward(&tape, loss)?;
    let out = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).expect("every parameter is a leaf").reshape(p.shape().to_vec()))
        .collect::<Result<_>>()?;
    Ok((loss_value, out))
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `g ← grad + wd·p`, `buf ← μ·buf + g`, `p ← p − lr·buf`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Option<Vec<Vec<f64>>>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: None,
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("sgd_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("sgd_step", p.shape(), g.shape()));
            }
        }
        let first = self.buffers.is_none();
        let buffers = self
            .buffers
            .get_or_insert_with(|| params.iter().map(|p| vec![0.0; p.len()]).collect());
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(buffers.iter_mut()) {
            for ((w, gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let step = gv.as_f64() + self.weight_decay * w.as_f64();
                *b = if first { step } else { self.momentum * *b + step };
                *w = T::from_f64(w.as_f64() - self.lr * *b);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Indices of the samples used for training, honoring the per-relation cap.
/// Fails on the first sample whose relation is outside `base_relations`.
fn training_indices(dataset: &DatasetFixture, base_relations: &[String], cap: Option<usize>) -> Result<Vec<usize>> {
    let base: HashSet<&str> = base_relations.iter().map(String::as_str).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = &dataset.relation_names[s.gt_relation];
        if !base.contains(name.as_str()) {
            return Err(Error::DataLeak {
                sample: i,
                relation: name.clone(),
            });
        }
        let c = counts.entry(s.gt_relation).or_default();
        if cap.is_none_or(|cap| *c < cap) {
            *c += 1;
            out.push(i);
        }
    }
    Ok(out)
}

/// Train the adapter on `dataset` with every ground truth drawn from
/// `base_relations`. `on_epoch` sees the checkpoint after each epoch.
pub fn train(
    dataset: &DatasetFixture,
    pack: &DescriptionPack,
    cfg: &TrainConfig,
    base_relations: &[String],
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if pack.embedding_dim() != dataset.embedding_dim {
        return Err(Error::dim("train", &[pack.embedding_dim()], &[dataset.embedding_dim]));
    }
    for name in base_relations {
        if pack.associations().relation_index(name).is_none() {
            return Err(Error::Lookup {
                kind: "relation",
                name: name.clone(),
            });
        }
    }
    let indices = training_indices(dataset, base_relations, cfg.max_per_relation)?;
    // Pack row and margin target of every sample, resolved once.
    let targets_by_sample: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| {
            let name = &dataset.relation_names[s.gt_relation];
            let row = pack.associations().relation_index(name).expect("checked above");
            let margin = cfg.margin(s.clip_relation_sims[s.gt_relation] as f64);
            targets(pack.associations().row(row), cfg.alpha, margin)
        })
        .collect();

    let dims = cfg.dims_for(dataset.embedding_dim);
    let mut params = init_params(dims, cfg.seed)?;
    let basis = DescriptionBasis::<f32>::new(pack);
    let mut sgd = Sgd::<f32>::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut shuffle_rng = rng::seeded(cfg.seed);
    shuffle_rng.set_stream(1);

    let config_echo = json!(cfg);
    let snapshot = |params: &AdapterParams<f32>, epochs: usize| {
        let mut c = Checkpoint::new(params.clone(), cfg.seed, cfg.temperature);
        c.epochs_completed = epochs;
        c.train_config = config_echo.clone();
        c
    };

    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = indices;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = par::map(batch, |&i| {
                let s = &dataset.samples[i];
                pair_loss_and_grads(
                    &params,
                    &basis,
                    &s.subject,
                    &s.object,
                    &dataset.markers,
                    &targets_by_sample[i],
                    cfg.temperature,
                )
            });
            let mut loss_sum = 0.0;
            let mut grad_sum: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += *v as f64;
                    }
                }
            }
            let n = batch.len() as f64;
            let mean_grads: Vec<Tensor<f32>> = grad_sum
                .into_iter()
                .zip(params.tensors())
                .map(|(acc, t)| {
                    Tensor::new(t.shape().to_vec(), acc.into_iter().map(|a| (a / n) as f32).collect())
                })
                .collect::<Result<_>>()?;
            sgd.step(params.tensors_mut(), &mean_grads)?;
            let loss = loss_sum / n;
            if !loss.is_finite() {
                return Err(Error::Degenerate(format!("loss became {loss} at epoch {epoch}, batch {b}")));
            }
            log.push(TrainLogRecord {
                epoch,
                batch: b,
                loss,
                lr: cfg.lr,
            });
            epoch_sum += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_sum / batches as f64);
        on_epoch(&snapshot(&params, epoch + 1))?;
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(&params, cfg.epochs),
        log,
        epoch_losses,
    })
}
