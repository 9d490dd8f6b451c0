//! Losses, the ADADELTA optimizer, the two-stage training loop with the
//! localization-loss moving-average switch, and checkpoint serialization.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointData};
use crate::error::{Error, Result};
use crate::layers::{Binder, GradStore};
use crate::model::{image_tensor, CapnetModel, ModelConfig, SamplePooling};
use crate::par;
use crate::pooling::FeatureSource;
use crate::rng::{derive_seed, rng_for, STREAM_BATCH, STREAM_NOISE};
use crate::synthdata::LoadedSample;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REC_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean binary cross entropy between heat-map logits and a binary ground
/// truth of identical shape, in the numerically stable logits form.
pub fn loc_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(logits) != gt.shape() {
        return Err(Error::dimension(
            "loc_loss",
            format!("logits {:?} vs ground truth {:?}", tape.shape(logits), gt.shape()),
        ));
    }
    tape.bce_with_logits_mean(logits, gt.data())
}

pub struct RecLoss {
    pub loss: Var,
    /// Number of probabilities clamped at the floor before the log.
    pub clamp_events: u64,
}

/// Negative log-likelihood of the true symbols averaged over time;
/// probabilities are floored at 1e-12 (events counted, not hidden).
pub fn rec_loss(tape: &mut Tape, true_probs: Var) -> Result<RecLoss> {
    let t = tape.value(true_probs).len();
    if t == 0 {
        return Err(Error::argument("rec_loss", "empty probability sequence"));
    }
    let clamp_events = tape.value(true_probs).iter().filter(|&&p| p < REC_PROB_FLOOR).count() as u64;
    let clamped = tape.clamp_min(true_probs, REC_PROB_FLOOR);
    let logs = tape.ln(clamped);
    let total = tape.sum(logs);
    let loss = tape.scale(total, -1.0 / t as f64);
    Ok(RecLoss { loss, clamp_events })
}

/// λ1·l_loc + λ2·l_rec. `l_loc` is absent for samples without character
/// annotations; its extra scale reweights the per-sample term so the batch
/// localization loss averages over annotated samples only.
pub fn total_loss(
    tape: &mut Tape,
    l_loc: Option<(Var, f64)>,
    l_rec: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let rec_term = tape.scale(l_rec, weights.lambda2);
    match l_loc {
        Some((loc, scale)) => {
            let loc_term = tape.scale(loc, weights.lambda1 * scale);
            tape.add(loc_term, rec_term)
        }
        None => Ok(rec_term),
    }
}

// ── ADADELTA ────────────────────────────────────────────────────────────

struct AdaState {
    eg2: Vec<f64>,
    ex2: Vec<f64>,
}

/// ADADELTA with default parameters (ρ = 0.95, ε = 1e-6) and an external
/// learning-rate multiplier applied to the computed update.
pub struct Adadelta {
    pub rho: f64,
    pub epsilon: f64,
    pub lr_multiplier: f64,
    state: HashMap<String, AdaState>,
}

impl Default for Adadelta {
    fn default() -> Self {
        Adadelta::new()
    }
}

impl Adadelta {
    pub fn new() -> Self {
        Adadelta { rho: 0.95, epsilon: 1e-6, lr_multiplier: 1.0, state: HashMap::new() }
    }

    /// Applies one update to a single parameter tensor. A missing gradient
    /// is a zero gradient: accumulators decay, the parameter stays put.
    pub fn step_param(&mut self, name: &str, param: &mut Tensor, grad: Option<&[f64]>) {
        let n = param.numel();
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| AdaState { eg2: vec![0.0; n], ex2: vec![0.0; n] });
        debug_assert_eq!(st.eg2.len(), n);
        let rho = self.rho;
        let eps = self.epsilon;
        let lr = self.lr_multiplier;
        let data = param.data_mut();
        match grad {
            Some(g) => {
                for i in 0..n {
                    st.eg2[i] = rho * st.eg2[i] + (1.0 - rho) * g[i] * g[i];
                    let dx = -((st.ex2[i] + eps).sqrt() / (st.eg2[i] + eps).sqrt()) * g[i];
                    st.ex2[i] = rho * st.ex2[i] + (1.0 - rho) * dx * dx;
                    data[i] += lr * dx;
                }
            }
            None => {
                for i in 0..n {
                    st.eg2[i] *= rho;
                    st.ex2[i] *= rho;
                }
            }
        }
    }

    /// Updates every model parameter in canonical order.
    pub fn step_model(&mut self, model: &mut CapnetModel, grads: &GradStore) {
        model.visit_mut(&mut |name: &str, t: &mut Tensor| {
            self.step_param(name, t, grads.get(name));
        });
    }

    /// Accumulator tensors for checkpointing, in the given name order.
    fn export_state(&self, order: &[String]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for name in order {
            if let Some(st) = self.state.get(name) {
                out.push((format!("opt.{name}.eg2"), vec![st.eg2.len()], st.eg2.clone()));
                out.push((format!("opt.{name}.ex2"), vec![st.ex2.len()], st.ex2.clone()));
            }
        }
        out
    }

    fn import_state(&mut self, name: &str, eg2: Vec<f64>, ex2: Vec<f64>) {
        self.state.insert(name.to_string(), AdaState { eg2, ex2 });
    }
}

// ── training configuration and loop ─────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// First time the L_loc moving average drops below this, training
    /// switches permanently to predicted-anchor pooling.
    pub switch_threshold: f64,
    /// Exponential moving-average decay for the L_loc average.
    pub ema_decay: f64,
    pub epochs: usize,
    /// Per-epoch multiplier on the ADADELTA update.
    pub lr_schedule: Vec<f64>,
    /// Optimizer steps per epoch (the desk-scale step budget).
    pub steps_per_epoch: usize,
    pub noise_augment: bool,
    pub noise_sigma: f64,
    pub loss_weights: LossWeights,
    pub checkpoint_every: usize,
    /// Fixed fan-out of the batch gradient reduction; results are bitwise
    /// identical for any worker count because chunk boundaries and merge
    /// order do not depend on threading.
    pub grad_chunks: usize,
    pub seed: u64,
    /// Store checkpoint tensors as f32 (halves size, loses resume
    /// bit-exactness).
    pub checkpoint_f32: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            switch_threshold: 0.35,
            ema_decay: 0.99,
            epochs: 4,
            lr_schedule: vec![1.0, 0.1, 0.01, 0.01],
            steps_per_epoch: 150,
            noise_augment: true,
            noise_sigma: 0.02,
            loss_weights: LossWeights::default(),
            checkpoint_every: 200,
            grad_chunks: 8,
            seed: 42,
            checkpoint_f32: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, steps_per_epoch, epochs must be positive".into()));
        }
        if !(self.switch_threshold > 0.0) {
            return Err(Error::Config("switch_threshold must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0,1)".into()));
        }
        if self.lr_schedule.len() != self.epochs {
            return Err(Error::Config(format!(
                "lr_schedule has {} entries for {} epochs",
                self.lr_schedule.len(),
                self.epochs
            )));
        }
        if self.grad_chunks == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("grad_chunks and checkpoint_every must be positive".into()));
        }
        self.loss_weights.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn lr_for_step(&self, step: u64) -> f64 {
        let epoch = ((step.saturating_sub(1)) as usize / self.steps_per_epoch).min(self.epochs - 1);
        self.lr_schedule[epoch]
    }
}

/// Persistent loop counters (stored in checkpoints).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrainCounters {
    /// Completed optimizer steps.
    pub step: u64,
    /// 1 = ground-truth pooling, 2 = predicted pooling.
    pub stage: u8,
    /// L_loc moving average; None until the first annotated batch.
    pub ema: Option<f64>,
    pub clamp_events: u64,
}

impl Default for TrainCounters {
    fn default() -> Self {
        TrainCounters { step: 0, stage: 1, ema: None, clamp_events: 0 }
    }
}

/// Aggregate statistics of one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub loc_sum: f64,
    pub loc_count: usize,
    pub rec_sum: f64,
    pub count: usize,
    pub fallbacks: usize,
    pub clamp_events: u64,
}

impl BatchStats {
    fn merge(&mut self, o: &BatchStats) {
        self.loc_sum += o.loc_sum;
        self.loc_count += o.loc_count;
        self.rec_sum += o.rec_sum;
        self.count += o.count;
        self.fallbacks += o.fallbacks;
        self.clamp_events += o.clamp_events;
    }

    pub fn loc_mean(&self) -> Option<f64> {
        (self.loc_count > 0).then(|| self.loc_sum / self.loc_count as f64)
    }

    pub fn rec_mean(&self) -> f64 {
        self.rec_sum / self.count.max(1) as f64
    }

    pub fn fallback_rate(&self) -> f64 {
        self.fallbacks as f64 / self.count.max(1) as f64
    }
}

pub struct BatchItem<'a> {
    pub sample: &'a LoadedSample,
    pub noise_seed: Option<u64>,
    pub noise_sigma: f64,
    /// batch_size / annotated_count, weighting the per-sample loc term.
    pub loc_weight: f64,
}

/// Gradients and loss terms for one sample on its own tape.
fn sample_gradients(
    model: &CapnetModel,
    item: &BatchItem<'_>,
    stage2: bool,
    weights: &LossWeights,
    step: u64,
    store: &mut GradStore,
) -> Result<BatchStats> {
    let (ih, iw) = model.config.backbone.input_size;
    let mut image = image_tensor(&item.sample.pixels, ih, iw)?;
    if let Some(nseed) = item.noise_seed {
        let mut rng = rng_for(nseed, STREAM_NOISE, 0);
        let normal = Normal::new(0.0, item.noise_sigma)
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
        for v in image.data_mut().iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let centers = item.sample.char_centers();
    let pooling = if stage2 {
        SamplePooling::Predicted
    } else {
        SamplePooling::GroundTruthCenters {
            centers: centers.as_deref().ok_or_else(|| {
                Error::Data(format!("sample {} lacks character annotations", item.sample.id))
            })?,
        }
    };
    let fwd = model.forward_sample(&mut tape, &mut binder, &image, pooling)?;
    let tf = model.seq2seq.decode_teacher_forced(&mut tape, &mut binder, &fwd.enc, &item.sample.target)?;

    let loc = match &item.sample.boxes {
        Some(boxes) => {
            let gt = model.gt_heatmap(boxes)?;
            Some(loc_loss(&mut tape, fwd.heat.logits, &gt)?)
        }
        None => None,
    };
    let rec = rec_loss(&mut tape, tf.true_probs)?;
    let loss = total_loss(&mut tape, loc.map(|l| (l, item.loc_weight)), rec.loss, weights)?;
    tape.check_finite(loss, &format!("loss of sample {}", item.sample.id), step)?;
    tape.backward(loss)?;
    store.absorb(&tape, &binder);

    Ok(BatchStats {
        loc_sum: loc.map(|l| tape.value(l)[0]).unwrap_or(0.0),
        loc_count: loc.is_some() as usize,
        rec_sum: tape.value(rec.loss)[0],
        count: 1,
        fallbacks: (fwd.seq.source == FeatureSource::Fallback) as usize,
        clamp_events: rec.clamp_events,
    })
}

/// Computes summed gradients and stats for a batch. The reduction uses a
/// fixed chunk fan-out, so parallel and sequential execution produce
/// bitwise-identical results.
pub fn batch_gradients(
    model: &CapnetModel,
    items: &[BatchItem<'_>],
    stage2: bool,
    weights: &LossWeights,
    chunks: usize,
    step: u64,
    parallel: bool,
) -> Result<(GradStore, BatchStats)> {
    let chunk_size = items.len().div_ceil(chunks.max(1));
    let slices: Vec<&[BatchItem<'_>]> = items.chunks(chunk_size.max(1)).collect();
    let worker = |_: usize, chunk: &&[BatchItem<'_>]| -> Result<(GradStore, BatchStats)> {
        let mut store = GradStore::new();
        let mut stats = BatchStats::default();
        for item in chunk.iter() {
            let s = sample_gradients(model, item, stage2, weights, step, &mut store)?;
            stats.merge(&s);
        }
        Ok((store, stats))
    };
    let results = if parallel {
        par::map_indexed(&slices, worker)
    } else {
        par::map_indexed_seq(&slices, worker)
    };
    let mut total = GradStore::new();
    let mut stats = BatchStats::default();
    for r in results {
        let (store, s) = r?;
        total.merge(&store);
        stats.merge(&s);
    }
    Ok((total, stats))
}

pub struct TrainOutcome {
    pub steps: u64,
    pub switch_step: Option<u64>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub counters: TrainCounters,
}

/// Runs (or resumes) the two-stage training loop, writing metrics.csv and
/// periodic checkpoints under `out_dir`.
pub fn train(
    model: &mut CapnetModel,
    opt: &mut Adadelta,
    train_set: &[LoadedSample],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<TrainCounters>,
    deterministic: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let annotated: Vec<usize> =
        (0..train_set.len()).filter(|&i| train_set[i].boxes.is_some()).collect();
    if annotated.is_empty() {
        return Err(Error::Config(
            "training corpus has no character-annotated samples; stage 1 cannot start".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut counters = resume.unwrap_or_default();
    let mut metrics = if counters.step > 0 && metrics_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    } else {
        let mut f = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        f.write_all(b"step,stage,l_loc,l_rec,lr,fallback_rate\n")
            .map_err(|e| Error::io(&metrics_path, e))?;
        f
    };

    let mut switch_step = None;
    let all: Vec<usize> = (0..train_set.len()).collect();
    let total = cfg.total_steps();
    while counters.step < total {
        let step = counters.step + 1;

        // Stage latch: fires once, never reverts. An infinite threshold
        // trips immediately (the EMA starts below +inf).
        if counters.stage == 1 && counters.ema.unwrap_or(f64::MAX) < cfg.switch_threshold {
            counters.stage = 2;
            switch_step = Some(step);
        }
        let stage2 = counters.stage == 2;

        let pool_ids: &[usize] = if stage2 { &all } else { &annotated };
        let mut brng = rng_for(cfg.seed, STREAM_BATCH, step);
        let ids: Vec<usize> = (0..cfg.batch_size)
            .map(|_| pool_ids[brng.random_range(0..pool_ids.len())])
            .collect();
        let b_ann = ids.iter().filter(|&&i| train_set[i].boxes.is_some()).count();
        let loc_weight =
            if b_ann > 0 { cfg.batch_size as f64 / b_ann as f64 } else { 0.0 };
        let items: Vec<BatchItem<'_>> = ids
            .iter()
            .enumerate()
            .map(|(slot, &i)| BatchItem {
                sample: &train_set[i],
                noise_seed: (cfg.noise_augment && cfg.noise_sigma > 0.0)
                    .then(|| derive_seed(cfg.seed, STREAM_NOISE, step * 65536 + slot as u64)),
                loc_weight,
                noise_sigma: cfg.noise_sigma,
            })
            .collect();

        let (mut grads, stats) = batch_gradients(
            model,
            &items,
            stage2,
            &cfg.loss_weights,
            cfg.grad_chunks,
            step,
            !deterministic,
        )?;
        grads.scale(1.0 / cfg.batch_size as f64);
        grads.check_finite(step)?;

        opt.lr_multiplier = cfg.lr_for_step(step);
        opt.step_model(model, &grads);

        if let Some(l) = stats.loc_mean() {
            counters.ema = Some(match counters.ema {
                None => l,
                Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * l,
            });
        }
        counters.clamp_events += stats.clamp_events;
        counters.step = step;

        let loc_field = stats.loc_mean().map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            metrics,
            "{step},{},{loc_field},{:.6},{},{:.4}",
            counters.stage,
            stats.rec_mean(),
            opt.lr_multiplier,
            stats.fallback_rate()
        )
        .map_err(|e| Error::io(&metrics_path, e))?;

        if step % cfg.checkpoint_every as u64 == 0 && step < total {
            let path = out_dir.join(format!("ckpt-{step:06}.capn"));
            save_train_checkpoint(&path, model, opt, cfg, &counters)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out_dir.join("ckpt-final.capn");
    save_train_checkpoint(&final_checkpoint, model, opt, cfg, &counters)?;
    Ok(TrainOutcome {
        steps: counters.step,
        switch_step,
        final_checkpoint,
        metrics_path,
        counters,
    })
}

// ── checkpoint integration ──────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    counters: TrainCounters,
    optimizer: OptimizerMeta,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    rho: f64,
    epsilon: f64,
    lr_multiplier: f64,
}

pub fn save_train_checkpoint(
    path: &Path,
    model: &CapnetModel,
    opt: &Adadelta,
    cfg: &TrainConfig,
    counters: &TrainCounters,
) -> Result<()> {
    let meta = CheckpointMeta {
        model_config: model.config.clone(),
        train_config: cfg.clone(),
        counters: *counters,
        optimizer: OptimizerMeta {
            rho: opt.rho,
            epsilon: opt.epsilon,
            lr_multiplier: opt.lr_multiplier,
        },
    };
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut order = Vec::new();
    model.visit(&mut |name: &str, t: &Tensor| {
        order.push(name.to_string());
        tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    tensors.extend(opt.export_state(&order));
    let data = CheckpointData {
        meta: serde_json::to_value(&meta).expect("checkpoint metadata serializes"),
        tensors,
    };
    checkpoint::save(path, &data, cfg.checkpoint_f32)
}

pub struct LoadedTrainState {
    pub model: CapnetModel,
    pub optimizer: Adadelta,
    pub train_config: TrainConfig,
    pub counters: TrainCounters,
}

pub fn load_train_checkpoint(path: &Path) -> Result<LoadedTrainState> {
    let data = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(data.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata does not parse: {e}")))?;
    let mut model = CapnetModel::init(meta.model_config, 0)?;
    let mut by_name: HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
        data.tensors.iter().map(|t| (t.0.as_str(), t)).collect();
    let mut missing = Vec::new();
    model.visit_mut(&mut |name: &str, t: &mut Tensor| {
        match by_name.remove(name) {
            Some((_, shape, values)) if shape == t.shape() => t.set_data(values.clone()),
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing or mismatched tensors: {missing:?}")));
    }
    let mut optimizer = Adadelta::new();
    optimizer.rho = meta.optimizer.rho;
    optimizer.epsilon = meta.optimizer.epsilon;
    optimizer.lr_multiplier = meta.optimizer.lr_multiplier;
    let mut pending: HashMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = HashMap::new();
    for (name, _, values) in data.tensors.iter() {
        if let Some(rest) = name.strip_prefix("opt.") {
            if let Some(pname) = rest.strip_suffix(".eg2") {
                pending.entry(pname.to_string()).or_default().0 = Some(values.clone());
            } else if let Some(pname) = rest.strip_suffix(".ex2") {
                pending.entry(pname.to_string()).or_default().1 = Some(values.clone());
            }
        }
    }
    for (name, (eg2, ex2)) in pending {
        if let (Some(eg2), Some(ex2)) = (eg2, ex2) {
            optimizer.import_state(&name, eg2, ex2);
        }
    }
    Ok(LoadedTrainState { model, optimizer, train_config: meta.train_config, counters: meta.counters })
}
