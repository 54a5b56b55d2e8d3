//! Desk-scale continual learner.
//!
//! Synthetic class-incremental task streams (one isotropic Gaussian per
//! class), a one-hidden-layer perceptron trained by SGD on mini-batches that
//! mix new stream samples with samples drawn from the episodic memory, an
//! optional distillation term against a frozen snapshot, and the usual
//! accuracy/forgetting metrics.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{gate_select, swap_count, GateError, GatePolicy, PolicyKind, ScoreInputs};
use crate::memory::{EpisodicMemory, MemoryError};
use crate::sample::Sample;
use crate::scalar::Scalar;
use crate::swap::{SwapError, SwapItem, SwapRequest, SwapWorker};

/// High bit marks held-out evaluation samples so their ids never collide with training ids.
pub const EVAL_ID_BASE: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("distillation weight is positive but no old-model snapshot exists")]
    MissingSnapshot,
    #[error("task {task} out of range for a stream of {num_tasks} tasks")]
    TaskOutOfRange { task: usize, num_tasks: usize },
    #[error("accuracy matrix missing entry for task {task} after task {after}")]
    IncompleteMatrix { task: usize, after: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Swap(#[from] SwapError),
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Class-incremental stream of Gaussian clusters. Task `i` owns classes
/// `i * classes_per_task .. (i + 1) * classes_per_task`.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub stddev: f64,
    pub seed: u64,
    means: Vec<Vec<f32>>,
}

impl TaskStream {
    /// Class means are drawn from `N(0, mean_scale^2 I)`.
    pub fn new(
        num_tasks: usize,
        classes_per_task: usize,
        samples_per_class: usize,
        dim: usize,
        stddev: f64,
        mean_scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, 0));
        let means = (0..num_tasks * classes_per_task)
            .map(|_| {
                (0..dim)
                    .map(|_| (mean_scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            })
            .collect();
        Self::with_means(num_tasks, classes_per_task, samples_per_class, stddev, seed, means)
    }

    /// Stream with explicit class means (one per class, all of the same length).
    pub fn with_means(
        num_tasks: usize,
        classes_per_task: usize,
        samples_per_class: usize,
        stddev: f64,
        seed: u64,
        means: Vec<Vec<f32>>,
    ) -> Self {
        assert_eq!(means.len(), num_tasks * classes_per_task);
        let dim = means.first().map_or(0, Vec::len);
        TaskStream {
            num_tasks,
            classes_per_task,
            samples_per_class,
            dim,
            stddev,
            seed,
            means,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn class_mean(&self, label: u32) -> &[f32] {
        &self.means[label as usize]
    }

    pub fn task_classes(&self, task: usize) -> std::ops::Range<u32> {
        let start = (task * self.classes_per_task) as u32;
        start..start + self.classes_per_task as u32
    }

    pub fn task_size(&self) -> usize {
        self.classes_per_task * self.samples_per_class
    }

    /// Training samples of task `task` in arrival order.
    pub fn generate_task(&self, task: usize) -> Result<Vec<Sample>, LearnerError> {
        self.check_task(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 1, task as u64));
        let mut out = self.draw_samples(task, self.samples_per_class, 0, &mut rng);
        out.shuffle(&mut rng);
        Ok(out)
    }

    /// Held-out samples of task `task`, drawn independently of the training stream.
    pub fn generate_eval(&self, task: usize, per_class: usize) -> Result<Vec<Sample>, LearnerError> {
        self.check_task(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 2, task as u64));
        Ok(self.draw_samples(task, per_class, EVAL_ID_BASE, &mut rng))
    }

    fn check_task(&self, task: usize) -> Result<(), LearnerError> {
        if task >= self.num_tasks {
            return Err(LearnerError::TaskOutOfRange {
                task,
                num_tasks: self.num_tasks,
            });
        }
        Ok(())
    }

    fn draw_samples(&self, task: usize, per_class: usize, id_base: u64, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * self.classes_per_task);
        for label in self.task_classes(task) {
            let mean = &self.means[label as usize];
            for j in 0..per_class {
                let features = mean
                    .iter()
                    .map(|&m| m + (self.stddev * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                let id = id_base + label as u64 * per_class as u64 + j as u64;
                out.push(Sample::new(id, label, task as u32, features));
            }
        }
        out
    }
}

/// Anything that maps a feature vector to one of the first `active` classes.
pub trait Classifier {
    fn predict(&self, features: &[f32], active: usize) -> u32;
}

/// One-hidden-layer tanh perceptron producing class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `hidden x input`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `classes x hidden`, row-major.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        Mlp {
            input,
            hidden,
            classes,
            w1: vec![T::zero(); hidden * input],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); classes * hidden],
            b2: vec![T::zero(); classes],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(input, hidden, classes);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + classes) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = T::of(rng.random_range(-a1..a1)));
        m.w2.iter_mut().for_each(|w| *w = T::of(rng.random_range(-a2..a2)));
        m
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[T]) {
        assert_eq!(params.len(), self.num_params());
        let mut rest = params;
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(v.len());
            v.copy_from_slice(head);
            rest = tail;
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Hidden activations and logits over all classes.
    pub fn forward(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        debug_assert_eq!(x.len(), self.input);
        let act: Vec<T> = (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.input..(h + 1) * self.input];
                let pre = row.iter().zip(x).fold(self.b1[h], |acc, (&w, &xi)| acc + w * xi);
                pre.tanh()
            })
            .collect();
        let logits = (0..self.classes)
            .map(|c| {
                let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
                row.iter().zip(&act).fold(self.b2[c], |acc, (&w, &a)| acc + w * a)
            })
            .collect();
        (act, logits)
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        self.forward(x).1
    }
}

impl<T: Scalar> Classifier for Mlp<T> {
    fn predict(&self, features: &[f32], active: usize) -> u32 {
        let x: Vec<T> = features.iter().map(|&f| T::from_feature(f)).collect();
        let logits = self.logits(&x);
        crate::gate::argmax(&logits[..active.min(self.classes)]) as u32
    }
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exp: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exp.iter().copied().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// Value and parameter gradient of the mixed loss on one batch.
#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: T,
    pub soft: T,
    pub hard: T,
    pub grad: Mlp<T>,
    /// Softmax over the active classes, per batch sample.
    pub probs: Vec<Vec<T>>,
}

/// `alpha * soft + (1 - alpha) * hard`, averaged over the batch.
///
/// `hard` is cross-entropy against the true label over the first `active`
/// classes. `soft` is cross-entropy of the current model's softmax over the
/// first `old` classes against the snapshot's softmax over the same classes;
/// it is zero when there are no old classes.
pub fn mixed_loss<T: Scalar>(
    model: &Mlp<T>,
    snapshot: Option<&Mlp<T>>,
    batch: &[&Sample],
    active: usize,
    old: usize,
    alpha: T,
) -> Result<LossEval<T>, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let distill = alpha > T::zero() && old > 0;
    let snapshot = match (distill, snapshot) {
        (true, None) => return Err(LearnerError::MissingSnapshot),
        (true, Some(s)) => Some(s),
        (false, _) => None,
    };
    let alpha = if distill { alpha } else { T::zero() };
    let active = active.min(model.classes);
    let old = old.min(active);
    let n = T::of(batch.len() as f64);
    let mut grad = Mlp::zeros(model.input, model.hidden, model.classes);
    let (mut soft_sum, mut hard_sum) = (T::zero(), T::zero());
    let mut probs = Vec::with_capacity(batch.len());

    for s in batch {
        let x: Vec<T> = s.features.iter().map(|&f| T::from_feature(f)).collect();
        let (act, logits) = model.forward(&x);
        let z = &logits[..active];
        let p = softmax(z);
        let lp = log_softmax(z);
        let y = s.label as usize;
        hard_sum += -lp[y];

        let mut dz = vec![T::zero(); model.classes];
        let hard_w = T::one() - alpha;
        for c in 0..active {
            let target = if c == y { T::one() } else { T::zero() };
            dz[c] = hard_w * (p[c] - target);
        }
        if let Some(snap) = snapshot {
            let q = softmax(&snap.logits(&x)[..old]);
            let lp_old = log_softmax(&z[..old]);
            let p_old = softmax(&z[..old]);
            soft_sum += -q.iter().zip(&lp_old).map(|(&qc, &l)| qc * l).sum::<T>();
            for c in 0..old {
                dz[c] += alpha * (p_old[c] - q[c]);
            }
        }
        probs.push(p);

        for (c, &d) in dz[..active].iter().enumerate() {
            let g = d / n;
            if g == T::zero() {
                continue;
            }
            grad.b2[c] += g;
            let row = &mut grad.w2[c * model.hidden..(c + 1) * model.hidden];
            row.iter_mut().zip(&act).for_each(|(w, &a)| *w += g * a);
        }
        for (h, &a) in act.iter().enumerate() {
            let back: T = (0..active).map(|c| model.w2[c * model.hidden + h] * dz[c]).sum();
            let dpre = back * (T::one() - a * a) / n;
            grad.b1[h] += dpre;
            let row = &mut grad.w1[h * model.input..(h + 1) * model.input];
            row.iter_mut().zip(&x).for_each(|(w, &xi)| *w += dpre * xi);
        }
    }
    let soft = soft_sum / n;
    let hard = hard_sum / n;
    let loss = alpha * soft + (T::one() - alpha) * hard;
    Ok(LossEval {
        loss,
        soft,
        hard,
        grad,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub passes: usize,
    pub old_fraction: f64,
    /// Weight of the distillation term.
    pub alpha: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            hidden: 64,
            learning_rate: 0.05,
            weight_decay: 1e-6,
            batch_size: 32,
            passes: 4,
            old_fraction: 0.5,
            alpha: 0.0,
        }
    }
}

/// Model, optimizer state and the frozen snapshot used for distillation.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Mlp<T>,
    pub snapshot: Option<Mlp<T>>,
    pub config: TrainerConfig,
    active_classes: usize,
    old_classes: usize,
    steps: u64,
}

/// Forward outputs kept from one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub probs: Vec<Vec<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, total_classes: usize, config: TrainerConfig, rng: &mut R) -> Self {
        Trainer {
            model: Mlp::new(input, config.hidden, total_classes, rng),
            snapshot: None,
            config,
            active_classes: 0,
            old_classes: 0,
            steps: 0,
        }
    }

    pub fn active_classes(&self) -> usize {
        self.active_classes
    }

    pub fn old_classes(&self) -> usize {
        self.old_classes
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn alpha(&self) -> T {
        T::of(self.config.alpha)
    }

    /// Enters a new task that brings the active class count to `active`.
    /// The model trained so far becomes the distillation snapshot.
    pub fn begin_task(&mut self, active: usize) {
        if self.active_classes > 0 {
            self.snapshot = Some(self.model.clone());
        }
        self.old_classes = self.active_classes;
        self.active_classes = active.min(self.model.classes);
    }

    /// Mixed loss of `batch` under the current model.
    pub fn loss_mixed(&self, batch: &[&Sample]) -> Result<T, LearnerError> {
        if self.alpha() > T::zero() && self.snapshot.is_none() {
            return Err(LearnerError::MissingSnapshot);
        }
        mixed_loss(
            &self.model,
            self.snapshot.as_ref(),
            batch,
            self.active_classes,
            self.old_classes,
            self.alpha(),
        )
        .map(|e| e.loss)
    }

    /// One SGD step with weight decay. Before the first snapshot exists the
    /// distillation term has nothing to distill and only the hard loss is used.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepOutput<T>, LearnerError> {
        let alpha = if self.snapshot.is_some() { self.alpha() } else { T::zero() };
        let eval = mixed_loss(
            &self.model,
            self.snapshot.as_ref(),
            batch,
            self.active_classes,
            self.old_classes,
            alpha,
        )?;
        let lr = T::of(self.config.learning_rate);
        let wd = T::of(self.config.weight_decay);
        for (p, g) in self.model.params_mut().zip(eval.grad.params()) {
            *p -= lr * (g + wd * *p);
        }
        debug_assert!(self.model.all_finite());
        self.steps += 1;
        Ok(StepOutput {
            loss: eval.loss,
            probs: eval.probs,
        })
    }
}

/// Mini-batch layout of one training bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleSpec {
    pub passes: usize,
    pub batch_size: usize,
    pub old_fraction: f64,
    /// Simulated backbone cost added to every mini-batch.
    pub compute_delay: Duration,
}

impl BundleSpec {
    pub fn from_config(config: &TrainerConfig, compute_delay: Duration) -> Self {
        BundleSpec {
            passes: config.passes,
            batch_size: config.batch_size,
            old_fraction: config.old_fraction,
            compute_delay,
        }
    }

    pub fn old_per_batch(&self) -> usize {
        swap_count(self.old_fraction, self.batch_size)
    }

    pub fn new_per_batch(&self) -> usize {
        (self.batch_size - self.old_per_batch()).max(1)
    }
}

/// Gate and worker used for swapping during a bundle.
pub struct Swapping<'a, R: Rng> {
    pub policy: GatePolicy,
    pub worker: &'a mut SwapWorker,
    pub rng: &'a mut R,
    pub drain_timeout: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BundleReport {
    pub batches: u64,
    pub optimizer_steps: u64,
    pub requests_submitted: u64,
    pub items_submitted: u64,
    /// `(slot_index, sample_id)` of every EM draw, in draw order.
    pub old_provenance: Vec<(usize, u64)>,
    pub mean_loss: f64,
    pub wall_time: Duration,
}

/// Trains one bundle: `passes` sweeps over the new samples, each mini-batch
/// topped up with draws from `memory`. With `swapping`, the drawn EM samples
/// are scored, gated and submitted to the swap worker after every step, and
/// the worker is drained before returning.
pub fn train_bundle<T: Scalar, R: Rng, G: Rng>(
    trainer: &mut Trainer<T>,
    new_samples: &[Sample],
    spec: &BundleSpec,
    memory: &EpisodicMemory,
    rng: &mut R,
    mut swapping: Option<Swapping<'_, G>>,
    batch_counter: &mut u64,
) -> Result<BundleReport, LearnerError> {
    let start = Instant::now();
    let mut report = BundleReport::default();
    let k_new = spec.new_per_batch();
    let mut order: Vec<usize> = (0..new_samples.len()).collect();
    let mut loss_sum = 0.0;

    for pass in 0..spec.passes {
        order.shuffle(rng);
        for chunk in order.chunks(k_new) {
            let k_old = spec.old_per_batch().min(memory.occupied());
            let old = memory.draw(k_old, rng)?;
            let batch: Vec<&Sample> = chunk
                .iter()
                .map(|&i| &new_samples[i])
                .chain(old.iter().map(|(_, s)| s))
                .collect();
            let out = trainer.step(&batch)?;
            if !spec.compute_delay.is_zero() {
                std::thread::sleep(spec.compute_delay);
            }
            loss_sum += out.loss.as_f64();
            report.optimizer_steps += 1;
            report.old_provenance.extend(old.iter().map(|(slot, s)| (*slot, s.id)));

            if let Some(sw) = swapping.as_mut() {
                if !old.is_empty() {
                    let inputs: Vec<ScoreInputs<T>> = old
                        .iter()
                        .zip(&out.probs[chunk.len()..])
                        .map(|((slot, s), p)| ScoreInputs::from_probs(s.id, *slot, s.label, p.clone()))
                        .collect();
                    let mut policy = sw.policy.at_pass(pass, spec.passes);
                    // entropy needs at least two classes to normalize against
                    if trainer.active_classes() < 2 {
                        policy.kind = PolicyKind::Random;
                    }
                    let decision = gate_select(&inputs, &policy, sw.rng)?;
                    if !decision.swap_out.is_empty() {
                        let items: Vec<SwapItem> = decision
                            .swap_out
                            .iter()
                            .map(|&(slot, id)| SwapItem {
                                slot_index: slot,
                                out_sample: old
                                    .iter()
                                    .find(|(_, s)| s.id == id)
                                    .map(|(_, s)| s.clone())
                                    .expect("gate returns drawn samples"),
                            })
                            .collect();
                        report.requests_submitted += 1;
                        report.items_submitted += items.len() as u64;
                        sw.worker.submit(SwapRequest::new(*batch_counter, items))?;
                    }
                }
            }
            report.batches += 1;
            *batch_counter += 1;
        }
    }
    if let Some(sw) = swapping.as_ref() {
        sw.worker.drain(sw.drain_timeout)?;
    }
    report.mean_loss = if report.batches > 0 {
        loss_sum / report.batches as f64
    } else {
        0.0
    };
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Accuracy (percent) on held-out samples of each of the first `tasks_trained`
/// tasks, predicting over every class seen so far.
pub fn evaluate<C: Classifier + ?Sized>(
    classifier: &C,
    stream: &TaskStream,
    tasks_trained: usize,
    per_class: usize,
) -> Result<Vec<f64>, LearnerError> {
    let active = tasks_trained * stream.classes_per_task;
    (0..tasks_trained)
        .map(|task| {
            let eval = stream.generate_eval(task, per_class)?;
            let correct = eval
                .iter()
                .filter(|s| classifier.predict(&s.features, active) == s.label)
                .count();
            Ok(100.0 * correct as f64 / eval.len().max(1) as f64)
        })
        .collect()
}

/// Per-task accuracy after each task: `acc[j][t]` is the accuracy on task
/// `j` after training task `t`, defined for `j <= t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc: Vec<Vec<Option<f64>>>,
    pub bundle_wall_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub final_accuracy: f64,
    pub final_forgetting: f64,
    pub incremental_accuracy: Vec<f64>,
}

impl MetricsRecord {
    pub fn new(num_tasks: usize) -> Self {
        MetricsRecord {
            acc: vec![vec![None; num_tasks]; num_tasks],
            bundle_wall_ms: Vec::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.acc.len()
    }

    /// Records the evaluation row taken after training task `after`.
    pub fn record_row(&mut self, after: usize, row: &[f64]) {
        for (j, &a) in row.iter().enumerate() {
            self.acc[j][after] = Some(a);
        }
    }

    pub fn compute(&self) -> Result<MetricsSummary, LearnerError> {
        compute_metrics(self)
    }
}

/// Final accuracy, final forgetting and incremental accuracy from a full matrix.
///
/// Forgetting of task `j` is its best accuracy minus its final accuracy; the
/// final forgetting averages over every task, the last one included.
pub fn compute_metrics(m: &MetricsRecord) -> Result<MetricsSummary, LearnerError> {
    let t_total = m.num_tasks();
    let cell = |j: usize, t: usize| -> Result<f64, LearnerError> {
        m.acc
            .get(j)
            .and_then(|row| row.get(t).copied().flatten())
            .ok_or(LearnerError::IncompleteMatrix { task: j, after: t })
    };
    if t_total == 0 {
        return Err(LearnerError::IncompleteMatrix { task: 0, after: 0 });
    }
    let last = t_total - 1;
    let mut incremental = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let row: Vec<f64> = (0..=t).map(|j| cell(j, t)).collect::<Result<_, _>>()?;
        incremental.push(row.iter().sum::<f64>() / row.len() as f64);
    }
    let mut final_sum = 0.0;
    let mut forgetting_sum = 0.0;
    for j in 0..t_total {
        let fin = cell(j, last)?;
        let best = (j..t_total).map(|t| cell(j, t)).try_fold(f64::MIN, |b, a| a.map(|a| b.max(a)))?;
        final_sum += fin;
        forgetting_sum += best - fin;
    }
    Ok(MetricsSummary {
        final_accuracy: final_sum / t_total as f64,
        final_forgetting: forgetting_sum / t_total as f64,
        incremental_accuracy: incremental,
    })
}
