//! Checks shared by the integration tests and the acceptance runner.
//! Each check returns a one-line detail on success and a reason on failure.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use tiered_replay::gate::{gate_select, score_entropy, GatePolicy, PolicyKind, ScoreInputs};
use tiered_replay::harness::{run_experiment, run_seeds, run_speed_test, ExperimentConfig, RunMode};
use tiered_replay::learner::{mixed_loss, Mlp};
use tiered_replay::memory::{EpisodicMemory, UpdatePolicy};
use tiered_replay::storage::{Archive, ArchiveConfig, EntryState, StorageError};
use tiered_replay::Sample;

pub type Check = Result<String, String>;

pub const CHI_SQUARE_ALPHA: f64 = 0.01;
pub const SCORE_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub fn sample(id: u64, label: u32) -> Sample {
    Sample::new(id, label, 0, vec![id as f32, label as f32])
}

pub fn ensure(cond: bool, reason: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(reason())
    }
}

/// Upper-tail p-value of a chi-square statistic.
pub fn chi_square_p(stat: f64, df: usize) -> f64 {
    1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat)
}

/// Pearson goodness of fit of category counts against equal expected counts.
pub fn uniform_fit_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    chi_square_p(stat, counts.len() - 1)
}

/// Binary entropy score written out directly: correct predictions score
/// `H/U`, incorrect ones `(U-H)/U`.
pub fn oracle_score(probs: &[f64], predicted: usize, truth: usize) -> f64 {
    let u = (probs.len() as f64).ln();
    let h: f64 = probs
        .iter()
        .map(|&p| {
            let p = p.max(1e-12);
            -p * p.ln()
        })
        .sum();
    if predicted == truth { h / u } else { (u - h) / u }
}

/// Round half to even, spelled out.
pub fn oracle_round(x: f64) -> usize {
    let f = x.floor();
    let frac = x - f;
    let down = frac < 0.5 || (frac == 0.5 && (f as u64).is_multiple_of(2));
    if down { f as usize } else { f as usize + 1 }
}

pub fn gate_math() -> Check {
    // argmax of a uniform vector is class 0
    let mut uniform = vec![0.1f64; 10];
    let s = score_entropy(&ScoreInputs::from_probs(0, 0, 0, uniform.clone()), 10).map_err(|e| e.to_string())?;
    ensure((s - 1.0).abs() <= SCORE_TOLERANCE, || format!("uniform correct: {s}"))?;
    uniform.fill(0.0);
    uniform[3] = 1.0;
    let s = score_entropy(&ScoreInputs::from_probs(0, 0, 3, uniform.clone()), 10).map_err(|e| e.to_string())?;
    ensure(s.abs() <= SCORE_TOLERANCE, || format!("one-hot correct: {s}"))?;
    let s = score_entropy(&ScoreInputs::from_probs(0, 0, 4, uniform), 10).map_err(|e| e.to_string())?;
    ensure((s - 1.0).abs() <= SCORE_TOLERANCE, || format!("one-hot wrong: {s}"))?;
    let expected = oracle_score(&[0.9, 0.1], 0, 0);
    let s = score_entropy(&ScoreInputs::from_probs(0, 0, 0, vec![0.9f64, 0.1]), 2).map_err(|e| e.to_string())?;
    ensure((s - expected).abs() <= SCORE_TOLERANCE && (s - 0.46900).abs() <= SCORE_TOLERANCE, || {
        format!("binary: {s}, oracle {expected}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for ratio in [0.0, 0.2, 0.5, 0.8, 1.0] {
        for trial in 0..1000 {
            let n = rng.random_range(1..=64usize);
            let classes = rng.random_range(2..=10usize);
            let batch: Vec<ScoreInputs<f64>> = (0..n)
                .map(|i| {
                    let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let z: f64 = raw.iter().sum();
                    let truth = rng.random_range(0..classes) as u32;
                    ScoreInputs::from_probs(i as u64, i, truth, raw.into_iter().map(|p| p / z).collect())
                })
                .collect();
            let kind = [PolicyKind::Random, PolicyKind::Entropy, PolicyKind::Dynamic][trial % 3];
            let policy = GatePolicy::new(kind, ratio).at_pass(trial % 4, 4);
            let d = gate_select(&batch, &policy, &mut rng).map_err(|e| e.to_string())?;
            let want = oracle_round(ratio * n as f64);
            ensure(d.swap_out.len() == want, || {
                format!("r={ratio} n={n} {kind:?}: {} selected, expected {want}", d.swap_out.len())
            })?;
            checked += 1;
        }
    }
    Ok(format!("4 score examples within {SCORE_TOLERANCE:e}; cardinality on {checked} batches"))
}

/// Reservoir inclusion counts for `trials` independent streams of `n` ids into `m` slots.
pub fn reservoir_inclusion(m: usize, n: usize, trials: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0u64; n];
    for _ in 0..trials {
        let em = EpisodicMemory::new(m, UpdatePolicy::Reservoir);
        em.update((0..n as u64).map(|i| sample(i, 0)).collect(), &mut rng);
        for s in em.snapshot().into_iter().flatten() {
            hits[s.id as usize] += 1;
        }
    }
    hits
}

/// Chi-square statistic for per-id inclusion counts with inclusion
/// probability `p`; each count is binomial, so the variance is `E(1-p)`.
pub fn inclusion_fit_p(hits: &[u64], trials: usize, p: f64) -> f64 {
    let e = trials as f64 * p;
    let stat: f64 = hits.iter().map(|&o| (o as f64 - e).powi(2) / (e * (1.0 - p))).sum();
    chi_square_p(stat, hits.len() - 1)
}

pub fn subset_index(ids: &[u64], n: usize) -> usize {
    debug_assert!(ids.iter().all(|&i| (i as usize) < n));
    ids.iter().fold(0usize, |acc, &i| acc | (1 << i))
}

/// Counts how often each `k`-subset of an `n`-batch is chosen by the Random gate.
pub fn random_gate_subsets(n: usize, ratio: f64, trials: usize, seed: u64) -> BTreeMap<usize, u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<ScoreInputs<f64>> = (0..n)
        .map(|i| ScoreInputs::from_probs(i as u64, i, 0, vec![0.6, 0.4]))
        .collect();
    let mut counts = BTreeMap::new();
    let policy = GatePolicy::new(PolicyKind::Random, ratio);
    for _ in 0..trials {
        let d = gate_select(&batch, &policy, &mut rng).unwrap();
        let ids: Vec<u64> = d.swap_out.iter().map(|&(_, id)| id).collect();
        *counts.entry(subset_index(&ids, n)).or_insert(0) += 1;
    }
    counts
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

pub fn sampling() -> Check {
    let trials = 10_000;
    let (m, n) = (10, 50);
    let hits = reservoir_inclusion(m, n, trials, 5);
    let p_res = inclusion_fit_p(&hits, trials, m as f64 / n as f64);
    ensure(p_res > CHI_SQUARE_ALPHA, || format!("reservoir inclusion p = {p_res:.4}"))?;

    let counts = random_gate_subsets(6, 0.5, trials, 9);
    let subsets = binomial(6, 3);
    ensure(counts.len() == subsets, || format!("{} of {subsets} subsets seen", counts.len()))?;
    let obs: Vec<u64> = counts.values().copied().collect();
    let p_sub = uniform_fit_p(&obs);
    ensure(p_sub > CHI_SQUARE_ALPHA, || format!("random gate subsets p = {p_sub:.4}"))?;
    Ok(format!(
        "reservoir M/n p={p_res:.3}, random subsets p={p_sub:.3} over {trials} trials each"
    ))
}

/// Labels drawn from a random skewed distribution over `classes` classes.
pub struct SkewedLabels {
    dist: WeightedIndex<f64>,
}

impl SkewedLabels {
    pub fn new<R: Rng>(classes: usize, rng: &mut R) -> Self {
        let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        SkewedLabels {
            dist: WeightedIndex::new(w).unwrap(),
        }
    }

    pub fn next<R: Rng>(&self, rng: &mut R) -> u32 {
        self.dist.sample(rng) as u32
    }
}

/// Every class is within one of the largest class, unless all of its offered samples are resident.
pub fn greedy_balanced_ok(counts: &BTreeMap<u32, usize>, offered: &HashMap<u32, usize>) -> Result<(), String> {
    let max = counts.values().copied().max().unwrap_or(0);
    for (label, &n) in offered {
        let c = counts.get(label).copied().unwrap_or(0);
        ensure(c + 1 >= max || c == n, || {
            format!("class {label} holds {c} of {n} offered while largest holds {max}: {counts:?}")
        })?;
    }
    Ok(())
}

/// One randomized GreedyBalanced trace. With `saturate`, every class is
/// offered at least `capacity` samples and the strict form is checked.
pub fn greedy_trace(seed: u64, saturate: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = rng.random_range(4..=40);
    let partitions = rng.random_range(1..=4);
    let classes = rng.random_range(2..=8);
    let em = EpisodicMemory::with_partitions(capacity, partitions, UpdatePolicy::GreedyBalanced);
    let labels = SkewedLabels::new(classes, &mut rng);
    let mut offered: HashMap<u32, usize> = HashMap::new();
    let mut next_id = 0u64;
    let mut out_total = 0usize;
    let rounds = rng.random_range(5..30);
    for round in 0..rounds + classes {
        let batch: Vec<Sample> = if saturate && round >= rounds {
            let label = (round - rounds) as u32;
            (0..capacity).map(|_| sample(next_id_bump(&mut next_id), label)).collect()
        } else {
            let len = rng.random_range(0..12);
            (0..len).map(|_| sample(next_id_bump(&mut next_id), labels.next(&mut rng))).collect()
        };
        for s in &batch {
            *offered.entry(s.label).or_default() += 1;
        }
        out_total += em.update(batch, &mut rng).len();
        let counts = em.class_counts();
        greedy_balanced_ok(&counts, &offered).map_err(|e| format!("seed {seed} round {round}: {e}"))?;
        ensure(em.occupied() + out_total == next_id as usize, || {
            format!("seed {seed}: {} resident + {out_total} returned != {next_id} offered", em.occupied())
        })?;
    }
    if saturate {
        let counts = em.class_counts();
        let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        ensure(hi - lo <= 1, || format!("seed {seed}: saturated counts {counts:?}"))?;
    }
    Ok(())
}

fn next_id_bump(id: &mut u64) -> u64 {
    *id += 1;
    *id - 1
}

/// One randomized storage trace: every victim must belong to a class of
/// maximal live count at the moment it was evicted.
pub fn eviction_trace(seed: u64, root: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = rng.random_range(0..=30);
    let classes = rng.random_range(1..=6);
    let labels = SkewedLabels::new(classes, &mut rng);
    let archive = Archive::create(
        root,
        ArchiveConfig {
            capacity: Some(capacity),
            seed,
            ..ArchiveConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut live: BTreeMap<u32, usize> = BTreeMap::new();
    let mut label_of = HashMap::new();
    let mut next_id = 0u64;
    for step in 0..rng.random_range(10..60) {
        if rng.random_bool(0.2) {
            let lists = archive.class_lists();
            if let Some((&label, ids)) = lists.iter().find(|(_, ids)| !ids.is_empty()) {
                let id = ids[rng.random_range(0..ids.len())];
                ensure(archive.take(id).map_err(|e| e.to_string())?, || format!("take {id} refused"))?;
                *live.get_mut(&label).unwrap() -= 1;
            }
            continue;
        }
        let batch: Vec<Sample> = (0..rng.random_range(1..8))
            .map(|_| {
                let s = sample(next_id_bump(&mut next_id), labels.next(&mut rng));
                label_of.insert(s.id, s.label);
                s
            })
            .collect();
        for s in &batch {
            *live.entry(s.label).or_default() += 1;
        }
        let victims = archive.put(batch).map_err(|e| e.to_string())?;
        for v in victims {
            let label = label_of[&v];
            let max = live.values().copied().max().unwrap_or(0);
            let c = live.get_mut(&label).unwrap();
            ensure(*c == max, || {
                format!("seed {seed} step {step}: victim {v} from class {label} with {c} live, max {max}")
            })?;
            *c -= 1;
        }
        let total: usize = live.values().sum();
        ensure(total <= capacity && total == archive.live_count(), || {
            format!("seed {seed} step {step}: {total} live tracked, {} in archive, cap {capacity}", archive.live_count())
        })?;
    }
    Ok(())
}

pub fn balance(traces: usize, scratch: &Path) -> Check {
    for seed in 0..traces as u64 {
        greedy_trace(seed, seed % 2 == 1)?;
        eviction_trace(seed, &scratch.join(format!("trace-{seed}")))?;
    }
    Ok(format!("{traces} EM traces and {traces} storage traces"))
}

/// A small randomized configuration for conservation runs.
pub fn random_config(seed: u64, out: &Path) -> ExperimentConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ExperimentConfig::default();
    cfg.stream.num_tasks = rng.random_range(2..=4);
    cfg.stream.classes_per_task = rng.random_range(1..=3);
    cfg.stream.samples_per_class = rng.random_range(5..=25);
    cfg.stream.dim = rng.random_range(2..=6);
    cfg.stream.eval_per_class = 5;
    cfg.memory.capacity = rng.random_range(1..=30);
    cfg.memory.partitions = rng.random_range(1..=4);
    cfg.memory.policy = [UpdatePolicy::Reservoir, UpdatePolicy::GreedyBalanced, UpdatePolicy::RingBufferEqualClass]
        [rng.random_range(0..3)];
    cfg.storage.capacity = match rng.random_range(0..3) {
        0 => None,
        1 => Some(0),
        _ => Some(rng.random_range(1..=40)),
    };
    cfg.storage.latency_ms = [0.0, 0.2][rng.random_range(0..2)];
    cfg.gate.kind = [PolicyKind::Random, PolicyKind::Entropy, PolicyKind::Dynamic][rng.random_range(0..3)];
    cfg.gate.swap_ratio = [0.0, 0.3, 0.5, 1.0][rng.random_range(0..4)];
    cfg.swap.mode = [RunMode::Off, RunMode::Sync, RunMode::Async][rng.random_range(0..3)];
    cfg.swap.concurrency = rng.random_range(1..=8);
    cfg.trainer.hidden = 8;
    cfg.trainer.batch_size = rng.random_range(2..=10);
    cfg.trainer.passes = rng.random_range(1..=3);
    cfg.trainer.old_fraction = [0.0, 0.3, 0.5][rng.random_range(0..3)];
    cfg.trainer.alpha = [0.0, 0.5][rng.random_range(0..2)];
    cfg.run.bundle_size = [None, Some(rng.random_range(1..=20))][rng.random_range(0..2)];
    cfg.run.seeds = vec![seed];
    cfg.run.output = out.to_path_buf();
    cfg
}

pub fn conservation(configs: usize, scratch: &Path) -> Check {
    let mut samples = 0;
    let mut swapped = 0;
    for seed in 0..configs as u64 {
        let cfg = random_config(seed, scratch);
        let root = scratch.join(format!("conservation-{seed}"));
        let r = run_experiment(&cfg, seed, &root).map_err(|e| format!("config {seed}: {e}"))?;
        ensure(r.audit.is_clean(), || format!("config {seed}: {:?}", r.audit))?;
        let reopened = Archive::open(&root, ArchiveConfig::default()).map_err(|e| e.to_string())?;
        ensure(reopened.live_count() == r.audit.live_in_storage, || {
            format!(
                "config {seed}: reopened archive has {} live, run ended with {}",
                reopened.live_count(),
                r.audit.live_in_storage
            )
        })?;
        ensure(reopened.ids_in_state(EntryState::Evicted).len() == r.audit.evicted, || {
            format!("config {seed}: evicted count differs after reopen")
        })?;
        samples += r.audit.generated;
        swapped += r.swap_stats.replacements_applied;
    }
    Ok(format!("{configs} configs, {samples} samples accounted, {swapped} swaps applied"))
}

/// A workload with 10-item swaps on every batch once the EM is populated.
///
/// Three tasks of 100 samples, 10 new and 10 EM samples per batch, 10 passes:
/// 100 batches per task, of which the last two tasks (200 batches) are timed.
pub fn speed_config(latency_ms: f64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.stream.num_tasks = 3;
    cfg.stream.classes_per_task = 2;
    cfg.stream.samples_per_class = 50;
    cfg.stream.eval_per_class = 20;
    cfg.memory.capacity = 40;
    cfg.storage.latency_ms = latency_ms;
    cfg.gate.kind = PolicyKind::Random;
    cfg.gate.swap_ratio = 1.0;
    cfg.swap.concurrency = 8;
    cfg.trainer.batch_size = 20;
    cfg.trainer.old_fraction = 0.5;
    cfg.trainer.passes = 10;
    cfg.run.compute_delay_ms = 10.0;
    cfg.run.seeds = vec![1];
    cfg.run.output = out.to_path_buf();
    cfg
}

pub struct Overheads {
    pub sync_pct: f64,
    pub async_pct: f64,
    pub timed_batches: u64,
    pub items_per_batch: f64,
}

pub fn measure_overheads(cfg: &ExperimentConfig) -> Result<Overheads, String> {
    let rows = run_speed_test(cfg, &[RunMode::Off, RunMode::Sync, RunMode::Async]).map_err(|e| e.to_string())?;
    let pct = |m: RunMode| rows.iter().find(|r| r.mode == m).and_then(|r| r.overhead_pct).unwrap();
    let sync = rows.iter().find(|r| r.mode == RunMode::Sync).unwrap();
    Ok(Overheads {
        sync_pct: pct(RunMode::Sync),
        async_pct: pct(RunMode::Async),
        timed_batches: rows[0].timed_batches,
        items_per_batch: sync.swap_stats.items_enqueued as f64 / sync.swap_stats.requests_enqueued.max(1) as f64,
    })
}

pub fn speed(scratch: &Path) -> Check {
    let o = measure_overheads(&speed_config(5.0, scratch))?;
    ensure(o.timed_batches == 200 && (o.items_per_batch - 10.0).abs() < 1e-9, || {
        format!("workload shape: {} batches, {} items/batch", o.timed_batches, o.items_per_batch)
    })?;
    let detail = format!("async {:+.1}%, sync {:+.1}%", o.async_pct, o.sync_pct);
    ensure(o.async_pct <= 10.0, || format!("async overhead above 10%: {detail}"))?;
    ensure(o.sync_pct >= 40.0, || format!("sync overhead below 40%: {detail}"))?;
    ensure(o.sync_pct > o.async_pct, || format!("sync not slower than async: {detail}"))?;
    Ok(format!("{detail} over {} batches of 10 swaps", o.timed_batches))
}

/// Five tasks of four classes in 16 dimensions, 40-slot EM, unbounded storage, seeds 1..=5.
pub fn trend_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.stream.num_tasks = 5;
    cfg.stream.classes_per_task = 4;
    cfg.stream.samples_per_class = 100;
    cfg.stream.dim = 16;
    cfg.stream.stddev = 1.0;
    cfg.stream.mean_scale = 1.0;
    cfg.memory.capacity = 40;
    cfg.storage.capacity = None;
    cfg.gate.kind = PolicyKind::Entropy;
    // synchronous swaps keep the arms deterministic
    cfg.swap.mode = RunMode::Sync;
    cfg.run.seeds = (1..=5).collect();
    cfg.run.output = out.to_path_buf();
    cfg
}

pub struct TrendArms {
    pub off: Vec<(f64, f64)>,
    pub full: Vec<(f64, f64)>,
    pub half: Vec<(f64, f64)>,
}

fn arm(cfg: &ExperimentConfig, label: &str) -> Result<Vec<(f64, f64)>, String> {
    let s = run_seeds(cfg, label).map_err(|e| e.to_string())?;
    for r in &s.runs {
        ensure(r.audit.is_clean(), || format!("{label} seed {}: {:?}", r.seed, r.audit))?;
    }
    Ok(s.runs
        .iter()
        .map(|r| (r.summary.final_accuracy, r.summary.final_forgetting))
        .collect())
}

pub fn trend_arms(out: &Path) -> Result<TrendArms, String> {
    let base = trend_config(out);
    let mut off = base.clone();
    off.swap.mode = RunMode::Off;
    let mut half = base.clone();
    half.gate.swap_ratio = 0.5;
    let mut full = base;
    full.gate.swap_ratio = 1.0;
    Ok(TrendArms {
        off: arm(&off, "off")?,
        full: arm(&full, "full")?,
        half: arm(&half, "half")?,
    })
}

pub fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn accuracy_trend(arms: &TrendArms) -> Check {
    let acc = |a: &[(f64, f64)]| mean(a.iter().map(|x| x.0));
    let (off, full, half) = (acc(&arms.off), acc(&arms.full), acc(&arms.half));
    let wins = arms.full.iter().zip(&arms.off).filter(|(f, o)| f.0 > o.0).count();
    let detail = format!("full {full:.2}, half {half:.2}, off {off:.2}, {wins}/5 seeds improve");
    ensure(full - off >= 3.0, || format!("gain below 3 points: {detail}"))?;
    ensure(wins >= 4, || format!("too few improving seeds: {detail}"))?;
    ensure((full - half).abs() <= 2.0, || format!("half ratio off by more than 2: {detail}"))?;
    Ok(detail)
}

pub fn forgetting_trend(arms: &TrendArms) -> Check {
    let fgt = |a: &[(f64, f64)]| mean(a.iter().map(|x| x.1));
    let (off, full) = (fgt(&arms.off), fgt(&arms.full));
    let detail = format!("forgetting full {full:.2}, off {off:.2}");
    ensure(full <= off, || detail.clone())?;
    Ok(detail)
}

pub fn distillation_trend(out: &Path) -> Check {
    let mut cfg = trend_config(out);
    cfg.gate.swap_ratio = 1.0;
    cfg.trainer.alpha = 0.1;
    let low = mean(arm(&cfg, "alpha-0.1")?.iter().map(|x| x.0));
    cfg.trainer.alpha = 1.0;
    let high = mean(arm(&cfg, "alpha-1.0")?.iter().map(|x| x.0));
    let detail = format!("alpha 0.1: {low:.2}, alpha 1.0: {high:.2}");
    ensure(low >= high, || detail.clone())?;
    Ok(detail)
}

pub struct GradientCase {
    pub model: Mlp<f64>,
    pub snapshot: Mlp<f64>,
    pub batch: Vec<Sample>,
    pub active: usize,
    pub old: usize,
    pub alpha: f64,
}

pub fn gradient_case(seed: u64) -> GradientCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(2..=6);
    let hidden = rng.random_range(2..=6);
    let classes = rng.random_range(2..=6);
    let active = rng.random_range(2..=classes);
    let old = rng.random_range(0..active);
    let alpha = if seed.is_multiple_of(5) { 0.0 } else { rng.random::<f64>() };
    let batch = (0..rng.random_range(1..=5))
        .map(|i| {
            let f = (0..input).map(|_| rng.random_range(-2.0..2.0f32)).collect();
            Sample::new(i, rng.random_range(0..active) as u32, 0, f)
        })
        .collect();
    GradientCase {
        model: Mlp::new(input, hidden, classes, &mut rng),
        snapshot: Mlp::new(input, hidden, classes, &mut rng),
        batch,
        active,
        old,
        alpha,
    }
}

/// `|g - g_fd| / max(|g|, |g_fd|)` over the whole parameter vector, central differences.
pub fn gradient_error(case: &GradientCase) -> f64 {
    let refs: Vec<&Sample> = case.batch.iter().collect();
    let eval = |m: &Mlp<f64>| mixed_loss(m, Some(&case.snapshot), &refs, case.active, case.old, case.alpha).unwrap();
    let analytic = eval(&case.model).grad.params();
    let theta = case.model.params();
    let h = 1e-6;
    let mut probe = case.model.clone();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] = theta[i] + h;
        probe.set_params(&p);
        let up = eval(&probe).loss;
        p[i] = theta[i] - h;
        probe.set_params(&p);
        let down = eval(&probe).loss;
        numeric.push((up - down) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 { 0.0 } else { norm(&diff) / scale }
}

pub fn gradient_check(instances: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let err = gradient_error(&gradient_case(seed));
        ensure(err <= GRADIENT_TOLERANCE, || format!("instance {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances, worst relative error {worst:.2e}"))
}

pub fn durability_samples(n: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(n);
    (0..n)
        .map(|i| {
            let f: Vec<f32> = (0..5).map(|_| rng.random::<f32>() * 1e3 - 500.0).collect();
            let s = Sample::new(i * 7 + 1, (i % 3) as u32, (i / 4) as u32, f);
            if i % 2 == 0 {
                s.with_aux_logits(vec![f32::MIN_POSITIVE, -0.0, rng.random()])
            } else {
                s
            }
        })
        .collect()
}

/// Round trip through close/reopen, then recovery after cutting the final record short.
pub fn durability(scratch: &Path) -> Check {
    let root = scratch.join("durability");
    let written = durability_samples(10);
    let archive = Archive::create(&root, ArchiveConfig::default()).map_err(|e| e.to_string())?;
    archive.put(written.clone()).map_err(|e| e.to_string())?;
    archive.close().map_err(|e| e.to_string())?;

    let reopened = Archive::open(&root, ArchiveConfig::default()).map_err(|e| e.to_string())?;
    ensure(reopened.live_count() == 10, || format!("{} live after reopen", reopened.live_count()))?;
    for s in &written {
        let back = reopened.read(s.id).map_err(|e| e.to_string())?;
        ensure(back.as_ref().is_some_and(|b| b.bit_eq(s)), || format!("sample {} differs after reopen", s.id))?;
    }
    reopened.close().map_err(|e| e.to_string())?;

    let log = root.join(tiered_replay::storage::LOG_FILE);
    let len = std::fs::metadata(&log).map_err(|e| e.to_string())?.len();
    let file = std::fs::OpenOptions::new().write(true).open(&log).map_err(|e| e.to_string())?;
    file.set_len(len - 3).map_err(|e| e.to_string())?;
    drop(file);
    match Archive::open(&root, ArchiveConfig::default()) {
        Err(StorageError::CorruptLog { .. }) => {}
        Err(e) => return Err(format!("truncated log: unexpected error {e}")),
        Ok(_) => return Err("truncated log opened without error".into()),
    }
    let (recovered, cut) = Archive::open_recover(&root, ArchiveConfig::default()).map_err(|e| e.to_string())?;
    ensure(cut.is_some(), || "recovery reported no cut".into())?;
    ensure(recovered.live_count() == 9, || format!("{} live after recovery", recovered.live_count()))?;
    for s in &written[..9] {
        let back = recovered.read(s.id).map_err(|e| e.to_string())?;
        ensure(back.as_ref().is_some_and(|b| b.bit_eq(s)), || format!("sample {} differs after recovery", s.id))?;
    }
    ensure(!recovered.is_live(written[9].id), || "cut record still live".into())?;
    recovered.put(vec![written[9].clone()]).map_err(|e| e.to_string())?;
    recovered.close().map_err(|e| e.to_string())?;
    let again = Archive::open(&root, ArchiveConfig::default()).map_err(|e| e.to_string())?;
    ensure(again.live_count() == 10, || "re-appended record lost".into())?;
    Ok("10 records survive reopen; truncated tail rejected, 9/10 recovered bit-exactly".into())
}

pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = std::time::Instant::now();
    while start.elapsed() < timeout {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    cond()
}
