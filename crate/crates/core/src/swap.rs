//! Swap worker: turns gate decisions into EM replacements.
//!
//! For every swapped-out slot the worker picks a same-class sample from the
//! archive, reads it through a [`ReadTicket`], archives the slot's current
//! occupant and writes the new sample into the slot. Up to `concurrency`
//! reads are kept in flight; replacements are applied strictly in arrival
//! order, so the last request touching a slot wins.
//!
//! In [`SwapMode::Sync`] `submit` blocks until the request has been
//! applied; in [`SwapMode::Async`] it only enqueues.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::EpisodicMemory;
use crate::sample::Sample;
use crate::storage::{Archive, ReadFailure, ReadTicket, StorageError};

pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwapError {
    #[error("swap worker stopped")]
    WorkerStopped,
    #[error("drain timed out with {pending} requests pending")]
    TimedOut { pending: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapItem {
    pub slot_index: usize,
    /// The sample the training step saw in that slot.
    pub out_sample: Sample,
}

#[derive(Debug, Clone)]
pub struct SwapRequest {
    pub batch_index: u64,
    pub items: Vec<SwapItem>,
    pub enqueue_time: Instant,
}

impl SwapRequest {
    pub fn new(batch_index: u64, items: Vec<SwapItem>) -> Self {
        SwapRequest {
            batch_index,
            items,
            enqueue_time: Instant::now(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapStats {
    pub requests_enqueued: u64,
    pub items_enqueued: u64,
    pub replacements_applied: u64,
    /// Items whose slot no longer held the sample the trainer saw when it was issued.
    pub stale_reads_observed: u64,
    /// Items left untouched because storage had no live sample of the class.
    pub no_replacement_available: u64,
    pub failed_retrievals: u64,
    /// Two in-flight items picked the same storage sample; the later one is dropped.
    pub take_conflicts: u64,
    pub queue_depth_max: u64,
    #[serde(with = "duration_ms")]
    pub total_retrieval_time: Duration,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_secs_f64() * 1e3).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)? / 1e3))
    }
}

/// What the worker operates on.
#[derive(Debug, Clone)]
pub struct SwapContext {
    pub memory: Arc<EpisodicMemory>,
    pub archive: Arc<Archive>,
    /// Maximum storage reads in flight.
    pub concurrency: usize,
}

struct Inflight {
    seq: u64,
    slot: usize,
    pick: Option<(u64, ReadTicket)>,
    issued: Instant,
}

/// Issue/complete state machine shared by the worker loop and [`swap_process`].
struct Pipeline {
    rng: ChaCha8Rng,
    inflight: VecDeque<Inflight>,
}

impl Pipeline {
    fn new(seed: u64) -> Self {
        Pipeline {
            rng: ChaCha8Rng::seed_from_u64(seed),
            inflight: VecDeque::new(),
        }
    }

    fn issue(&mut self, ctx: &SwapContext, seq: u64, item: SwapItem, stats: &Mutex<SwapStats>) {
        let occupant = ctx.memory.get(item.slot_index).ok().flatten();
        let pick = match occupant {
            None => {
                stats.lock().unwrap().failed_retrievals += 1;
                None
            }
            Some(occupant) => {
                if occupant.id != item.out_sample.id {
                    stats.lock().unwrap().stale_reads_observed += 1;
                }
                match ctx.archive.sample_random(occupant.label, &mut self.rng) {
                    Ok(id) => Some((id, ctx.archive.request(id))),
                    Err(_) => {
                        stats.lock().unwrap().no_replacement_available += 1;
                        None
                    }
                }
            }
        };
        self.inflight.push_back(Inflight {
            seq,
            slot: item.slot_index,
            pick,
            issued: Instant::now(),
        });
    }

    /// Waits for the oldest in-flight item and applies it.
    fn complete_front(
        &mut self,
        ctx: &SwapContext,
        stats: &Mutex<SwapStats>,
    ) -> Option<(u64, Option<(usize, u64)>)> {
        let item = self.inflight.pop_front()?;
        let Some((in_id, ticket)) = item.pick else {
            return Some((item.seq, None));
        };
        let fetched = ticket.wait();
        let waited = item.issued.elapsed();
        let applied = match fetched {
            Ok(incoming) => apply(ctx, item.slot, in_id, incoming, stats),
            // another in-flight item already checked this sample out
            Err(ReadFailure::NotLive) => {
                stats.lock().unwrap().take_conflicts += 1;
                None
            }
            Err(ReadFailure::Io(_)) => {
                stats.lock().unwrap().failed_retrievals += 1;
                None
            }
        };
        let mut s = stats.lock().unwrap();
        s.total_retrieval_time += waited;
        if applied.is_some() {
            s.replacements_applied += 1;
        }
        Some((item.seq, applied))
    }
}

fn apply(
    ctx: &SwapContext,
    slot: usize,
    in_id: u64,
    incoming: Sample,
    stats: &Mutex<SwapStats>,
) -> Option<(usize, u64)> {
    let soft_fail = |e: StorageError| {
        let _ = e;
        stats.lock().unwrap().failed_retrievals += 1;
        None
    };
    match ctx.archive.take(in_id) {
        Ok(true) => {}
        Ok(false) => {
            stats.lock().unwrap().take_conflicts += 1;
            return None;
        }
        Err(e) => return soft_fail(e),
    }
    let occupant = match ctx.memory.get(slot) {
        Ok(Some(o)) if o.label == incoming.label => o,
        _ => {
            // slot changed class or vanished under us; hand the sample back
            return match ctx.archive.put(vec![incoming]) {
                Ok(_) => {
                    stats.lock().unwrap().failed_retrievals += 1;
                    None
                }
                Err(e) => soft_fail(e),
            };
        }
    };
    // the displaced sample reaches storage before its slot is overwritten
    if let Err(e) = ctx.archive.put(vec![occupant]) {
        let _ = ctx.archive.put(vec![incoming]);
        return soft_fail(e);
    }
    ctx.memory
        .replace(slot, incoming)
        .expect("occupied slot checked above");
    Some((slot, in_id))
}

/// Runs one request to completion on the calling thread.
///
/// Returns the `(slot_index, in_sample_id)` pairs that were applied.
pub fn swap_process(
    ctx: &SwapContext,
    req: SwapRequest,
    seed: u64,
    stats: &Mutex<SwapStats>,
) -> Vec<(usize, u64)> {
    let mut pipe = Pipeline::new(seed);
    let mut applied = Vec::new();
    let mut backlog: VecDeque<SwapItem> = req.items.into();
    let window = ctx.concurrency.max(1);
    while !backlog.is_empty() || !pipe.inflight.is_empty() {
        while pipe.inflight.len() < window {
            let Some(item) = backlog.pop_front() else { break };
            pipe.issue(ctx, 0, item, stats);
        }
        if let Some((_, Some(a))) = pipe.complete_front(ctx, stats) {
            applied.push(a);
        }
    }
    applied
}

struct Job {
    seq: u64,
    req: SwapRequest,
    ack: Option<Sender<Vec<(usize, u64)>>>,
}

struct Pending {
    count: usize,
}

struct Shared {
    pending: Mutex<Pending>,
    idle: Condvar,
    stats: Mutex<SwapStats>,
}

/// Acknowledgement of a submitted request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapAck {
    pub batch_index: u64,
    /// Filled in sync mode only.
    pub applied: Option<Vec<(usize, u64)>>,
}

/// Background agent applying swap requests against one EM and one archive.
pub struct SwapWorker {
    mode: SwapMode,
    shared: Arc<Shared>,
    jobs: Option<Sender<Job>>,
    next_seq: u64,
    handle: Option<JoinHandle<()>>,
}

impl SwapWorker {
    pub fn spawn(ctx: SwapContext, mode: SwapMode, seed: u64) -> Self {
        let shared = Arc::new(Shared {
            pending: Mutex::new(Pending { count: 0 }),
            idle: Condvar::new(),
            stats: Mutex::new(SwapStats::default()),
        });
        let (tx, rx) = mpsc::channel();
        let handle = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("swap-worker".into())
                .spawn(move || worker_loop(ctx, rx, shared, seed))
                .expect("spawn swap worker")
        };
        SwapWorker {
            mode,
            shared,
            jobs: Some(tx),
            next_seq: 0,
            handle: Some(handle),
        }
    }

    pub fn mode(&self) -> SwapMode {
        self.mode
    }

    /// Hands a request to the worker. Sync mode blocks until every item is applied.
    pub fn submit(&mut self, req: SwapRequest) -> Result<SwapAck, SwapError> {
        let batch_index = req.batch_index;
        if req.items.is_empty() {
            return Ok(SwapAck {
                batch_index,
                applied: (self.mode == SwapMode::Sync).then(Vec::new),
            });
        }
        let jobs = self.jobs.as_ref().ok_or(SwapError::WorkerStopped)?;
        let (ack_tx, ack_rx) = match self.mode {
            SwapMode::Sync => {
                let (tx, rx) = mpsc::channel();
                (Some(tx), Some(rx))
            }
            SwapMode::Async => (None, None),
        };
        let items = req.items.len() as u64;
        {
            let mut pending = self.shared.pending.lock().unwrap();
            pending.count += 1;
            let mut stats = self.shared.stats.lock().unwrap();
            stats.requests_enqueued += 1;
            stats.items_enqueued += items;
            stats.queue_depth_max = stats.queue_depth_max.max(pending.count as u64);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        if jobs.send(Job { seq, req, ack: ack_tx }).is_err() {
            let mut pending = self.shared.pending.lock().unwrap();
            pending.count -= 1;
            self.shared.idle.notify_all();
            return Err(SwapError::WorkerStopped);
        }
        let applied = match ack_rx {
            Some(rx) => Some(rx.recv().map_err(|_| SwapError::WorkerStopped)?),
            None => None,
        };
        Ok(SwapAck { batch_index, applied })
    }

    /// Waits until every submitted request has been applied.
    pub fn drain(&self, timeout: Duration) -> Result<SwapStats, SwapError> {
        let deadline = Instant::now() + timeout;
        let mut pending = self.shared.pending.lock().unwrap();
        while pending.count > 0 {
            let now = Instant::now();
            if now >= deadline || self.handle.as_ref().is_none_or(|h| h.is_finished()) {
                return Err(SwapError::TimedOut {
                    pending: pending.count,
                });
            }
            pending = self.shared.idle.wait_timeout(pending, deadline - now).unwrap().0;
        }
        drop(pending);
        Ok(self.stats())
    }

    pub fn pending(&self) -> usize {
        self.shared.pending.lock().unwrap().count
    }

    pub fn stats(&self) -> SwapStats {
        self.shared.stats.lock().unwrap().clone()
    }

    /// Finishes outstanding work and joins the worker thread.
    pub fn stop(&mut self) -> SwapStats {
        self.jobs.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.stats()
    }
}

impl Drop for SwapWorker {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Tracking {
    remaining: usize,
    applied: Vec<(usize, u64)>,
    ack: Option<Sender<Vec<(usize, u64)>>>,
}

fn worker_loop(ctx: SwapContext, jobs: Receiver<Job>, shared: Arc<Shared>, seed: u64) {
    let window = ctx.concurrency.max(1);
    let mut pipe = Pipeline::new(seed);
    let mut backlog: VecDeque<(u64, SwapItem)> = VecDeque::new();
    let mut tracking: HashMap<u64, Tracking> = HashMap::new();
    let mut closed = false;

    let accept = |job: Job, backlog: &mut VecDeque<(u64, SwapItem)>, tracking: &mut HashMap<u64, Tracking>| {
        tracking.insert(
            job.seq,
            Tracking {
                remaining: job.req.items.len(),
                applied: Vec::new(),
                ack: job.ack,
            },
        );
        backlog.extend(job.req.items.into_iter().map(|it| (job.seq, it)));
    };

    loop {
        // pull whatever is queued without blocking, or block when idle
        while !closed {
            let msg = if backlog.is_empty() && pipe.inflight.is_empty() {
                jobs.recv().map_err(|_| TryRecvError::Disconnected)
            } else {
                jobs.try_recv()
            };
            match msg {
                Ok(job) => accept(job, &mut backlog, &mut tracking),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => closed = true,
            }
            if backlog.len() >= window {
                break;
            }
        }
        while pipe.inflight.len() < window {
            let Some((seq, item)) = backlog.pop_front() else { break };
            pipe.issue(&ctx, seq, item, &shared.stats);
        }
        let Some((seq, applied)) = pipe.complete_front(&ctx, &shared.stats) else {
            if closed {
                return;
            }
            continue;
        };
        let t = tracking.get_mut(&seq).expect("tracked request");
        t.remaining -= 1;
        t.applied.extend(applied);
        if t.remaining == 0 {
            let t = tracking.remove(&seq).unwrap();
            {
                let mut pending = shared.pending.lock().unwrap();
                pending.count -= 1;
                shared.idle.notify_all();
            }
            if let Some(ack) = t.ack {
                let _ = ack.send(t.applied);
            }
        }
    }
}
