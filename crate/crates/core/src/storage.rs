//! Storage tier: a capacity-bounded, class-indexed sample archive on disk.
//!
//! Samples are appended to `archive.log`; `archive.idx` caches the index and
//! is rebuilt from a log scan whenever it is missing or stale. Evictions and
//! check-outs are recorded as tombstones so a scan reproduces the live set.
//! Reads are served asynchronously by a small pool of I/O threads, with an
//! optional injected latency per read.

// Log layout (little-endian throughout):
//
//   LOG       := MAGIC(8) VERSION(1) RECORD*
//   RECORD    := SAMPLE | TOMBSTONE
//   SAMPLE    := LEN(u32) ID(u64) LABEL(u32) TASK(u32) D(u32) F32{D} AUX(u8) [C(u32) F32{C}]
//   TOMBSTONE := LEN(u32)=12 ID(u64) REASON(u32)
//
// LEN counts the bytes after itself. A sample body is at least 21 bytes, so
// LEN = 12 identifies a tombstone.
//
//   IDX       := MAGIC(8) VERSION(1) LOG_LEN(u64) COUNT(u64) ENTRY{COUNT}
//   ENTRY     := ID(u64) OFFSET(u64) LEN(u32) LABEL(u32) TASK(u32) STATE(u8)

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sample::Sample;

pub const LOG_FILE: &str = "archive.log";
pub const INDEX_FILE: &str = "archive.idx";
pub const LOG_MAGIC: [u8; 8] = *b"TIERLOG\0";
pub const INDEX_MAGIC: [u8; 8] = *b"TIERIDX\0";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: u64 = 9;
const TOMBSTONE_BODY: u32 = 12;
const MIN_SAMPLE_BODY: u32 = 8 + 4 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log at byte offset {offset}: {reason}")]
    CorruptLog { offset: u64, reason: String },
    #[error("no live samples of class {label}")]
    ClassEmpty { label: u32 },
    #[error("sample {id} is already live in the archive")]
    AlreadyLive { id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryState {
    Live,
    /// Removed by capacity eviction.
    Evicted,
    /// Checked out into the episodic memory by a swap.
    Taken,
}

impl EntryState {
    fn code(self) -> u8 {
        match self {
            EntryState::Live => 0,
            EntryState::Evicted => 1,
            EntryState::Taken => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(EntryState::Live),
            1 => Some(EntryState::Evicted),
            2 => Some(EntryState::Taken),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct IndexEntry {
    offset: u64,
    length: u32,
    label: u32,
    task: u32,
    state: EntryState,
}

#[derive(Debug, Clone)]
pub struct ArchiveConfig {
    /// Maximum number of live samples; `None` is unbounded.
    pub capacity: Option<usize>,
    pub seed: u64,
    pub read_latency: Duration,
    /// Number of background threads serving read tickets.
    pub io_threads: usize,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        ArchiveConfig {
            capacity: None,
            seed: 0,
            read_latency: Duration::ZERO,
            io_threads: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReadFailure {
    NotLive,
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TicketStatus {
    Pending,
    Ready(Sample),
    Failed(ReadFailure),
}

#[derive(Debug)]
struct TicketCell {
    status: Mutex<TicketStatus>,
    done: Condvar,
}

impl TicketCell {
    fn complete(&self, status: TicketStatus) {
        let mut guard = self.status.lock().unwrap();
        debug_assert!(matches!(*guard, TicketStatus::Pending));
        if matches!(*guard, TicketStatus::Pending) {
            *guard = status;
            self.done.notify_all();
        }
    }
}

/// Handle to an in-flight asynchronous read.
#[derive(Debug, Clone)]
pub struct ReadTicket {
    pub request_id: u64,
    pub sample_id: u64,
    cell: Arc<TicketCell>,
}

impl ReadTicket {
    pub fn status(&self) -> TicketStatus {
        self.cell.status.lock().unwrap().clone()
    }

    pub fn is_pending(&self) -> bool {
        matches!(*self.cell.status.lock().unwrap(), TicketStatus::Pending)
    }

    /// Blocks until the read completes.
    pub fn wait(&self) -> Result<Sample, ReadFailure> {
        let mut guard = self.cell.status.lock().unwrap();
        while matches!(*guard, TicketStatus::Pending) {
            guard = self.cell.done.wait(guard).unwrap();
        }
        match &*guard {
            TicketStatus::Ready(s) => Ok(s.clone()),
            TicketStatus::Failed(f) => Err(f.clone()),
            TicketStatus::Pending => unreachable!(),
        }
    }

    /// Waits up to `timeout`; `None` if still pending afterwards.
    pub fn wait_timeout(&self, timeout: Duration) -> Option<Result<Sample, ReadFailure>> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.cell.status.lock().unwrap();
        loop {
            match &*guard {
                TicketStatus::Ready(s) => return Some(Ok(s.clone())),
                TicketStatus::Failed(f) => return Some(Err(f.clone())),
                TicketStatus::Pending => {
                    let now = Instant::now();
                    if now >= deadline {
                        return None;
                    }
                    guard = self.cell.done.wait_timeout(guard, deadline - now).unwrap().0;
                }
            }
        }
    }
}

#[derive(Debug)]
struct State {
    log: File,
    log_len: u64,
    index: HashMap<u64, IndexEntry>,
    classes: BTreeMap<u32, Vec<u64>>,
    positions: HashMap<u64, usize>,
    rng: ChaCha8Rng,
    capacity: Option<usize>,
    flushed_len: Option<u64>,
}

impl State {
    fn link(&mut self, id: u64, label: u32) {
        let list = self.classes.entry(label).or_default();
        self.positions.insert(id, list.len());
        list.push(id);
    }

    fn unlink(&mut self, id: u64, label: u32) {
        let pos = self.positions.remove(&id).expect("live id has a position");
        let list = self.classes.get_mut(&label).expect("live id has a class");
        list.swap_remove(pos);
        if let Some(&moved) = list.get(pos) {
            self.positions.insert(moved, pos);
        }
        if list.is_empty() {
            self.classes.remove(&label);
        }
    }

    fn live_count(&self) -> usize {
        self.positions.len()
    }

    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        if bytes.is_empty() {
            return Ok(());
        }
        self.log.write_all(bytes)?;
        self.log_len += bytes.len() as u64;
        Ok(())
    }

    fn read_record(&mut self, entry: &IndexEntry) -> io::Result<Vec<u8>> {
        let mut buf = vec![0u8; entry.length as usize];
        self.log.seek(SeekFrom::Start(entry.offset))?;
        self.log.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn read_sample(&mut self, id: u64) -> Result<Option<Sample>, StorageError> {
        let Some(entry) = self.index.get(&id).copied() else {
            return Ok(None);
        };
        if entry.state != EntryState::Live {
            return Ok(None);
        }
        let bytes = self.read_record(&entry)?;
        match decode_record(&bytes) {
            Some(Record::Sample(s)) if s.id == id => Ok(Some(s)),
            _ => Err(StorageError::CorruptLog {
                offset: entry.offset,
                reason: format!("index entry for {id} does not decode"),
            }),
        }
    }
}

struct Shared {
    state: Mutex<State>,
    read_latency_us: AtomicU64,
    next_request: AtomicU64,
}

type Job = (u64, Arc<TicketCell>);

/// The on-disk sample archive.
pub struct Archive {
    root: PathBuf,
    shared: Arc<Shared>,
    jobs: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Archive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Archive")
            .field("root", &self.root)
            .field("live", &self.live_count())
            .finish()
    }
}

impl Archive {
    /// Opens the archive under `root`, creating an empty one if nothing is there.
    ///
    /// Fails with [`StorageError::CorruptLog`] if the log contains an
    /// undecodable record; [`Archive::open_recover`] truncates it instead.
    pub fn open(root: impl AsRef<Path>, config: ArchiveConfig) -> Result<Archive, StorageError> {
        Self::open_inner(root.as_ref(), config, false).map(|(a, _)| a)
    }

    /// Like [`Archive::open`], but drops a corrupt log tail and returns the
    /// offset it was cut at.
    pub fn open_recover(
        root: impl AsRef<Path>,
        config: ArchiveConfig,
    ) -> Result<(Archive, Option<u64>), StorageError> {
        Self::open_inner(root.as_ref(), config, true)
    }

    /// Creates an empty archive under `root`, discarding any existing archive files there.
    pub fn create(root: impl AsRef<Path>, config: ArchiveConfig) -> Result<Archive, StorageError> {
        let root = root.as_ref();
        fs::create_dir_all(root)?;
        for name in [LOG_FILE, INDEX_FILE] {
            match fs::remove_file(root.join(name)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Self::open(root, config)
    }

    fn open_inner(
        root: &Path,
        config: ArchiveConfig,
        recover: bool,
    ) -> Result<(Archive, Option<u64>), StorageError> {
        fs::create_dir_all(root)?;
        let log_path = root.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&log_path)?;
        let mut len = log.metadata()?.len();
        if len == 0 {
            let mut header = LOG_MAGIC.to_vec();
            header.push(FORMAT_VERSION);
            log.write_all(&header)?;
            len = HEADER_LEN;
        }

        let mut cut = None;
        let index = match load_index(&root.join(INDEX_FILE), len) {
            Some(index) => index,
            None => match scan_log(&mut log, len) {
                Ok(index) => index,
                Err(StorageError::CorruptLog { offset, .. }) if recover && offset >= HEADER_LEN => {
                    log.set_len(offset)?;
                    len = offset;
                    cut = Some(offset);
                    scan_log(&mut log, len)?
                }
                Err(e) => return Err(e),
            },
        };

        let mut state = State {
            log,
            log_len: len,
            index: HashMap::new(),
            classes: BTreeMap::new(),
            positions: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            capacity: config.capacity,
            flushed_len: None,
        };
        let mut by_offset: Vec<_> = index.into_iter().collect();
        by_offset.sort_by_key(|(_, e)| e.offset);
        for (id, entry) in by_offset {
            if entry.state == EntryState::Live {
                state.link(id, entry.label);
            }
            state.index.insert(id, entry);
        }
        if cut.is_none() {
            state.flushed_len = Some(len);
        }

        let shared = Arc::new(Shared {
            state: Mutex::new(state),
            read_latency_us: AtomicU64::new(config.read_latency.as_micros() as u64),
            next_request: AtomicU64::new(0),
        });
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..config.io_threads.max(1))
            .map(|i| {
                let shared = Arc::clone(&shared);
                let rx = Arc::clone(&rx);
                thread::Builder::new()
                    .name(format!("archive-io-{i}"))
                    .spawn(move || io_worker(shared, rx))
                    .expect("spawn archive i/o thread")
            })
            .collect();
        Ok((
            Archive {
                root: root.to_path_buf(),
                shared,
                jobs: Some(tx),
                workers,
            },
            cut,
        ))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn capacity(&self) -> Option<usize> {
        self.shared.state.lock().unwrap().capacity
    }

    pub fn read_latency(&self) -> Duration {
        Duration::from_micros(self.shared.read_latency_us.load(Ordering::Relaxed))
    }

    pub fn set_read_latency(&self, latency: Duration) {
        self.shared
            .read_latency_us
            .store(latency.as_micros() as u64, Ordering::Relaxed);
    }

    /// Appends and indexes `batch`, then evicts down to capacity.
    ///
    /// Each victim is a uniformly random live sample of a uniformly chosen
    /// class among those with the current maximum live count. Returns the
    /// victims in eviction order.
    pub fn put(&self, batch: Vec<Sample>) -> Result<Vec<u64>, StorageError> {
        let mut state = self.shared.state.lock().unwrap();
        let mut seen = std::collections::HashSet::with_capacity(batch.len());
        for s in &batch {
            let live = state
                .index
                .get(&s.id)
                .is_some_and(|e| e.state == EntryState::Live);
            if live || !seen.insert(s.id) {
                return Err(StorageError::AlreadyLive { id: s.id });
            }
        }

        let mut bytes = Vec::new();
        let mut placed = Vec::with_capacity(batch.len());
        for s in &batch {
            let offset = state.log_len + bytes.len() as u64 + 4;
            let body = encode_sample(s);
            bytes.extend_from_slice(&(body.len() as u32).to_le_bytes());
            bytes.extend_from_slice(&body);
            placed.push((
                s.id,
                IndexEntry {
                    offset,
                    length: body.len() as u32,
                    label: s.label,
                    task: s.task,
                    state: EntryState::Live,
                },
            ));
        }
        state.append(&bytes)?;
        state.flushed_len = None;
        for (id, entry) in placed {
            state.index.insert(id, entry);
            state.link(id, entry.label);
        }

        let mut victims = Vec::new();
        if let Some(cap) = state.capacity {
            let mut tombs = Vec::new();
            while state.live_count() > cap {
                let max = state.classes.values().map(Vec::len).max().unwrap_or(0);
                let largest: Vec<u32> = state
                    .classes
                    .iter()
                    .filter(|(_, ids)| ids.len() == max)
                    .map(|(&c, _)| c)
                    .collect();
                let label = largest[state.rng.random_range(0..largest.len())];
                let len = state.classes[&label].len();
                let pick = state.rng.random_range(0..len);
                let victim = state.classes[&label][pick];
                state.unlink(victim, label);
                state.index.get_mut(&victim).unwrap().state = EntryState::Evicted;
                tombs.extend_from_slice(&encode_tombstone(victim, EntryState::Evicted));
                victims.push(victim);
            }
            state.append(&tombs)?;
        }
        Ok(victims)
    }

    /// Marks a live sample as checked out into memory. Returns `false` if it was not live.
    pub fn take(&self, id: u64) -> Result<bool, StorageError> {
        let mut state = self.shared.state.lock().unwrap();
        let Some(entry) = state.index.get(&id).copied() else {
            return Ok(false);
        };
        if entry.state != EntryState::Live {
            return Ok(false);
        }
        state.append(&encode_tombstone(id, EntryState::Taken))?;
        state.flushed_len = None;
        state.unlink(id, entry.label);
        state.index.get_mut(&id).unwrap().state = EntryState::Taken;
        Ok(true)
    }

    /// Issues an asynchronous read. The ticket completes no earlier than the
    /// configured read latency, with `Ready` if the id is live at completion.
    pub fn request(&self, sample_id: u64) -> ReadTicket {
        let ticket = ReadTicket {
            request_id: self.shared.next_request.fetch_add(1, Ordering::Relaxed),
            sample_id,
            cell: Arc::new(TicketCell {
                status: Mutex::new(TicketStatus::Pending),
                done: Condvar::new(),
            }),
        };
        let job = (sample_id, Arc::clone(&ticket.cell));
        let sent = self.jobs.as_ref().map(|tx| tx.send(job));
        if !matches!(sent, Some(Ok(()))) {
            ticket
                .cell
                .complete(TicketStatus::Failed(ReadFailure::Io("archive closed".into())));
        }
        ticket
    }

    /// Synchronous read of a live sample, without injected latency.
    pub fn read(&self, id: u64) -> Result<Option<Sample>, StorageError> {
        self.shared.state.lock().unwrap().read_sample(id)
    }

    /// Uniformly random live sample id of class `label`.
    pub fn sample_random<R: Rng + ?Sized>(&self, label: u32, rng: &mut R) -> Result<u64, StorageError> {
        let state = self.shared.state.lock().unwrap();
        match state.classes.get(&label) {
            Some(ids) if !ids.is_empty() => Ok(ids[rng.random_range(0..ids.len())]),
            _ => Err(StorageError::ClassEmpty { label }),
        }
    }

    pub fn live_count(&self) -> usize {
        self.shared.state.lock().unwrap().live_count()
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.state_of(id) == Some(EntryState::Live)
    }

    pub fn state_of(&self, id: u64) -> Option<EntryState> {
        self.shared.state.lock().unwrap().index.get(&id).map(|e| e.state)
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let state = self.shared.state.lock().unwrap();
        state.classes.iter().map(|(&c, ids)| (c, ids.len())).collect()
    }

    /// Ids currently in `state`, ascending.
    pub fn ids_in_state(&self, wanted: EntryState) -> Vec<u64> {
        let state = self.shared.state.lock().unwrap();
        let mut ids: Vec<u64> = state
            .index
            .iter()
            .filter(|(_, e)| e.state == wanted)
            .map(|(&id, _)| id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Live ids grouped by class, each group ascending.
    pub fn class_lists(&self) -> BTreeMap<u32, Vec<u64>> {
        let state = self.shared.state.lock().unwrap();
        state
            .classes
            .iter()
            .map(|(&c, ids)| {
                let mut ids = ids.clone();
                ids.sort_unstable();
                (c, ids)
            })
            .collect()
    }

    /// Syncs the log and writes the index file.
    pub fn flush(&self) -> Result<(), StorageError> {
        let mut state = self.shared.state.lock().unwrap();
        if state.flushed_len == Some(state.log_len) {
            return Ok(());
        }
        state.log.sync_data()?;
        write_index(&self.root.join(INDEX_FILE), &state)?;
        state.flushed_len = Some(state.log_len);
        Ok(())
    }

    /// Flushes, stops the I/O threads and releases the files.
    pub fn close(mut self) -> Result<(), StorageError> {
        let result = self.flush();
        self.shutdown();
        result
    }

    fn shutdown(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Archive {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            let _ = self.flush();
            self.shutdown();
        }
    }
}

fn io_worker(shared: Arc<Shared>, jobs: Arc<Mutex<Receiver<Job>>>) {
    loop {
        let job = jobs.lock().unwrap().recv();
        let Ok((id, cell)) = job else { return };
        let latency = shared.read_latency_us.load(Ordering::Relaxed);
        if latency > 0 {
            thread::sleep(Duration::from_micros(latency));
        }
        let result = shared.state.lock().unwrap().read_sample(id);
        cell.complete(match result {
            Ok(Some(s)) => TicketStatus::Ready(s),
            Ok(None) => TicketStatus::Failed(ReadFailure::NotLive),
            Err(e) => TicketStatus::Failed(ReadFailure::Io(e.to_string())),
        });
    }
}

#[derive(Debug)]
enum Record {
    Sample(Sample),
    Tombstone(u64, EntryState),
}

fn encode_sample(s: &Sample) -> Vec<u8> {
    let aux_len = s.aux_logits.as_ref().map_or(0, |a| 4 + 4 * a.len());
    let mut out = Vec::with_capacity(MIN_SAMPLE_BODY as usize + 4 * s.features.len() + aux_len);
    out.extend_from_slice(&s.id.to_le_bytes());
    out.extend_from_slice(&s.label.to_le_bytes());
    out.extend_from_slice(&s.task.to_le_bytes());
    out.extend_from_slice(&(s.features.len() as u32).to_le_bytes());
    for f in &s.features {
        out.extend_from_slice(&f.to_le_bytes());
    }
    match &s.aux_logits {
        None => out.push(0),
        Some(logits) => {
            out.push(1);
            out.extend_from_slice(&(logits.len() as u32).to_le_bytes());
            for f in logits {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    out
}

fn encode_tombstone(id: u64, reason: EntryState) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&TOMBSTONE_BODY.to_le_bytes());
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(reason.code() as u32).to_le_bytes());
    out
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Some(head)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4)?)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Decodes one record body (the bytes after LEN). `None` if malformed.
fn decode_record(body: &[u8]) -> Option<Record> {
    let mut c = Cursor(body);
    if body.len() == TOMBSTONE_BODY as usize {
        let id = c.u64()?;
        let reason = EntryState::from_code(c.u32()?)?;
        if reason == EntryState::Live {
            return None;
        }
        return Some(Record::Tombstone(id, reason));
    }
    let id = c.u64()?;
    let label = c.u32()?;
    let task = c.u32()?;
    let dim = c.u32()? as usize;
    let features = c.f32s(dim)?;
    let aux_logits = match c.u8()? {
        0 => None,
        1 => {
            let n = c.u32()? as usize;
            Some(c.f32s(n)?)
        }
        _ => return None,
    };
    if !c.0.is_empty() {
        return None;
    }
    Some(Record::Sample(Sample {
        id,
        label,
        task,
        features,
        aux_logits,
    }))
}

fn corrupt(offset: u64, reason: impl Into<String>) -> StorageError {
    StorageError::CorruptLog {
        offset,
        reason: reason.into(),
    }
}

fn scan_log(log: &mut File, len: u64) -> Result<HashMap<u64, IndexEntry>, StorageError> {
    let mut bytes = Vec::with_capacity(len as usize);
    log.seek(SeekFrom::Start(0))?;
    log.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN as usize || bytes[..8] != LOG_MAGIC {
        return Err(corrupt(0, "bad log magic"));
    }
    if bytes[8] != FORMAT_VERSION {
        return Err(corrupt(8, format!("unsupported log version {}", bytes[8])));
    }
    let mut index = HashMap::new();
    let mut pos = HEADER_LEN as usize;
    while pos < bytes.len() {
        let record_start = pos as u64;
        let Some(len_bytes) = bytes.get(pos..pos + 4) else {
            return Err(corrupt(record_start, "truncated record length"));
        };
        let body_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + body_len) else {
            return Err(corrupt(record_start, "truncated record body"));
        };
        match decode_record(body) {
            Some(Record::Sample(s)) => {
                index.insert(
                    s.id,
                    IndexEntry {
                        offset: record_start + 4,
                        length: body_len as u32,
                        label: s.label,
                        task: s.task,
                        state: EntryState::Live,
                    },
                );
            }
            Some(Record::Tombstone(id, reason)) => match index.get_mut(&id) {
                Some(e) if e.state == EntryState::Live => e.state = reason,
                _ => return Err(corrupt(record_start, format!("tombstone for non-live id {id}"))),
            },
            None => return Err(corrupt(record_start, "undecodable record")),
        }
        pos += 4 + body_len;
    }
    Ok(index)
}

fn write_index(path: &Path, state: &State) -> io::Result<()> {
    let mut out = Vec::with_capacity(25 + state.index.len() * 29);
    out.extend_from_slice(&INDEX_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&state.log_len.to_le_bytes());
    out.extend_from_slice(&(state.index.len() as u64).to_le_bytes());
    let mut entries: Vec<_> = state.index.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    for (id, e) in entries {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.length.to_le_bytes());
        out.extend_from_slice(&e.label.to_le_bytes());
        out.extend_from_slice(&e.task.to_le_bytes());
        out.push(e.state.code());
    }
    let tmp = path.with_extension("idx.tmp");
    fs::write(&tmp, &out)?;
    fs::rename(tmp, path)
}

/// Loads the index file if it exists, is well-formed and covers exactly `log_len` bytes.
fn load_index(path: &Path, log_len: u64) -> Option<HashMap<u64, IndexEntry>> {
    let bytes = fs::read(path).ok()?;
    let mut c = Cursor(&bytes);
    if c.take(8)? != INDEX_MAGIC || c.u8()? != FORMAT_VERSION || c.u64()? != log_len {
        return None;
    }
    let count = c.u64()? as usize;
    let mut index = HashMap::with_capacity(count);
    for _ in 0..count {
        let id = c.u64()?;
        let entry = IndexEntry {
            offset: c.u64()?,
            length: c.u32()?,
            label: c.u32()?,
            task: c.u32()?,
            state: EntryState::from_code(c.u8()? as u32)?,
        };
        if entry.offset + entry.length as u64 > log_len {
            return None;
        }
        index.insert(id, entry);
    }
    c.0.is_empty().then_some(index)
}
