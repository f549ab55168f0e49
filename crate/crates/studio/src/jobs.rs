//! Background job queue served by a fixed pool of worker threads.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Transfer,
    Sweep,
    Pretrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Error,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Error)
    }
}

/// Latest loss snapshot of a running job.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct JobProgress {
    /// Index of the current run within a sweep; 0 otherwise.
    pub run: usize,
    pub runs: usize,
    pub epoch: usize,
    pub epochs: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Job {
    pub id: u64,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Option<JobProgress>,
    /// Result files, relative to the store root.
    pub results: Vec<String>,
    pub error: Option<String>,
    /// Request that created the job.
    pub request: serde_json::Value,
}

type Work = Box<dyn FnOnce(&ProgressHandle) -> Result<Vec<String>, String> + Send>;

#[derive(Default)]
struct State {
    jobs: BTreeMap<u64, Job>,
    queue: VecDeque<(u64, Work)>,
    next_id: u64,
    shutdown: bool,
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Lets running work report progress on its own job.
pub struct ProgressHandle {
    shared: Arc<Shared>,
    id: u64,
}

impl ProgressHandle {
    /// Records `p` unless it would move backwards in (run, epoch).
    pub fn report(&self, p: JobProgress) {
        let mut st = self.shared.lock();
        if let Some(job) = st.jobs.get_mut(&self.id) {
            let newer = job.progress.is_none_or(|old| (p.run, p.epoch) >= (old.run, old.epoch));
            if newer {
                job.progress = Some(p);
            }
        }
    }

    pub fn job_id(&self) -> u64 {
        self.id
    }
}

/// FIFO of jobs executed by `workers` threads. Each job runs on one thread.
pub struct JobQueue {
    shared: Arc<Shared>,
    workers: usize,
}

/// Worker count used when none is given: one less than the available
/// parallelism, at least one.
pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get().saturating_sub(1).max(1))
}

impl JobQueue {
    pub fn new(workers: usize) -> Self {
        let workers = workers.max(1);
        let shared =
            Arc::new(Shared { state: Mutex::new(State { next_id: 1, ..State::default() }), changed: Condvar::new() });
        for i in 0..workers {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name(format!("job-worker-{i}"))
                .spawn(move || worker(shared))
                .expect("spawn worker thread");
        }
        Self { shared, workers }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Queues `work` and returns the new job id.
    pub fn submit(
        &self,
        kind: JobKind,
        request: serde_json::Value,
        work: impl FnOnce(&ProgressHandle) -> Result<Vec<String>, String> + Send + 'static,
    ) -> u64 {
        let mut st = self.shared.lock();
        let id = st.next_id;
        st.next_id += 1;
        st.jobs.insert(
            id,
            Job { id, kind, status: JobStatus::Queued, progress: None, results: Vec::new(), error: None, request },
        );
        st.queue.push_back((id, Box::new(work)));
        drop(st);
        self.shared.changed.notify_all();
        id
    }

    pub fn get(&self, id: u64) -> Option<Job> {
        self.shared.lock().jobs.get(&id).cloned()
    }

    pub fn list(&self) -> Vec<Job> {
        self.shared.lock().jobs.values().cloned().collect()
    }

    /// Blocks until job `id` finishes or `timeout` passes; returns its last
    /// known state.
    pub fn wait(&self, id: u64, timeout: Duration) -> Option<Job> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.lock();
        loop {
            let job = st.jobs.get(&id)?;
            let left = deadline.saturating_duration_since(Instant::now());
            if job.status.is_finished() || left.is_zero() {
                return Some(job.clone());
            }
            st = self.shared.changed.wait_timeout(st, left).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.changed.notify_all();
    }
}

fn set_status(shared: &Shared, id: u64, to: JobStatus, outcome: Option<Result<Vec<String>, String>>) {
    let mut st = shared.lock();
    if let Some(job) = st.jobs.get_mut(&id) {
        let allowed = matches!(
            (job.status, to),
            (JobStatus::Queued, JobStatus::Running) | (JobStatus::Running, JobStatus::Done | JobStatus::Error)
        );
        debug_assert!(allowed, "job {id}: {:?} -> {to:?}", job.status);
        if allowed {
            job.status = to;
            match outcome {
                Some(Ok(results)) => job.results = results,
                Some(Err(e)) => job.error = Some(e),
                None => {}
            }
        }
    }
    drop(st);
    shared.changed.notify_all();
}

fn worker(shared: Arc<Shared>) {
    loop {
        let (id, work) = {
            let mut st = shared.lock();
            loop {
                if st.shutdown {
                    return;
                }
                if let Some(next) = st.queue.pop_front() {
                    break next;
                }
                st = shared.changed.wait(st).unwrap_or_else(|e| e.into_inner());
            }
        };
        set_status(&shared, id, JobStatus::Running, None);
        let handle = ProgressHandle { shared: Arc::clone(&shared), id };
        let outcome = catch_unwind(AssertUnwindSafe(|| work(&handle))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(format!("job panicked: {msg}"))
        });
        match outcome {
            Ok(results) => {
                log::info!("job {id} done");
                set_status(&shared, id, JobStatus::Done, Some(Ok(results)));
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                set_status(&shared, id, JobStatus::Error, Some(Err(e)));
            }
        }
    }
}
