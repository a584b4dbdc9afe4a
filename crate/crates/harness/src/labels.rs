//! Human labelling: a query queue shared between the pipeline and an HTTP
//! service, plus the label source that blocks an epoch on it.
//!
//! Protocol (all bodies JSON):
//! * `GET /api/queries/next`: the oldest pending [`LabelQuery`], or `204`
//!   with an empty body when there is no work.
//! * `POST /api/labels` with `{"query_id": "...", "label": "first" | "second" | "skip"}`:
//!   `200` on success, `400` for a malformed body, `404` for an unknown or
//!   expired id, `409` when the query is already labelled.
//! * `GET /api/status`: `{"pending": n, "labeled": n, "epoch": n}`.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cdp_core::envs::{EnvState, Environment, OracleReward, Polyline};
use cdp_core::explorer::LabelSource;
use cdp_core::preference::{oracle_label, Label, Labeler, PreferenceDataset, PreferencePair, PreferenceRecord};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Pending,
    Labeled,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySegment {
    /// Points in the environment's plotting frame.
    pub polyline: Polyline,
    pub states: Vec<EnvState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQuery {
    pub query_id: String,
    pub epoch: usize,
    pub first: QuerySegment,
    pub second: QuerySegment,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub status: QueryStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStatus {
    pub pending: usize,
    pub labeled: usize,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct LabelSubmission {
    pub query_id: String,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmitError {
    Unknown,
    Expired,
    AlreadyLabeled,
}

struct Entry {
    query: LabelQuery,
    pair: PreferencePair,
    /// Id of the first issue of this pair; reissues share it.
    origin: String,
    created: Instant,
    label: Option<Label>,
}

struct QueueState {
    entries: HashMap<String, Entry>,
    pending: VecDeque<String>,
    /// origin -> label record, once labelled.
    results: HashMap<String, PreferenceRecord>,
    next_id: u64,
    epoch: usize,
    labeled: usize,
    dataset: Option<PreferenceDataset>,
}

/// Thread-safe query queue. Every mutation happens under one lock, so for a
/// given query exactly one submission can win.
pub struct LabelQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
    ttl: Duration,
}

impl LabelQueue {
    pub fn new(ttl: Duration) -> Self {
        Self {
            state: Mutex::new(QueueState {
                entries: HashMap::new(),
                pending: VecDeque::new(),
                results: HashMap::new(),
                next_id: 0,
                epoch: 0,
                labeled: 0,
                dataset: None,
            }),
            changed: Condvar::new(),
            ttl,
        }
    }

    /// Queue whose labels also append to `dataset` (offline labelling).
    pub fn with_dataset(ttl: Duration, dataset: PreferenceDataset) -> Self {
        let q = Self::new(ttl);
        q.lock().dataset = Some(dataset);
        q
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Adds pairs as pending queries and returns their ids in order.
    pub fn enqueue(&self, epoch: usize, pairs: Vec<PreferencePair>, env: &Environment) -> Result<Vec<String>> {
        let mut st = self.lock();
        st.epoch = epoch;
        let mut ids = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let id = format!("q{}", st.next_id);
            st.next_id += 1;
            let query = LabelQuery {
                query_id: id.clone(),
                epoch,
                first: segment_view(env, &pair.first.states)?,
                second: segment_view(env, &pair.second.states)?,
                created_at: now_ms(),
                status: QueryStatus::Pending,
            };
            st.entries.insert(id.clone(), Entry { query, pair, origin: id.clone(), created: Instant::now(), label: None });
            st.pending.push_back(id.clone());
            ids.push(id);
        }
        drop(st);
        self.changed.notify_all();
        Ok(ids)
    }

    /// Expires pending queries older than the TTL, reissuing each pair under
    /// a fresh id at the back of the queue.
    fn expire_stale(&self, st: &mut QueueState) {
        let now = Instant::now();
        let stale: Vec<String> = st
            .pending
            .iter()
            .filter(|id| st.entries.get(*id).is_some_and(|e| now.duration_since(e.created) >= self.ttl))
            .cloned()
            .collect();
        for id in stale {
            st.pending.retain(|p| p != &id);
            let entry = st.entries.get_mut(&id).expect("pending ids have entries");
            entry.query.status = QueryStatus::Expired;
            let (pair, origin, mut query) = (entry.pair.clone(), entry.origin.clone(), entry.query.clone());
            let fresh = format!("q{}", st.next_id);
            st.next_id += 1;
            query.query_id = fresh.clone();
            query.created_at = now_ms();
            query.status = QueryStatus::Pending;
            st.entries.insert(fresh.clone(), Entry { query, pair, origin, created: now, label: None });
            st.pending.push_back(fresh);
        }
    }

    pub fn next(&self) -> Option<LabelQuery> {
        let mut st = self.lock();
        self.expire_stale(&mut st);
        let id = st.pending.front()?.clone();
        Some(st.entries[&id].query.clone())
    }

    pub fn get(&self, id: &str) -> Option<LabelQuery> {
        self.lock().entries.get(id).map(|e| e.query.clone())
    }

    pub fn submit(&self, id: &str, label: Label) -> std::result::Result<PreferenceRecord, SubmitError> {
        let mut st = self.lock();
        self.expire_stale(&mut st);
        let entry = st.entries.get_mut(id).ok_or(SubmitError::Unknown)?;
        match entry.query.status {
            QueryStatus::Labeled => return Err(SubmitError::AlreadyLabeled),
            QueryStatus::Expired => return Err(SubmitError::Expired),
            QueryStatus::Pending => {}
        }
        entry.query.status = QueryStatus::Labeled;
        entry.label = Some(label);
        let record = PreferenceRecord::new(id, entry.pair.clone(), label, Labeler::Human);
        let origin = entry.origin.clone();
        st.pending.retain(|p| p != id);
        st.labeled += 1;
        if let Some(ds) = st.dataset.as_mut() {
            if let Err(e) = ds.push(record.clone()) {
                tracing::error!("could not append label for {id}: {e}");
            }
        }
        st.results.insert(origin, record.clone());
        drop(st);
        self.changed.notify_all();
        Ok(record)
    }

    pub fn status(&self) -> QueueStatus {
        let mut st = self.lock();
        self.expire_stale(&mut st);
        QueueStatus { pending: st.pending.len(), labeled: st.labeled, epoch: st.epoch }
    }

    /// Records for `origins` labelled so far, keyed by origin.
    fn collected(&self, st: &QueueState, origins: &[String]) -> usize {
        origins.iter().filter(|o| st.results.contains_key(*o)).count()
    }

    /// Blocks until at least `min` of `origins` are labelled or `timeout`
    /// passes. Returns the labelled records per origin (in order) and
    /// withdraws the unlabelled queries.
    pub fn wait_for(
        &self,
        origins: &[String],
        min: usize,
        timeout: Option<Duration>,
    ) -> Vec<Option<PreferenceRecord>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        while self.collected(&st, origins) < min {
            let wait = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        break;
                    }
                    (d - now).min(Duration::from_millis(200))
                }
                None => Duration::from_millis(200),
            };
            st = self.changed.wait_timeout(st, wait).unwrap_or_else(|p| p.into_inner()).0;
            self.expire_stale(&mut st);
        }
        let out: Vec<Option<PreferenceRecord>> = origins.iter().map(|o| st.results.remove(o)).collect();
        // Withdraw whatever is still pending for these pairs.
        let withdrawn: Vec<String> = st
            .pending
            .iter()
            .filter(|id| st.entries.get(*id).is_some_and(|e| origins.contains(&e.origin)))
            .cloned()
            .collect();
        for id in withdrawn {
            st.pending.retain(|p| p != &id);
            if let Some(e) = st.entries.get_mut(&id) {
                e.query.status = QueryStatus::Expired;
            }
        }
        out
    }
}

fn segment_view(env: &Environment, states: &[EnvState]) -> Result<QuerySegment> {
    Ok(QuerySegment { polyline: env.render_trajectory(states)?, states: states.to_vec() })
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Label source backed by the HTTP queue.
pub struct HumanLabels {
    queue: Arc<LabelQueue>,
    env: Environment,
    /// Labels required per batch (0: every query).
    min_labels: usize,
    /// `Some` enables the oracle fallback after this wait.
    fallback: Option<(Duration, OracleReward)>,
}

impl HumanLabels {
    pub fn new(queue: Arc<LabelQueue>, env: Environment, min_labels: usize) -> Self {
        Self { queue, env, min_labels, fallback: None }
    }

    pub fn with_oracle_fallback(mut self, timeout: Duration, oracle: OracleReward) -> Self {
        self.fallback = Some((timeout, oracle));
        self
    }
}

impl LabelSource for HumanLabels {
    fn label(&mut self, epoch: usize, pairs: Vec<PreferencePair>) -> cdp_core::Result<Vec<PreferenceRecord>> {
        let origins = self
            .queue
            .enqueue(epoch, pairs.clone(), &self.env)
            .map_err(|e| cdp_core::Error::State(e.to_string()))?;
        let min = if self.min_labels == 0 { origins.len() } else { self.min_labels.min(origins.len()) };
        let got = self.queue.wait_for(&origins, min, self.fallback.as_ref().map(|(t, _)| *t));
        let mut records = Vec::with_capacity(got.len());
        for ((origin, record), pair) in origins.iter().zip(got).zip(pairs) {
            match (record, &self.fallback) {
                (Some(r), _) => records.push(r),
                (None, Some((_, oracle))) => {
                    let label = oracle_label(&pair, oracle);
                    records.push(PreferenceRecord::new(format!("{origin}-oracle"), pair, label, Labeler::Oracle));
                }
                (None, None) => {}
            }
        }
        Ok(records)
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn next_query(State(queue): State<Arc<LabelQueue>>) -> Response {
    match queue.next() {
        Some(q) => Json(q).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

#[derive(Serialize)]
struct Ack {
    query_id: String,
    label: Label,
    status: QueryStatus,
}

async fn post_label(State(queue): State<Arc<LabelQueue>>, body: Bytes) -> Response {
    let sub: LabelSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed label body: {e}")),
    };
    match queue.submit(&sub.query_id, sub.label) {
        Ok(_) => Json(Ack { query_id: sub.query_id, label: sub.label, status: QueryStatus::Labeled }).into_response(),
        Err(SubmitError::Unknown) => error(StatusCode::NOT_FOUND, format!("unknown query {}", sub.query_id)),
        Err(SubmitError::Expired) => error(StatusCode::NOT_FOUND, format!("query {} expired", sub.query_id)),
        Err(SubmitError::AlreadyLabeled) => {
            error(StatusCode::CONFLICT, format!("query {} is already labeled", sub.query_id))
        }
    }
}

async fn status(State(queue): State<Arc<LabelQueue>>) -> Json<QueueStatus> {
    Json(queue.status())
}

pub fn router(queue: Arc<LabelQueue>) -> Router {
    Router::new()
        .route("/api/queries/next", get(next_query))
        .route("/api/labels", post(post_label))
        .route("/api/status", get(status))
        .with_state(queue)
}

/// A label service running on its own thread and runtime.
pub struct LabelServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl LabelServer {
    pub fn start(queue: Arc<LabelQueue>, bind: &str) -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(queue);
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    tracing::error!("label service stopped: {e}");
                }
            });
        });
        tracing::info!("label service listening on http://{addr}");
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the service exits.
    pub fn join(mut self) -> Result<()> {
        if let Some(t) = self.thread.take() {
            t.join().map_err(|_| HarnessError::Input("label service thread panicked".into()))?;
        }
        Ok(())
    }
}

impl Drop for LabelServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdp_core::envs::EnvConfig;
    use cdp_core::preference::Segment;

    fn pair(k: f64) -> PreferencePair {
        let seg = |x: f64| Segment { episode: 0, offset: 0, states: vec![EnvState::new(x, 0.0), EnvState::new(x, 0.1)] };
        PreferencePair { first: seg(k), second: seg(-k) }
    }

    fn env() -> Environment {
        Environment::new(EnvConfig::room_nav_2d()).unwrap()
    }

    #[test]
    fn labels_once_then_conflicts() {
        let q = LabelQueue::new(Duration::from_secs(600));
        let ids = q.enqueue(0, vec![pair(0.1)], &env()).unwrap();
        assert_eq!(q.submit(&ids[0], Label::First).unwrap().label, Label::First);
        assert_eq!(q.submit(&ids[0], Label::Second), Err(SubmitError::AlreadyLabeled));
        assert_eq!(q.submit("nope", Label::First), Err(SubmitError::Unknown));
        assert_eq!(q.status(), QueueStatus { pending: 0, labeled: 1, epoch: 0 });
        assert!(q.next().is_none());
    }

    #[test]
    fn expired_queries_are_reissued_under_new_ids() {
        let q = LabelQueue::new(Duration::from_millis(0));
        let ids = q.enqueue(2, vec![pair(0.3)], &env()).unwrap();
        let next = q.next().unwrap();
        assert_ne!(next.query_id, ids[0]);
        assert_eq!(q.get(&ids[0]).unwrap().status, QueryStatus::Expired);
        assert_eq!(q.submit(&ids[0], Label::First), Err(SubmitError::Expired));
    }

    #[test]
    fn fallback_fills_unlabelled_pairs() {
        let q = Arc::new(LabelQueue::new(Duration::from_secs(600)));
        let env = env();
        let mut src = HumanLabels::new(q.clone(), env.clone(), 0)
            .with_oracle_fallback(Duration::from_millis(10), env.oracle());
        let recs = src.label(0, vec![pair(0.5), pair(0.2)]).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.labeler == Labeler::Oracle));
        assert_eq!(q.status().pending, 0);
    }
}
