//! The stateful greybox fuzzing loop: state and seed selection, mutation,
//! execution over TCP, novelty feedback and implicit state-machine
//! maintenance.
//!
//! Feedback needs no branch instrumentation: novelty is a new node, a new
//! edge or a first-seen response signature. The scheduler, the implicit
//! state machine and all feedback updates live on one logical thread.

mod execute;
mod mutate;

pub use execute::{execute, resolve_endpoint};
pub use mutate::mutate;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterContract;
use crate::corpus::{ResponseSignature, SeedSequence};
use crate::hexutil;
use crate::recorder::{
    should_record, NoveltyClass, RecordAs, TracePair, TraceRecord, TraceStore,
    TRACE_FORMAT_VERSION,
};
use crate::schema::{verify_consistency, StateId, INIT_STATE};

/// Network timeouts of one campaign, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeouts {
    pub connect_ms: u64,
    pub per_response_ms: u64,
    pub inter_message_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            connect_ms: 1000,
            per_response_ms: 300,
            inter_message_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionResult {
    CleanClose,
    Reset,
    Refuse,
    Hang,
}

/// One sent message with everything observed about its response.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageExchange {
    pub request: Vec<u8>,
    pub response: Vec<u8>,
    pub rtt_ms: u64,
    pub timeout: bool,
    /// The server closed or reset the connection during this exchange.
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub exchanges: Vec<MessageExchange>,
    pub connection_result: ConnectionResult,
    pub crash_signal: bool,
    pub per_exchange_states: Vec<Vec<StateId>>,
    pub state_path: Vec<StateId>,
}

/// Per-node scheduling counters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NodeStats {
    pub times_selected: u64,
    pub times_fuzzed: u64,
    pub seeds_reaching: usize,
}

/// The observed response-state graph; source of the n_nodes and n_edges
/// coverage metrics. The reserved INIT node is always present.
#[derive(Debug, Clone)]
pub struct ImplicitStateMachine {
    nodes: BTreeSet<StateId>,
    edges: BTreeSet<(StateId, StateId)>,
    stats: BTreeMap<StateId, NodeStats>,
}

impl Default for ImplicitStateMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl ImplicitStateMachine {
    pub fn new() -> Self {
        let mut nodes = BTreeSet::new();
        nodes.insert(INIT_STATE);
        let mut stats = BTreeMap::new();
        stats.insert(INIT_STATE, NodeStats::default());
        ImplicitStateMachine {
            nodes,
            edges: BTreeSet::new(),
            stats,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = StateId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn contains_node(&self, s: StateId) -> bool {
        self.nodes.contains(&s)
    }

    pub fn stats_mut(&mut self, s: StateId) -> &mut NodeStats {
        self.stats.entry(s).or_default()
    }

    pub fn stats(&self, s: StateId) -> Option<&NodeStats> {
        self.stats.get(&s)
    }

    /// Inserts INIT -> s1 -> s2 ... returning whether any node or edge was
    /// first seen.
    pub fn insert_path(&mut self, path: &[StateId]) -> (bool, bool) {
        let mut new_node = false;
        let mut new_edge = false;
        let mut prev = INIT_STATE;
        for s in path {
            if self.nodes.insert(*s) {
                new_node = true;
                self.stats.entry(*s).or_default();
            }
            if self.edges.insert((prev, *s)) {
                new_edge = true;
            }
            prev = *s;
        }
        (new_node, new_edge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoveltyVerdict {
    pub new_node: bool,
    pub new_edge: bool,
    pub new_signature: bool,
}

impl NoveltyVerdict {
    pub fn any(&self) -> bool {
        self.new_node || self.new_edge || self.new_signature
    }
}

/// Inserts the outcome's state path and signature into the campaign's
/// feedback state.
pub fn update_feedback(
    state_path: &[StateId],
    signature: &ResponseSignature,
    ism: &mut ImplicitStateMachine,
    seen_signatures: &mut HashSet<String>,
) -> NoveltyVerdict {
    let (new_node, new_edge) = ism.insert_path(state_path);
    let new_signature = seen_signatures.insert(signature.key());
    NoveltyVerdict {
        new_node,
        new_edge,
        new_signature,
    }
}

/// Live campaign statistics, rewritten atomically to `stats.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignStats {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub executions: u64,
    pub exec_per_sec: f64,
    pub unique_crash_sequences: usize,
    pub seeds_in_queue: usize,
    pub start_unix: u64,
    pub elapsed_sec: u64,
    pub recording_disabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub protocol: String,
    pub endpoint: String,
    pub budget_seconds: Option<u64>,
    pub budget_executions: Option<u64>,
    pub timeouts: Timeouts,
    pub p_sample: f64,
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    pub campaign_id: String,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("target {0} unreachable at campaign start")]
    TargetUnreachable(String),
    #[error("campaign needs at least one seed")]
    NoSeeds,
    #[error("campaign needs a positive time or execution budget")]
    NoBudget,
    #[error("schema failed consistency verification ({0} findings)")]
    InconsistentSchema(usize),
    #[error("endpoint: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const BASE_ENERGY: u64 = 32;
const NOVELTY_ENERGY_FACTOR: u64 = 4;
const STATS_FLUSH: Duration = Duration::from_secs(5);
/// Grace period for a supervised target to come back after a crash.
const TARGET_WAIT: Duration = Duration::from_secs(10);

struct QueueEntry {
    seq: SeedSequence,
    last_novelty: bool,
}

/// Runs one fuzzing campaign to its budget. Writes `stats.json`, `plot.csv`,
/// `traces/<campaign-id>.jsonl` and `crashes/` under the output directory.
pub fn run_campaign(
    config: &CampaignConfig,
    adapter: &AdapterContract,
    seeds: Vec<SeedSequence>,
) -> Result<CampaignStats, EngineError> {
    let issues = verify_consistency(&adapter.schema);
    if !issues.is_empty() {
        return Err(EngineError::InconsistentSchema(issues.len()));
    }
    if config.budget_seconds.is_none() && config.budget_executions.is_none() {
        return Err(EngineError::NoBudget);
    }

    let mut campaign = Campaign::new(config, adapter)?;
    if config.budget_executions == Some(0) {
        // Degenerate budget: final stats without touching the target.
        campaign.write_outputs()?;
        return Ok(campaign.stats());
    }
    if seeds.is_empty() {
        return Err(EngineError::NoSeeds);
    }
    let endpoint = resolve_endpoint(&config.endpoint)
        .map_err(|e| EngineError::Endpoint(e.to_string()))?;
    if std::net::TcpStream::connect_timeout(
        &endpoint,
        Duration::from_millis(config.timeouts.connect_ms.max(1)),
    )
    .is_err()
    {
        return Err(EngineError::TargetUnreachable(config.endpoint.clone()));
    }

    campaign.run(endpoint, seeds)?;
    campaign.write_outputs()?;
    Ok(campaign.stats())
}

struct Campaign<'a> {
    config: &'a CampaignConfig,
    adapter: &'a AdapterContract,
    rng: ChaCha8Rng,
    ism: ImplicitStateMachine,
    seen_signatures: HashSet<String>,
    queue: Vec<QueueEntry>,
    node_seeds: BTreeMap<StateId, Vec<usize>>,
    store: TraceStore,
    crash_keys: BTreeSet<String>,
    executions: u64,
    started: Instant,
    start_unix: u64,
    last_stats_flush: Instant,
    plot: fs::File,
    last_plot_shape: (usize, usize),
}

impl<'a> Campaign<'a> {
    fn new(config: &'a CampaignConfig, adapter: &'a AdapterContract) -> Result<Self, EngineError> {
        fs::create_dir_all(&config.output_dir)?;
        fs::create_dir_all(config.output_dir.join("crashes"))?;
        let store = TraceStore::open(
            &config
                .output_dir
                .join("traces")
                .join(format!("{}.jsonl", config.campaign_id)),
        );
        let plot = fs::File::create(config.output_dir.join("plot.csv"))?;
        let start_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs();
        Ok(Campaign {
            config,
            adapter,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            ism: ImplicitStateMachine::new(),
            seen_signatures: HashSet::new(),
            queue: Vec::new(),
            node_seeds: BTreeMap::new(),
            store,
            crash_keys: BTreeSet::new(),
            executions: 0,
            started: Instant::now(),
            start_unix,
            last_stats_flush: Instant::now(),
            plot,
            last_plot_shape: (0, 0),
        })
    }

    fn budget_left(&self) -> bool {
        if let Some(secs) = self.config.budget_seconds {
            if self.started.elapsed() >= Duration::from_secs(secs) {
                return false;
            }
        }
        if let Some(execs) = self.config.budget_executions {
            if self.executions >= execs {
                return false;
            }
        }
        true
    }

    fn run(&mut self, endpoint: SocketAddr, seeds: Vec<SeedSequence>) -> Result<(), EngineError> {
        self.plot_row()?;

        // Dry run: every initial seed executes once and joins the queue.
        for seed in seeds {
            if !self.budget_left() {
                break;
            }
            let (outcome, verdict) = self.execute_one(endpoint, &seed)?;
            self.enqueue(seed, &outcome, verdict.any());
        }

        while self.budget_left() {
            let Some(node) = self.select_node() else {
                break;
            };
            let entry_idx = self.select_seed(node);
            self.ism.stats_mut(node).times_selected += 1;

            let energy = if self.queue[entry_idx].last_novelty {
                BASE_ENERGY * NOVELTY_ENERGY_FACTOR
            } else {
                BASE_ENERGY
            };
            let mut round_novelty = false;
            for _ in 0..energy {
                if !self.budget_left() {
                    break;
                }
                let pool: Vec<&SeedSequence> = self.queue.iter().map(|e| &e.seq).collect();
                let mutant = mutate(&self.queue[entry_idx].seq, &self.adapter.schema, &mut self.rng, &pool);
                drop(pool);
                let (outcome, verdict) = self.execute_one(endpoint, &mutant)?;
                if verdict.any() {
                    round_novelty = true;
                    self.enqueue(mutant, &outcome, true);
                }
            }
            self.ism.stats_mut(node).times_fuzzed += 1;
            self.queue[entry_idx].last_novelty = round_novelty;
        }
        Ok(())
    }

    /// Executes one sequence, folds it into feedback, records and persists
    /// crash artifacts. Waits out a supervised-target restart window if the
    /// endpoint is down.
    fn execute_one(
        &mut self,
        endpoint: SocketAddr,
        seed: &SeedSequence,
    ) -> Result<(ExecutionOutcome, NoveltyVerdict), EngineError> {
        let mut outcome = execute(&seed.messages, endpoint, &self.config.timeouts, self.adapter);
        if outcome.connection_result == ConnectionResult::Refuse {
            let wait_started = Instant::now();
            while wait_started.elapsed() < TARGET_WAIT && self.budget_left() {
                std::thread::sleep(Duration::from_millis(100));
                outcome = execute(&seed.messages, endpoint, &self.config.timeouts, self.adapter);
                if outcome.connection_result != ConnectionResult::Refuse {
                    break;
                }
            }
            if outcome.connection_result == ConnectionResult::Refuse {
                return Err(EngineError::TargetUnreachable(self.config.endpoint.clone()));
            }
        }
        self.executions += 1;

        let signature = outcome.signature();
        let verdict = update_feedback(
            &outcome.state_path,
            &signature,
            &mut self.ism,
            &mut self.seen_signatures,
        );
        if verdict.new_node || verdict.new_edge {
            self.plot_row()?;
        }
        if outcome.crash_signal {
            self.persist_crash(seed, &signature)?;
        }

        match should_record(&verdict, &mut self.rng, self.config.p_sample) {
            RecordAs::None => {}
            kind => {
                let novelty = match kind {
                    RecordAs::PathTriggered => NoveltyClass::PathTriggered,
                    _ => NoveltyClass::Sampled,
                };
                let record = self.trace_record(seed, &outcome, novelty);
                self.store.append(record);
            }
        }

        if self.last_stats_flush.elapsed() >= STATS_FLUSH {
            self.write_stats()?;
            self.last_stats_flush = Instant::now();
        }
        Ok((outcome, verdict))
    }

    fn trace_record(
        &self,
        seed: &SeedSequence,
        outcome: &ExecutionOutcome,
        novelty: NoveltyClass,
    ) -> TraceRecord {
        TraceRecord {
            format_version: TRACE_FORMAT_VERSION,
            trace_id: String::new(),
            campaign_id: self.config.campaign_id.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs(),
            protocol: self.config.protocol.clone(),
            seed_id: seed.id.clone(),
            pairs: outcome
                .exchanges
                .iter()
                .map(|e| TracePair {
                    req: hexutil::to_hex(&e.request),
                    resp: hexutil::to_hex(&e.response),
                    timeout: e.timeout,
                    rtt_ms: e.rtt_ms,
                    closed: e.closed,
                })
                .collect(),
            state_path: outcome.state_path.clone(),
            novelty,
            connection_result: outcome.connection_result,
            crash: outcome.crash_signal,
        }
    }

    fn enqueue(&mut self, seq: SeedSequence, outcome: &ExecutionOutcome, last_novelty: bool) {
        let mut reaches: BTreeSet<StateId> = outcome.state_path.iter().copied().collect();
        reaches.insert(INIT_STATE);
        let idx = self.queue.len();
        for s in &reaches {
            self.node_seeds.entry(*s).or_default().push(idx);
            self.ism.stats_mut(*s).seeds_reaching += 1;
        }
        self.queue.push(QueueEntry { seq, last_novelty });
    }

    /// Inverse-frequency weighted choice over nodes that have seeds.
    fn select_node(&mut self) -> Option<StateId> {
        let candidates: Vec<StateId> = self
            .node_seeds
            .keys()
            .copied()
            .filter(|s| !self.node_seeds[s].is_empty())
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let weights: Vec<f64> = candidates
            .iter()
            .map(|s| {
                let fuzzed = self.ism.stats(*s).map(|st| st.times_fuzzed).unwrap_or(0);
                1.0 / (1.0 + fuzzed as f64)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut draw = self.rng.gen::<f64>() * total;
        for (s, w) in candidates.iter().zip(&weights) {
            draw -= w;
            if draw <= 0.0 {
                return Some(*s);
            }
        }
        candidates.last().copied()
    }

    fn select_seed(&mut self, node: StateId) -> usize {
        let list = &self.node_seeds[&node];
        list[self.rng.gen_range(0..list.len())]
    }

    fn persist_crash(
        &mut self,
        seed: &SeedSequence,
        signature: &ResponseSignature,
    ) -> Result<(), EngineError> {
        let key = signature.key();
        if !self.crash_keys.insert(key.clone()) {
            return Ok(());
        }
        let dir = self.config.output_dir.join("crashes");
        let prefix = &key[..12];
        let xml = crate::corpus::export_seeds(std::slice::from_ref(seed));
        fs::write(dir.join(format!("{prefix}.xml")), xml)?;
        let sig_json = serde_json::json!({
            "signature": signature,
            "crash": true,
            "seed_id": seed.id,
        });
        fs::write(
            dir.join(format!("{prefix}.sig.json")),
            serde_json::to_string_pretty(&sig_json).expect("serializes"),
        )?;
        log::warn!("crash artifact persisted: crashes/{prefix}.xml");
        Ok(())
    }

    fn stats(&self) -> CampaignStats {
        let elapsed = self.started.elapsed();
        CampaignStats {
            n_nodes: self.ism.n_nodes(),
            n_edges: self.ism.n_edges(),
            executions: self.executions,
            exec_per_sec: if elapsed.as_secs_f64() > 0.0 {
                self.executions as f64 / elapsed.as_secs_f64()
            } else {
                0.0
            },
            unique_crash_sequences: self.crash_keys.len(),
            seeds_in_queue: self.queue.len(),
            start_unix: self.start_unix,
            elapsed_sec: elapsed.as_secs(),
            recording_disabled: self.store.disabled,
        }
    }

    /// Atomic rewrite: write aside, then rename over.
    fn write_stats(&self) -> Result<(), EngineError> {
        let stats = self.stats();
        let path = self.config.output_dir.join("stats.json");
        let tmp = self.config.output_dir.join("stats.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&stats).expect("serializes"))?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn plot_row(&mut self) -> Result<(), EngineError> {
        let shape = (self.ism.n_nodes(), self.ism.n_edges());
        if shape == self.last_plot_shape {
            return Ok(());
        }
        self.last_plot_shape = shape;
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs();
        writeln!(self.plot, "{},{},{}", epoch, shape.0, shape.1)?;
        self.plot.flush()?;
        Ok(())
    }

    fn write_outputs(&mut self) -> Result<(), EngineError> {
        self.plot_row()?;
        self.write_stats()?;
        Ok(())
    }
}

/// Result of replaying one stored sequence.
#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub state_path: Vec<StateId>,
    pub signature: ResponseSignature,
    pub crash_signal: bool,
    pub connection_result: ConnectionResult,
    /// Whether the derived signature matches a recorded one, when present.
    pub matches_recorded: Option<bool>,
}

/// Executes a sequence once with campaign timeouts and compares the derived
/// signature against a recorded one when available.
pub fn replay(
    messages: &[Vec<u8>],
    endpoint: SocketAddr,
    timeouts: &Timeouts,
    adapter: &AdapterContract,
    recorded: Option<&ResponseSignature>,
) -> ReplayReport {
    let outcome = execute(messages, endpoint, timeouts, adapter);
    let signature = outcome.signature();
    ReplayReport {
        state_path: outcome.state_path.clone(),
        matches_recorded: recorded.map(|r| {
            *r == signature || (r.state_path == signature.state_path && outcome.crash_signal)
        }),
        crash_signal: outcome.crash_signal,
        connection_result: outcome.connection_result,
        signature,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ism_starts_with_init_only() {
        let ism = ImplicitStateMachine::new();
        assert_eq!(ism.n_nodes(), 1);
        assert_eq!(ism.n_edges(), 0);
        assert!(ism.contains_node(INIT_STATE));
    }

    #[test]
    fn first_path_creates_node_and_edge() {
        let mut ism = ImplicitStateMachine::new();
        let mut seen = HashSet::new();
        let sig = ResponseSignature {
            state_path: vec![3],
            response_prefix_hashes: vec![1],
        };
        let v = update_feedback(&[3], &sig, &mut ism, &mut seen);
        assert!(v.new_node && v.new_edge && v.new_signature);
        assert_eq!(ism.n_nodes(), 2);
        assert_eq!(ism.n_edges(), 1);
    }

    #[test]
    fn repeated_path_is_not_novel() {
        let mut ism = ImplicitStateMachine::new();
        let mut seen = HashSet::new();
        let sig = ResponseSignature {
            state_path: vec![3],
            response_prefix_hashes: vec![1],
        };
        update_feedback(&[3], &sig, &mut ism, &mut seen);
        let v = update_feedback(&[3], &sig, &mut ism, &mut seen);
        assert!(!v.any());
    }

    #[test]
    fn extending_path_adds_node_and_edge() {
        let mut ism = ImplicitStateMachine::new();
        let mut seen = HashSet::new();
        let sig1 = ResponseSignature {
            state_path: vec![3],
            response_prefix_hashes: vec![1],
        };
        update_feedback(&[3], &sig1, &mut ism, &mut seen);
        let sig2 = ResponseSignature {
            state_path: vec![3, 0x83],
            response_prefix_hashes: vec![1, 2],
        };
        let v = update_feedback(&[3, 0x83], &sig2, &mut ism, &mut seen);
        assert!(v.new_node && v.new_edge);
        assert_eq!(ism.n_nodes(), 3);
        assert_eq!(ism.n_edges(), 2);
    }

    #[test]
    fn zero_execution_budget_yields_init_only_stats() {
        let dir = tempfile::tempdir().unwrap();
        let config = CampaignConfig {
            protocol: "modbus-tcp".into(),
            endpoint: "127.0.0.1:1".into(),
            budget_seconds: None,
            budget_executions: Some(0),
            timeouts: Timeouts::default(),
            p_sample: 0.0,
            rng_seed: 1,
            output_dir: dir.path().to_path_buf(),
            campaign_id: "t".into(),
        };
        let adapter = crate::adapters::builtin_adapter("modbus-tcp").unwrap();
        let stats = run_campaign(&config, &adapter, vec![]).unwrap();
        assert_eq!(stats.executions, 0);
        assert_eq!(stats.n_nodes, 1);
        assert!(dir.path().join("stats.json").exists());
        assert!(dir.path().join("plot.csv").exists());
    }

    #[test]
    fn missing_budget_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = CampaignConfig {
            protocol: "modbus-tcp".into(),
            endpoint: "127.0.0.1:1".into(),
            budget_seconds: None,
            budget_executions: None,
            timeouts: Timeouts::default(),
            p_sample: 0.0,
            rng_seed: 1,
            output_dir: dir.path().to_path_buf(),
            campaign_id: "t".into(),
        };
        let adapter = crate::adapters::builtin_adapter("modbus-tcp").unwrap();
        assert!(matches!(
            run_campaign(&config, &adapter, vec![]),
            Err(EngineError::NoBudget)
        ));
    }
}
