//! Deterministic simulator of rollout/training scheduling.
//!
//! Models E rollout engines feeding one trainer. Plain mode: engines generate
//! a rollout batch greedily, the trainer consumes training-batch slices as
//! they complete, weights sync after the batch's last step, and no engine may
//! start the next batch before the sync lands — fast engines idle behind
//! stragglers and the trainer tail. Async mode adds a rollout buffer: engines
//! that would otherwise idle keep generating under the previous adapter
//! version, and those samples displace fresh ones in the next cycle's quota.
//!
//! Time is fixed-point ticks (1e6 per time unit) so traces are bit-identical
//! across platforms for a given (config, seed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

pub const TICKS_PER_UNIT: u64 = 1_000_000;

/// Fixed-point simulation time.
pub type Ticks = u64;

pub fn to_ticks(units: f64) -> Ticks {
    ((units * TICKS_PER_UNIT as f64).round() as u64).max(1)
}

pub fn to_units(ticks: Ticks) -> f64 {
    ticks as f64 / TICKS_PER_UNIT as f64
}

/// Per-sample generation-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum GenTime {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl GenTime {
    fn validate(&self) -> Result<(), SchedError> {
        let ok = match *self {
            GenTime::Constant { value } => value > 0.0 && value.is_finite(),
            GenTime::Uniform { low, high } => {
                low > 0.0 && high > low && low.is_finite() && high.is_finite()
            }
            GenTime::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            GenTime::Lognormal { mu, sigma } => mu.is_finite() && sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SchedError::InvalidConfig(format!(
                "bad generation-time parameters: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_engines: u32,
    /// Samples produced per cycle.
    pub rollout_batch: u64,
    /// Samples consumed per training step; must divide rollout_batch.
    pub training_batch: u64,
    /// Buffered samples an idle engine may generate per cycle under the
    /// previous adapter (0 behaves like plain GRPO). At most rollout_batch,
    /// since buffered samples displace fresh ones in the next cycle.
    pub buffer_size: u64,
    pub gen_time: GenTime,
    pub train_step_time: f64,
    pub sync_time: f64,
    /// Rollout/training cycles to simulate.
    pub num_cycles: u32,
    pub seed: u64,
    /// Hold every training step until the full rollout batch is done.
    pub strict_barrier: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_engines: 8,
            rollout_batch: 512,
            training_batch: 64,
            buffer_size: 512,
            gen_time: GenTime::Lognormal { mu: 0.0, sigma: 1.0 },
            train_step_time: 1.0,
            sync_time: 0.5,
            num_cycles: 4,
            seed: 0,
            strict_barrier: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.num_engines < 1 {
            return Err(SchedError::InvalidConfig("num_engines must be >= 1".into()));
        }
        if self.rollout_batch < 1 || self.training_batch < 1 {
            return Err(SchedError::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if self.rollout_batch % self.training_batch != 0 {
            return Err(SchedError::InvalidConfig(format!(
                "rollout_batch {} must be a multiple of training_batch {}",
                self.rollout_batch, self.training_batch
            )));
        }
        if self.buffer_size > self.rollout_batch {
            return Err(SchedError::InvalidConfig(format!(
                "buffer_size {} cannot exceed rollout_batch {}",
                self.buffer_size, self.rollout_batch
            )));
        }
        if self.num_cycles < 1 {
            return Err(SchedError::InvalidConfig("num_cycles must be >= 1".into()));
        }
        for (name, v) in [
            ("train_step_time", self.train_step_time),
            ("sync_time", self.sync_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SchedError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        self.gen_time.validate()
    }
}

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("async mode needs buffer_size > 0")]
    ZeroBuffer,
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("compare needs at least one seed")]
    NoSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GenEnd,
    TrainEnd,
    Sync,
    IdleEnd,
    IdleStart,
    TrainStart,
    GenStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum Actor {
    Trainer,
    Engine(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: Ticks,
    pub actor: Actor,
    pub kind: EventKind,
    pub sample: Option<u64>,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Fresh,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: u64,
    /// Cycle whose training consumes (or would consume) this sample.
    pub cycle: u32,
    pub kind: SampleKind,
    /// Adapter version current at gen_start.
    pub version: u32,
    pub engine: u32,
    pub start: Ticks,
    pub end: Ticks,
    pub consumed_by: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepInfo {
    pub cycle: u32,
    pub index: u32,
    pub start: Ticks,
    pub end: Ticks,
    pub samples: Vec<u64>,
    /// Version this step contributes to producing.
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub mode: Mode,
    pub num_engines: u32,
    pub events: Vec<Event>,
    pub samples: Vec<SampleInfo>,
    pub steps: Vec<TrainStepInfo>,
    /// (cycle, start, end) of each weight sync.
    pub syncs: Vec<(u32, Ticks, Ticks)>,
    pub makespan: Ticks,
    pub per_engine_idle: Vec<Ticks>,
    /// Buffered samples never consumed because the run ended.
    pub leftover_buffer: Vec<u64>,
}

pub fn simulate_plain(cfg: &SimConfig) -> Result<ScheduleTrace, SchedError> {
    cfg.validate()?;
    simulate(cfg, Mode::Plain)
}

pub fn simulate_async(cfg: &SimConfig) -> Result<ScheduleTrace, SchedError> {
    cfg.validate()?;
    if cfg.buffer_size == 0 {
        return Err(SchedError::ZeroBuffer);
    }
    simulate(cfg, Mode::Async)
}

/// Lazily extended stream of per-sample generation durations; sample `id`
/// always takes the `id`-th draw, which is what gives plain and async runs
/// common random numbers under the same seed.
struct DurationStream {
    rng: ChaCha8Rng,
    gen_time: GenTime,
    cache: Vec<Ticks>,
}

impl DurationStream {
    fn new(cfg: &SimConfig) -> Self {
        DurationStream {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            gen_time: cfg.gen_time,
            cache: Vec::new(),
        }
    }

    fn get(&mut self, id: u64) -> Ticks {
        while self.cache.len() <= id as usize {
            let units = match self.gen_time {
                GenTime::Constant { value } => value,
                GenTime::Uniform { low, high } => {
                    rand_distr::Uniform::new(low, high).sample(&mut self.rng)
                }
                GenTime::Exponential { mean } => {
                    rand_distr::Exp::new(1.0 / mean)
                        .expect("validated")
                        .sample(&mut self.rng)
                }
                GenTime::Lognormal { mu, sigma } => {
                    rand_distr::LogNormal::new(mu, sigma)
                        .expect("validated")
                        .sample(&mut self.rng)
                }
            };
            self.cache.push(to_ticks(units));
        }
        self.cache[id as usize]
    }
}

fn simulate(cfg: &SimConfig, mode: Mode) -> Result<ScheduleTrace, SchedError> {
    let engines = cfg.num_engines;
    let batch = cfg.rollout_batch;
    let steps_per_cycle = (batch / cfg.training_batch) as u32;
    let train_ticks = to_ticks(cfg.train_step_time);
    let sync_ticks = to_ticks(cfg.sync_time);
    let buffer_cap = match mode {
        Mode::Plain => 0,
        Mode::Async => cfg.buffer_size,
    };

    let mut durations = DurationStream::new(cfg);
    let mut events: Vec<Event> = Vec::new();
    let mut samples: Vec<SampleInfo> = Vec::new();
    let mut steps: Vec<TrainStepInfo> = Vec::new();
    let mut syncs: Vec<(u32, Ticks, Ticks)> = Vec::new();

    // (free_at, engine): min-heap pops the earliest-free, lowest-id engine.
    let mut heap: BinaryHeap<Reverse<(Ticks, u32)>> = (0..engines)
        .map(|e| Reverse((0, e)))
        .collect();
    let mut trainer_free: Ticks = 0;
    let mut sync_end_prev: Ticks = 0;
    let mut next_id: u64 = 0;
    // Version the engines currently have loaded (fresh samples of this cycle
    // and buffer samples during this cycle's training both use it).
    let mut live_version: u32 = 0;
    // Buffered (gen_end, id) pairs carried into the coming cycle.
    let mut carried: Vec<(Ticks, u64)> = Vec::new();

    for cycle in 1..=cfg.num_cycles {
        let mut ready: Vec<(Ticks, u64)> = std::mem::take(&mut carried);
        let fresh_needed = batch - ready.len() as u64;

        for _ in 0..fresh_needed {
            let Reverse((free, engine)) = heap.pop().expect("engine heap never empty");
            let start = free.max(sync_end_prev);
            let id = next_id;
            next_id += 1;
            let end = start + durations.get(id);
            samples.push(SampleInfo {
                id,
                cycle,
                kind: SampleKind::Fresh,
                version: live_version,
                engine,
                start,
                end,
                consumed_by: None,
            });
            events.push(Event {
                t: start,
                actor: Actor::Engine(engine),
                kind: EventKind::GenStart,
                sample: Some(id),
                version: live_version,
            });
            events.push(Event {
                t: end,
                actor: Actor::Engine(engine),
                kind: EventKind::GenEnd,
                sample: Some(id),
                version: live_version,
            });
            ready.push((end, id));
            heap.push(Reverse((end, engine)));
        }

        ready.sort_unstable();
        let barrier = ready.last().expect("batch not empty").0;
        for j in 0..steps_per_cycle {
            let data_ready = if cfg.strict_barrier {
                barrier
            } else {
                ready[((j as u64 + 1) * cfg.training_batch - 1) as usize].0
            };
            let start = trainer_free.max(data_ready);
            let end = start + train_ticks;
            let consumed: Vec<u64> = ready
                [(j as u64 * cfg.training_batch) as usize..((j as u64 + 1) * cfg.training_batch) as usize]
                .iter()
                .map(|&(_, id)| id)
                .collect();
            for &id in &consumed {
                samples[id as usize].consumed_by = Some((cycle, j));
            }
            events.push(Event {
                t: start,
                actor: Actor::Trainer,
                kind: EventKind::TrainStart,
                sample: None,
                version: cycle,
            });
            events.push(Event {
                t: end,
                actor: Actor::Trainer,
                kind: EventKind::TrainEnd,
                sample: None,
                version: cycle,
            });
            steps.push(TrainStepInfo {
                cycle,
                index: j,
                start,
                end,
                samples: consumed,
                version: cycle,
            });
            trainer_free = end;
        }

        let sync_start = trainer_free;
        let sync_end = sync_start + sync_ticks;
        events.push(Event {
            t: sync_end,
            actor: Actor::Trainer,
            kind: EventKind::Sync,
            sample: None,
            version: cycle,
        });
        syncs.push((cycle, sync_start, sync_end));
        trainer_free = sync_end;

        // Rollout buffer: engines that would otherwise idle before the sync
        // lands keep generating under the still-loaded adapter.
        let mut buffered = 0u64;
        while buffered < buffer_cap {
            let Reverse((free, engine)) = *heap.peek().expect("engine heap never empty");
            let start = free.max(sync_end_prev);
            if start >= sync_end {
                break;
            }
            heap.pop();
            let id = next_id;
            next_id += 1;
            let end = start + durations.get(id);
            samples.push(SampleInfo {
                id,
                cycle: cycle + 1,
                kind: SampleKind::Buffer,
                version: live_version,
                engine,
                start,
                end,
                consumed_by: None,
            });
            events.push(Event {
                t: start,
                actor: Actor::Engine(engine),
                kind: EventKind::GenStart,
                sample: Some(id),
                version: live_version,
            });
            events.push(Event {
                t: end,
                actor: Actor::Engine(engine),
                kind: EventKind::GenEnd,
                sample: Some(id),
                version: live_version,
            });
            carried.push((end, id));
            heap.push(Reverse((end, engine)));
            buffered += 1;
        }

        live_version = cycle;
        sync_end_prev = sync_end;
    }

    let leftover_buffer: Vec<u64> = carried.iter().map(|&(_, id)| id).collect();
    let makespan = samples
        .iter()
        .map(|s| s.end)
        .chain(std::iter::once(trainer_free))
        .max()
        .unwrap_or(0);

    // Idle intervals per engine: gaps between generations, plus the lead-in
    // and the tail up to the makespan.
    let mut per_engine_idle = vec![0u64; engines as usize];
    for engine in 0..engines {
        let mut busy: Vec<(Ticks, Ticks)> = samples
            .iter()
            .filter(|s| s.engine == engine)
            .map(|s| (s.start, s.end))
            .collect();
        busy.sort_unstable();
        let mut cursor: Ticks = 0;
        let mut gaps: Vec<(Ticks, Ticks)> = Vec::new();
        for (start, end) in busy {
            if start > cursor {
                gaps.push((cursor, start));
            }
            cursor = cursor.max(end);
        }
        if cursor < makespan {
            gaps.push((cursor, makespan));
        }
        for (start, end) in gaps {
            per_engine_idle[engine as usize] += end - start;
            events.push(Event {
                t: start,
                actor: Actor::Engine(engine),
                kind: EventKind::IdleStart,
                sample: None,
                version: 0,
            });
            events.push(Event {
                t: end,
                actor: Actor::Engine(engine),
                kind: EventKind::IdleEnd,
                sample: None,
                version: 0,
            });
        }
    }

    events.sort_by_key(|e| (e.t, e.kind, e.actor, e.sample));

    Ok(ScheduleTrace {
        mode,
        num_engines: engines,
        events,
        samples,
        steps,
        syncs,
        makespan,
        per_engine_idle,
        leftover_buffer,
    })
}

/// Idle statistics derived from a trace, with structural validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleReport {
    pub per_engine_idle: Vec<Ticks>,
    pub total_idle: Ticks,
    /// total idle / (num_engines * makespan).
    pub idle_fraction: f64,
    pub makespan: Ticks,
    /// Idle time spent while at least one peer was still generating a fresh
    /// sample of the current batch.
    pub straggler_idle: Ticks,
}

pub fn idle_report(trace: &ScheduleTrace) -> Result<IdleReport, SchedError> {
    validate_trace(trace)?;
    let total_idle: Ticks = trace.per_engine_idle.iter().sum();
    let denom = trace.num_engines as u128 * trace.makespan as u128;
    let idle_fraction = if denom == 0 {
        0.0
    } else {
        total_idle as f64 / denom as f64
    };

    // Union of fresh-generation-in-progress intervals.
    let mut fresh: Vec<(Ticks, Ticks)> = trace
        .samples
        .iter()
        .filter(|s| s.kind == SampleKind::Fresh)
        .map(|s| (s.start, s.end))
        .collect();
    fresh.sort_unstable();
    let mut fresh_union: Vec<(Ticks, Ticks)> = Vec::new();
    for (start, end) in fresh {
        match fresh_union.last_mut() {
            Some((_, last_end)) if start <= *last_end => *last_end = (*last_end).max(end),
            _ => fresh_union.push((start, end)),
        }
    }

    let mut straggler_idle: Ticks = 0;
    let mut open: std::collections::BTreeMap<u32, Ticks> = std::collections::BTreeMap::new();
    for event in &trace.events {
        if let Actor::Engine(e) = event.actor {
            match event.kind {
                EventKind::IdleStart => {
                    open.insert(e, event.t);
                }
                EventKind::IdleEnd => {
                    let start = open.remove(&e).ok_or_else(|| {
                        SchedError::MalformedTrace(format!("idle_end without idle_start on engine {e}"))
                    })?;
                    straggler_idle += overlap(start, event.t, &fresh_union);
                }
                _ => {}
            }
        }
    }
    if !open.is_empty() {
        return Err(SchedError::MalformedTrace("unclosed idle interval".into()));
    }

    Ok(IdleReport {
        per_engine_idle: trace.per_engine_idle.clone(),
        total_idle,
        idle_fraction,
        makespan: trace.makespan,
        straggler_idle,
    })
}

fn overlap(start: Ticks, end: Ticks, union: &[(Ticks, Ticks)]) -> Ticks {
    let mut total = 0;
    for &(s, e) in union {
        let lo = s.max(start);
        let hi = e.min(end);
        if hi > lo {
            total += hi - lo;
        }
    }
    total
}

fn validate_trace(trace: &ScheduleTrace) -> Result<(), SchedError> {
    // Events must be time-ordered.
    for pair in trace.events.windows(2) {
        if pair[1].t < pair[0].t {
            return Err(SchedError::MalformedTrace("events out of order".into()));
        }
    }
    // An engine never generates two samples at once.
    for engine in 0..trace.num_engines {
        let mut busy: Vec<(Ticks, Ticks)> = trace
            .samples
            .iter()
            .filter(|s| s.engine == engine)
            .map(|s| (s.start, s.end))
            .collect();
        busy.sort_unstable();
        for pair in busy.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(SchedError::MalformedTrace(format!(
                    "engine {engine} generates two samples at once"
                )));
            }
        }
    }
    // Causality: every consumed sample finished before its step started.
    for step in &trace.steps {
        for &id in &step.samples {
            let sample = trace
                .samples
                .get(id as usize)
                .ok_or_else(|| SchedError::MalformedTrace(format!("unknown sample {id}")))?;
            if sample.end > step.start {
                return Err(SchedError::MalformedTrace(format!(
                    "sample {id} consumed at {} before generation finished at {}",
                    step.start, sample.end
                )));
            }
        }
    }
    Ok(())
}

/// Summary of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub makespan: Ticks,
    pub total_idle: Ticks,
    pub idle_fraction: f64,
    pub straggler_idle: Ticks,
}

impl From<&IdleReport> for RunSummary {
    fn from(r: &IdleReport) -> Self {
        RunSummary {
            makespan: r.makespan,
            total_idle: r.total_idle,
            idle_fraction: r.idle_fraction,
            straggler_idle: r.straggler_idle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub plain: RunSummary,
    pub asynchronous: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

/// Run both modes per seed with common random numbers (the same seed drives
/// the same per-sample duration stream in each mode).
pub fn compare(cfg: &SimConfig, seeds: &[u64]) -> Result<ComparisonReport, SchedError> {
    if seeds.is_empty() {
        return Err(SchedError::NoSeeds);
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seeded = SimConfig { seed, ..cfg.clone() };
        let plain = idle_report(&simulate_plain(&seeded)?)?;
        let asynchronous = idle_report(&simulate_async(&seeded)?)?;
        rows.push(ComparisonRow {
            seed,
            plain: RunSummary::from(&plain),
            asynchronous: RunSummary::from(&asynchronous),
        });
    }
    Ok(ComparisonReport { rows })
}

/// Line-delimited event export plus a trailing summary record.
pub fn export_trace(trace: &ScheduleTrace) -> String {
    let mut out = String::new();
    for event in &trace.events {
        let actor = match event.actor {
            Actor::Trainer => "trainer".to_string(),
            Actor::Engine(e) => format!("engine-{e}"),
        };
        let kind = match event.kind {
            EventKind::GenStart => "gen_start",
            EventKind::GenEnd => "gen_end",
            EventKind::TrainStart => "train_start",
            EventKind::TrainEnd => "train_end",
            EventKind::Sync => "sync",
            EventKind::IdleStart => "idle_start",
            EventKind::IdleEnd => "idle_end",
        };
        let record = serde_json::json!({
            "t": to_units(event.t),
            "actor": actor,
            "kind": kind,
            "sample": event.sample,
            "version": event.version,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    let summary = serde_json::json!({
        "summary": {
            "mode": trace.mode,
            "makespan": to_units(trace.makespan),
            "per_engine_idle": trace.per_engine_idle.iter().map(|&t| to_units(t)).collect::<Vec<_>>(),
            "leftover_buffer": trace.leftover_buffer,
        }
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}

/// Plain-text Gantt-style timeline: one row per engine plus the trainer.
/// `#` fresh generation, `b` buffer generation, `T` training, `s` sync,
/// `.` idle.
pub fn render_timeline(trace: &ScheduleTrace, width: usize) -> String {
    let width = width.max(10);
    let span = trace.makespan.max(1);
    let mut rows: Vec<String> = Vec::new();
    let at = |col: usize| -> Ticks {
        ((col as u128 * 2 + 1) * span as u128 / (width as u128 * 2)) as Ticks
    };
    for engine in 0..trace.num_engines {
        let mut row = String::with_capacity(width + 12);
        row.push_str(&format!("engine-{engine:<2} |"));
        for col in 0..width {
            let t = at(col);
            let mark = trace
                .samples
                .iter()
                .find(|s| s.engine == engine && s.start <= t && t < s.end)
                .map(|s| match s.kind {
                    SampleKind::Fresh => '#',
                    SampleKind::Buffer => 'b',
                })
                .unwrap_or('.');
            row.push(mark);
        }
        row.push('|');
        rows.push(row);
    }
    let mut trainer = String::with_capacity(width + 12);
    trainer.push_str("trainer   |");
    for col in 0..width {
        let t = at(col);
        let training = trace.steps.iter().any(|s| s.start <= t && t < s.end);
        let syncing = trace.syncs.iter().any(|&(_, s, e)| s <= t && t < e);
        trainer.push(if training {
            'T'
        } else if syncing {
            's'
        } else {
            '.'
        });
    }
    trainer.push('|');
    rows.push(trainer);
    rows.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SimConfig {
        SimConfig {
            num_engines: 1,
            rollout_batch: 1,
            training_batch: 1,
            buffer_size: 1,
            gen_time: GenTime::Constant { value: 2.0 },
            train_step_time: 1.0,
            sync_time: 1.0,
            num_cycles: 2,
            seed: 0,
            strict_barrier: false,
        }
    }

    const U: Ticks = TICKS_PER_UNIT;

    #[test]
    fn hand_stepped_single_engine_plain_trace() {
        let trace = simulate_plain(&tiny_cfg()).unwrap();
        // cycle 1: gen [0,2), train [2,3), sync at 4
        // cycle 2: gen [4,6), train [6,7), sync at 8
        assert_eq!(trace.makespan, 8 * U);
        assert_eq!(trace.per_engine_idle, vec![4 * U]);
        let sample_spans: Vec<(Ticks, Ticks)> =
            trace.samples.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(sample_spans, vec![(0, 2 * U), (4 * U, 6 * U)]);
        let step_spans: Vec<(Ticks, Ticks)> =
            trace.steps.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(step_spans, vec![(2 * U, 3 * U), (6 * U, 7 * U)]);
        assert_eq!(trace.syncs, vec![(1, 3 * U, 4 * U), (2, 7 * U, 8 * U)]);

        let report = idle_report(&trace).unwrap();
        assert!((report.idle_fraction - 0.5).abs() < 1e-12);
        assert_eq!(report.straggler_idle, 0);
    }

    #[test]
    fn async_buffer_masks_single_engine_idle() {
        let trace = simulate_async(&tiny_cfg()).unwrap();
        // cycle 1: fresh [0,2), buffer [2,4); cycle 2 trains the buffered
        // sample at [4,5), sync at 6, buffer [4,6) carries out.
        assert_eq!(trace.makespan, 6 * U);
        assert_eq!(trace.per_engine_idle, vec![0]);
        assert_eq!(trace.leftover_buffer.len(), 1);
        let report = idle_report(&trace).unwrap();
        assert_eq!(report.idle_fraction, 0.0);
        assert_eq!(report.straggler_idle, 0);
    }

    #[test]
    fn constant_times_divide_evenly_no_straggler_idle() {
        let cfg = SimConfig {
            num_engines: 4,
            rollout_batch: 8,
            training_batch: 4,
            buffer_size: 0,
            gen_time: GenTime::Constant { value: 1.0 },
            train_step_time: 0.5,
            sync_time: 0.25,
            num_cycles: 3,
            seed: 1,
            strict_barrier: false,
        };
        let trace = simulate_plain(&cfg).unwrap();
        let report = idle_report(&trace).unwrap();
        assert_eq!(report.straggler_idle, 0);
        // All engines end each batch simultaneously.
        for cycle in 1..=3u32 {
            let ends: std::collections::BTreeSet<Ticks> = trace
                .samples
                .iter()
                .filter(|s| s.cycle == cycle)
                .map(|s| s.end)
                .collect();
            assert_eq!(ends.len(), 1, "cycle {cycle} ends: {ends:?}");
        }
    }

    #[test]
    fn traces_are_bit_identical_per_seed() {
        let cfg = SimConfig {
            num_engines: 8,
            rollout_batch: 32,
            training_batch: 8,
            buffer_size: 16,
            gen_time: GenTime::Exponential { mean: 1.0 },
            num_cycles: 3,
            seed: 7,
            ..SimConfig::default()
        };
        let a = simulate_plain(&cfg).unwrap();
        let b = simulate_plain(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let a = simulate_async(&cfg).unwrap();
        let b = simulate_async(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let other = simulate_async(&SimConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&other).unwrap()
        );
    }

    #[test]
    fn big_buffer_leaves_no_idle_during_training() {
        // Generation dominates, so the buffer easily covers every training
        // and sync window: hand-stepping gives each engine the back-to-back
        // schedule fresh [0,8) buf [8,10) fresh [10,16) buf [16,18)
        // fresh [18,24) buf [24,26) with zero idle anywhere.
        let cfg = SimConfig {
            num_engines: 2,
            rollout_batch: 8,
            training_batch: 4,
            buffer_size: 8,
            gen_time: GenTime::Constant { value: 2.0 },
            train_step_time: 0.5,
            sync_time: 0.5,
            num_cycles: 3,
            seed: 0,
            strict_barrier: false,
        };
        let trace = simulate_async(&cfg).unwrap();
        let report = idle_report(&trace).unwrap();
        assert_eq!(report.total_idle, 0, "{}", render_timeline(&trace, 60));
        assert_eq!(trace.makespan, 26 * U);
    }

    #[test]
    fn paper_default_config_shape() {
        let cfg = SimConfig {
            num_cycles: 2,
            ..SimConfig::default()
        };
        assert_eq!(cfg.rollout_batch, 512);
        assert_eq!(cfg.training_batch, 64);
        assert_eq!(cfg.buffer_size, 512);
        let trace = simulate_async(&cfg).unwrap();
        // Buffered-per-cycle never exceeds buffer_size.
        for cycle in 2..=2u32 {
            let buffered = trace
                .samples
                .iter()
                .filter(|s| s.kind == SampleKind::Buffer && s.cycle == cycle)
                .count() as u64;
            assert!(buffered <= cfg.buffer_size);
        }
        // Each cycle trains exactly rollout_batch samples in batch/64 steps.
        for cycle in 1..=2u32 {
            let consumed: u64 = trace
                .steps
                .iter()
                .filter(|s| s.cycle == cycle)
                .map(|s| s.samples.len() as u64)
                .sum();
            assert_eq!(consumed, 512);
            assert_eq!(
                trace.steps.iter().filter(|s| s.cycle == cycle).count(),
                8
            );
        }
    }

    #[test]
    fn figure_one_regime_six_to_one_with_two_to_one_buffer() {
        let cfg = SimConfig {
            num_engines: 6,
            rollout_batch: 96,
            training_batch: 16, // 6:1 rollout:training
            buffer_size: 32,    // 2:1 buffer:training
            gen_time: GenTime::Lognormal { mu: 0.0, sigma: 0.8 },
            train_step_time: 1.0,
            sync_time: 0.5,
            num_cycles: 3,
            seed: 11,
            strict_barrier: false,
        };
        let trace = simulate_async(&cfg).unwrap();
        for cycle in 2..=3u32 {
            let buffered = trace
                .samples
                .iter()
                .filter(|s| s.kind == SampleKind::Buffer && s.cycle == cycle)
                .count() as u64;
            assert!(buffered <= 32, "cycle {cycle} buffered {buffered}");
            let fresh = trace
                .samples
                .iter()
                .filter(|s| s.kind == SampleKind::Fresh && s.cycle == cycle)
                .count() as u64;
            assert_eq!(fresh + buffered_into(&trace, cycle), 96);
        }
        let plain = idle_report(&simulate_plain(&cfg).unwrap()).unwrap();
        let asynchronous = idle_report(&trace).unwrap();
        assert!(asynchronous.straggler_idle <= plain.straggler_idle);
    }

    fn buffered_into(trace: &ScheduleTrace, cycle: u32) -> u64 {
        trace
            .samples
            .iter()
            .filter(|s| s.kind == SampleKind::Buffer && s.cycle == cycle)
            .count() as u64
    }

    #[test]
    fn conservation_and_versions() {
        let cfg = SimConfig {
            num_engines: 3,
            rollout_batch: 12,
            training_batch: 4,
            buffer_size: 6,
            gen_time: GenTime::Uniform { low: 0.5, high: 2.0 },
            num_cycles: 4,
            seed: 3,
            ..SimConfig::default()
        };
        let trace = simulate_async(&cfg).unwrap();
        for sample in &trace.samples {
            match sample.consumed_by {
                Some((cycle, _)) => assert_eq!(cycle, sample.cycle),
                None => assert!(
                    trace.leftover_buffer.contains(&sample.id),
                    "sample {} neither consumed nor leftover",
                    sample.id
                ),
            }
        }
        // Fresh samples of cycle n use version n-1; buffer samples generated
        // during cycle n's training (consumed in n+1) also use n-1.
        for sample in &trace.samples {
            match sample.kind {
                SampleKind::Fresh => assert_eq!(sample.version, sample.cycle - 1),
                SampleKind::Buffer => assert_eq!(sample.version, sample.cycle - 2),
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SimConfig {
            rollout_batch: 10,
            training_batch: 4,
            ..SimConfig::default()
        };
        assert!(simulate_plain(&bad).is_err());
        let bad = SimConfig {
            buffer_size: 1024,
            ..SimConfig::default()
        };
        assert!(simulate_plain(&bad).is_err());
        let bad = SimConfig {
            sync_time: 0.0,
            ..SimConfig::default()
        };
        assert!(simulate_plain(&bad).is_err());
        assert!(matches!(
            simulate_async(&SimConfig {
                buffer_size: 0,
                ..SimConfig::default()
            }),
            Err(SchedError::ZeroBuffer)
        ));
        assert!(matches!(
            compare(&SimConfig::default(), &[]),
            Err(SchedError::NoSeeds)
        ));
    }

    #[test]
    fn compare_produces_paired_rows() {
        let cfg = SimConfig {
            num_engines: 4,
            rollout_batch: 16,
            training_batch: 4,
            buffer_size: 8,
            num_cycles: 2,
            ..SimConfig::default()
        };
        let report = compare(&cfg, &[1, 2, 3]).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!(row.plain.makespan > 0);
            assert!(row.asynchronous.makespan > 0);
            assert!((0.0..=1.0).contains(&row.plain.idle_fraction));
            assert!((0.0..=1.0).contains(&row.asynchronous.idle_fraction));
        }
    }

    #[test]
    fn export_and_timeline_render() {
        let trace = simulate_plain(&tiny_cfg()).unwrap();
        let exported = export_trace(&trace);
        let lines: Vec<&str> = exported.lines().collect();
        assert_eq!(lines.len(), trace.events.len() + 1);
        for line in &lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.is_object());
        }
        assert!(lines.last().unwrap().contains("summary"));

        let timeline = render_timeline(&trace, 40);
        assert_eq!(timeline.lines().count(), 2); // 1 engine + trainer
        assert!(timeline.contains('#'));
        assert!(timeline.contains('T'));
    }

    #[test]
    fn malformed_trace_detected() {
        let mut trace = simulate_plain(&tiny_cfg()).unwrap();
        trace.steps[0].start = 0; // consume before generation finished
        assert!(matches!(
            idle_report(&trace),
            Err(SchedError::MalformedTrace(_))
        ));
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn config_strategy() -> impl Strategy<Value = SimConfig> {
        (
            1u32..6,          // engines
            1u64..8,          // training batch
            1u64..6,          // steps per cycle
            0u64..20,         // buffer size (clamped below)
            1u32..4,          // cycles
            any::<u64>(),     // seed
            prop_oneof![
                (0.2f64..3.0).prop_map(|v| GenTime::Constant { value: v }),
                (0.2f64..1.0, 1.1f64..3.0)
                    .prop_map(|(low, high)| GenTime::Uniform { low, high }),
                (0.2f64..2.0).prop_map(|mean| GenTime::Exponential { mean }),
                (-0.5f64..0.5, 0.1f64..1.2)
                    .prop_map(|(mu, sigma)| GenTime::Lognormal { mu, sigma }),
            ],
            0.1f64..2.0,      // train step time
            0.1f64..1.0,      // sync time
            any::<bool>(),    // strict barrier
        )
            .prop_map(
                |(engines, m, k, buffer, cycles, seed, gen_time, train, sync, strict)| {
                    let rollout = m * k;
                    SimConfig {
                        num_engines: engines,
                        rollout_batch: rollout,
                        training_batch: m,
                        buffer_size: buffer.min(rollout),
                        gen_time,
                        train_step_time: train,
                        sync_time: sync,
                        num_cycles: cycles,
                        seed,
                        strict_barrier: strict,
                    }
                },
            )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn invariants_hold_on_random_configs(cfg in config_strategy()) {
            for trace in [
                simulate_plain(&cfg).unwrap(),
                if cfg.buffer_size > 0 {
                    simulate_async(&cfg).unwrap()
                } else {
                    simulate_plain(&cfg).unwrap()
                },
            ] {
                // validate_trace runs inside idle_report: time order, no
                // double generation, causality.
                let report = idle_report(&trace).unwrap();
                prop_assert!(report.idle_fraction >= 0.0 && report.idle_fraction <= 1.0);

                // Conservation: consumed exactly once or leftover.
                let mut consumed = std::collections::BTreeSet::new();
                for step in &trace.steps {
                    for &id in &step.samples {
                        prop_assert!(consumed.insert(id), "sample {} consumed twice", id);
                    }
                }
                for sample in &trace.samples {
                    let in_leftover = trace.leftover_buffer.contains(&sample.id);
                    let is_consumed = consumed.contains(&sample.id);
                    prop_assert!(in_leftover != is_consumed,
                        "sample {} consumed={} leftover={}", sample.id, is_consumed, in_leftover);
                }

                // Every cycle consumes exactly rollout_batch samples.
                for cycle in 1..=cfg.num_cycles {
                    let n: u64 = trace.steps.iter()
                        .filter(|s| s.cycle == cycle)
                        .map(|s| s.samples.len() as u64)
                        .sum();
                    prop_assert_eq!(n, cfg.rollout_batch);
                }

                // Version discipline: a sample's version is the one live at
                // its gen_start, and at most two versions are in flight at
                // any instant.
                for sample in &trace.samples {
                    let expected = match sample.kind {
                        SampleKind::Fresh => sample.cycle - 1,
                        SampleKind::Buffer => sample.cycle - 2,
                    };
                    prop_assert_eq!(sample.version, expected);
                }
                let mut boundaries: Vec<(Ticks, i64, u32)> = Vec::new();
                for s in &trace.samples {
                    boundaries.push((s.start, 1, s.version));
                    boundaries.push((s.end, -1, s.version));
                }
                boundaries.sort_unstable_by_key(|&(t, d, _)| (t, d));
                let mut active: std::collections::BTreeMap<u32, i64> = std::collections::BTreeMap::new();
                for (_, delta, version) in boundaries {
                    *active.entry(version).or_insert(0) += delta;
                    active.retain(|_, count| *count > 0);
                    prop_assert!(active.len() <= 2, "versions in flight: {:?}", active);
                }
            }
        }
    }
}
