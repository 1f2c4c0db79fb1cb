//! Discrete-event cluster simulation.
//!
//! A single binary heap drives everything. Ties at one timestamp resolve by
//! event priority, then by insertion sequence: instances come up before steps
//! finish, steps finish before new arrivals route, arrivals route before the
//! autoscaler looks at the queue. That ordering makes every run a pure
//! function of (config, seed).
//!
//! Step execution applies a whole batch iteration when it starts and stamps
//! its effects at the end time, so admissions that land mid-step join the
//! next iteration and evictions mid-step keep the in-flight token. Displaced
//! work (KV preemption, interactive eviction) re-enters its
//! class queue ordered by original arrival time, which restores FCFS exactly
//! instead of assuming victims are the oldest work. Requeueing happens
//! atomically with the event that caused it, equivalent to the reserved
//! priority slot between step completions and arrivals.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use crate::autoscale::global::{
    batch_scale, baseline_utilization_scale, compute_ibp, current_backpressure,
    form_request_groups, interactive_scale, BatchCapacity, InstanceView, OutputDist,
    OverprovisionPolicy, QueuedRequestView,
};
use crate::autoscale::local::{compute_lbp, instance_itl_slo, LocalController, LocalPolicy};
use crate::config::{AutoscalerKind, ScenarioConfig};
use crate::error::{Result, SimError};
use crate::perfmodel::{
    AdmitOutcome, FinishedRequest, InstanceClass, InstanceState, PerfProfile, QueuedJob,
    StepOutcome,
};
use crate::workload::{
    gen_arrivals, load_trace, sample_tokens, ArrivalSpec, Request, RequestClass,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EventKind {
    InstanceReady(u64),
    StepComplete(u64),
    /// Deferred step start for an instance whose residents are all still
    /// prefilling; fires at the earliest prefill completion.
    StepWake(u64),
    Arrival(u32),
    Tick,
}

impl EventKind {
    fn priority(self) -> u8 {
        match self {
            EventKind::InstanceReady(_) => 0,
            EventKind::StepComplete(_) | EventKind::StepWake(_) => 1,
            // Priority 2 is the requeue slot; handled inline by `requeue`.
            EventKind::Arrival(_) => 3,
            EventKind::Tick => 4,
        }
    }
}

#[derive(Debug)]
struct Event {
    time: f64,
    prio: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, prio, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.prio.cmp(&self.prio))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    AddInteractive,
    AddMixed,
    AddBatch,
    Remove,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::AddInteractive => "add_interactive",
            ActionKind::AddMixed => "add_mixed",
            ActionKind::AddBatch => "add_batch",
            ActionKind::Remove => "remove",
        }
    }

    pub fn is_add(self) -> bool {
        self != ActionKind::Remove
    }
}

fn add_kind(class: InstanceClass) -> ActionKind {
    match class {
        InstanceClass::Interactive => ActionKind::AddInteractive,
        InstanceClass::Mixed => ActionKind::AddMixed,
        InstanceClass::Batch => ActionKind::AddBatch,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionReason {
    /// Fleet declared by the scenario, provisioned warm at t = 0.
    Initial,
    Ibp,
    Bbp,
    Baseline,
    Retire,
}

impl ActionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionReason::Initial => "initial",
            ActionReason::Ibp => "ibp",
            ActionReason::Bbp => "bbp",
            ActionReason::Baseline => "baseline",
            ActionReason::Retire => "retire",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ActionRow {
    pub time: f64,
    pub kind: ActionKind,
    pub instance_id: u64,
    pub reason: ActionReason,
}

/// Cluster snapshot taken at each autoscale tick, after decisions apply, so
/// pressure columns include capacity already in flight.
#[derive(Clone, Debug)]
pub struct TimelineRow {
    pub clock: f64,
    pub n_interactive: u32,
    pub n_mixed: u32,
    pub n_batch: u32,
    pub queue_len_batch: u64,
    pub ibp: f64,
    pub bbp: u64,
    /// (instance id, max_batch_size) for every live instance.
    pub max_batch: Vec<(u64, u64)>,
    /// GPUs held by all instances, including loading and draining ones.
    pub live_gpus: u32,
    /// A scale-up was wanted but the GPU cap blocked it since the last row.
    pub unmet_backpressure: bool,
    pub lbp_max: f64,
}

#[derive(Clone, Debug)]
pub struct EstimateRow {
    pub group_id: u64,
    pub time: f64,
    pub estimated_wait: f64,
    /// Seconds until the group's trailing request first started service,
    /// filled after the run; absent when it never got that far.
    pub realized_wait: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<FinishedRequest>,
    pub timeline: Vec<TimelineRow>,
    pub actions: Vec<ActionRow>,
    pub estimates: Vec<EstimateRow>,
    /// Requests the scenario generated, whether or not they completed.
    pub generated: u64,
    pub incomplete: bool,
    pub end_clock: f64,
    /// Request id to the time it first started service.
    pub first_admit: BTreeMap<u64, f64>,
}

/// Expand workload streams, injections and an optional trace file into one
/// arrival-ordered request list. Ids are reassigned after the merge so they
/// are dense and unique across sources.
fn build_requests(cfg: &ScenarioConfig) -> Result<Vec<Request>> {
    let mut requests = Vec::new();
    for (i, stream) in cfg.workload.iter().enumerate() {
        let idx = i as u64;
        let spec = ArrivalSpec {
            process: stream.arrival_process(),
            mean_rate: stream.rate,
            cv: stream.cv,
            duration: stream.duration,
            seed: Some(cfg.stream_seed(2 * idx)),
        };
        let times = gen_arrivals(&spec)?;
        let dist = stream.tokens.to_dist(cfg.stream_seed(2 * idx + 1));
        let tokens = sample_tokens(&dist, times.len())?;
        let (ttft_slo, itl_slo) = stream.slos();
        for (t, (input_tokens, output_tokens)) in times.into_iter().zip(tokens) {
            requests.push(Request {
                id: 0,
                arrival_time: stream.start + t,
                class: stream.class,
                model_id: stream.model.clone(),
                input_tokens,
                output_tokens,
                ttft_slo,
                itl_slo,
            });
        }
    }
    let base = cfg.workload.len() as u64;
    for (j, inj) in cfg.inject.iter().enumerate() {
        let dist = inj.tokens.to_dist(cfg.stream_seed(2 * (base + j as u64) + 1));
        let tokens = sample_tokens(&dist, inj.count as usize)?;
        let (ttft_slo, itl_slo) = inj.slos();
        for (input_tokens, output_tokens) in tokens {
            requests.push(Request {
                id: 0,
                arrival_time: inj.time,
                class: inj.class,
                model_id: inj.model.clone(),
                input_tokens,
                output_tokens,
                ttft_slo,
                itl_slo,
            });
        }
    }
    if let Some(path) = &cfg.trace {
        let file = std::fs::File::open(path)
            .map_err(|e| SimError::validation(format!("trace {path}: {e}")))?;
        requests.extend(load_trace(file)?);
    }
    // Stable sort keeps source order within one timestamp: streams in config
    // order, then injections, then the trace.
    requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    for (i, r) in requests.iter_mut().enumerate() {
        r.id = i as u64;
    }
    Ok(requests)
}

struct Instance {
    state: InstanceState,
    ctl: Option<LocalController>,
    step_pending: bool,
    wake_pending: bool,
    /// Outcome of the in-flight step, applied already, stamped at its end.
    pending: Option<StepOutcome>,
}

impl Instance {
    /// Idle with nothing in flight. A step that completed its last resident
    /// leaves `running` empty while its outcome is still waiting to be
    /// stamped, and the instance must not look removable until then.
    fn settled_idle(&self) -> bool {
        self.state.is_idle() && !self.step_pending
    }
}

pub struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    profiles: BTreeMap<String, Arc<PerfProfile>>,
    clock: f64,
    seq: u64,
    events: BinaryHeap<Event>,
    instances: BTreeMap<u64, Instance>,
    next_instance: u64,
    q_interactive: BTreeMap<String, VecDeque<QueuedJob>>,
    q_batch: BTreeMap<String, VecDeque<QueuedJob>>,
    arrivals: Vec<Request>,
    next_arrival: usize,
    output_dists: BTreeMap<String, OutputDist>,
    records: Vec<FinishedRequest>,
    timeline: Vec<TimelineRow>,
    actions: Vec<ActionRow>,
    estimates: Vec<EstimateRow>,
    first_admit: BTreeMap<u64, f64>,
    /// The single live tick time; stale tick events are dropped on pop.
    next_tick: Option<f64>,
    unmet_since_row: bool,
    local_enabled: bool,
}

/// Run a validated scenario to completion (or horizon) and return every
/// artifact the run produced.
pub fn run(cfg: &ScenarioConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut eng = Engine::new(cfg)?;
    eng.bootstrap()?;
    eng.event_loop();
    Ok(eng.finish())
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Engine<'a>> {
        let profiles: BTreeMap<String, Arc<PerfProfile>> = cfg
            .built_profiles()
            .into_iter()
            .map(|(k, v)| (k, Arc::new(v)))
            .collect();
        let arrivals = build_requests(cfg)?;
        for r in &arrivals {
            if !profiles.contains_key(&r.model_id) {
                return Err(SimError::validation(format!(
                    "request {} targets unknown model {}",
                    r.id, r.model_id
                )));
            }
        }
        let empty_queues = || {
            profiles
                .keys()
                .map(|k| (k.clone(), VecDeque::new()))
                .collect::<BTreeMap<String, VecDeque<QueuedJob>>>()
        };
        let output_dists = profiles
            .keys()
            .map(|k| {
                (
                    k.clone(),
                    OutputDist::new(
                        cfg.autoscaler.output_prior_mean,
                        cfg.autoscaler.output_prior_std,
                    ),
                )
            })
            .collect();
        let local_enabled = matches!(
            cfg.autoscaler.kind,
            AutoscalerKind::Hierarchical | AutoscalerKind::LocalOnly
        );
        Ok(Engine {
            cfg,
            q_interactive: empty_queues(),
            q_batch: empty_queues(),
            profiles,
            clock: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            instances: BTreeMap::new(),
            next_instance: 0,
            arrivals,
            next_arrival: 0,
            output_dists,
            records: Vec::new(),
            timeline: Vec::new(),
            actions: Vec::new(),
            estimates: Vec::new(),
            first_admit: BTreeMap::new(),
            next_tick: None,
            unmet_since_row: false,
            local_enabled,
        })
    }

    fn bootstrap(&mut self) -> Result<()> {
        for spec in &self.cfg.initial_instances {
            for _ in 0..spec.count {
                if !self.provision(&spec.model.clone(), spec.class, ActionReason::Initial, 0.0) {
                    return Err(SimError::validation(
                        "initial instances do not fit under gpu_cap",
                    ));
                }
            }
        }
        for i in 0..self.arrivals.len() {
            self.push_event(self.arrivals[i].arrival_time, EventKind::Arrival(i as u32));
        }
        self.next_tick = Some(0.0);
        self.push_event(0.0, EventKind::Tick);
        Ok(())
    }

    fn event_loop(&mut self) {
        while let Some(ev) = self.events.pop() {
            if ev.time > self.cfg.horizon {
                break;
            }
            debug_assert!(ev.time >= self.clock, "event time went backwards");
            self.clock = ev.time;
            match ev.kind {
                EventKind::InstanceReady(_) => self.drain_and_start(ev.time),
                EventKind::StepWake(id) => {
                    if let Some(inst) = self.instances.get_mut(&id) {
                        inst.wake_pending = false;
                    }
                    self.try_start_step(id, ev.time);
                }
                EventKind::StepComplete(id) => self.on_step_complete(id, ev.time),
                EventKind::Arrival(i) => {
                    self.next_arrival = i as usize + 1;
                    self.on_arrival(i as usize, ev.time);
                }
                EventKind::Tick => self.on_tick(ev.time),
            }
        }
    }

    fn finish(mut self) -> RunResult {
        let end_clock = self.clock;
        if self.timeline.last().map_or(true, |r| r.clock < end_clock) {
            let row = self.observe_row(end_clock);
            self.timeline.push(row);
        }
        for row in &mut self.estimates {
            // A wait realizes when the group's trailing request first gets
            // service after the estimate was made. Requeued work can sit in
            // the queue with an old admission on record; that is not a
            // realization of this estimate, so it stays empty.
            row.realized_wait = self
                .first_admit
                .get(&row.group_id)
                .filter(|&&at| at >= row.time)
                .map(|&at| at - row.time);
        }
        let generated = self.arrivals.len() as u64;
        let incomplete = self.records.len() as u64 != generated;
        RunResult {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            config_hash: self.cfg.config_hash(),
            records: self.records,
            timeline: self.timeline,
            actions: self.actions,
            estimates: self.estimates,
            generated,
            incomplete,
            end_clock,
            first_admit: self.first_admit,
        }
    }

    fn push_event(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            prio: kind.priority(),
            seq: self.seq,
            kind,
        });
    }

    fn work_remains(&self) -> bool {
        self.next_arrival < self.arrivals.len()
            || self.q_interactive.values().any(|q| !q.is_empty())
            || self.q_batch.values().any(|q| !q.is_empty())
            || self.instances.values().any(|i| !i.settled_idle())
    }

    fn used_gpus(&self) -> u32 {
        self.instances
            .values()
            .map(|i| i.state.profile.gpus_per_instance)
            .sum()
    }

    fn gpu_headroom_instances(&self, model: &str) -> u64 {
        let per = self.profiles[model].gpus_per_instance.max(1);
        u64::from(self.cfg.gpu_cap.saturating_sub(self.used_gpus()) / per)
    }

    fn local_policy(&self) -> LocalPolicy {
        let a = &self.cfg.autoscaler;
        LocalPolicy {
            alpha: a.alpha,
            deadband: a.deadband,
            strict: false,
            ceiling: a.max_batch_ceiling,
            itl_window_steps: a.itl_window_steps,
            tput_window: a.tput_window,
        }
    }

    fn provision(
        &mut self,
        model: &str,
        class: InstanceClass,
        reason: ActionReason,
        now: f64,
    ) -> bool {
        let profile = self.profiles[model].clone();
        if self.used_gpus() + profile.gpus_per_instance > self.cfg.gpu_cap {
            self.unmet_since_row = true;
            return false;
        }
        let id = self.next_instance;
        self.next_instance += 1;
        // The declared fleet starts warm; everything else pays the load lag.
        let ready_at = if reason == ActionReason::Initial {
            now
        } else {
            now + profile.load_time
        };
        let max_batch = if self.local_enabled {
            self.cfg.autoscaler.initial_max_batch
        } else {
            self.cfg.autoscaler.static_max_batch
        };
        let state = InstanceState::new(
            id,
            class,
            profile,
            max_batch,
            ready_at,
            self.cfg.autoscaler.itl_window_steps,
        );
        let ctl = self
            .local_enabled
            .then(|| LocalController::new(self.local_policy()));
        self.instances.insert(
            id,
            Instance {
                state,
                ctl,
                step_pending: false,
                wake_pending: false,
                pending: None,
            },
        );
        self.actions.push(ActionRow {
            time: now,
            kind: add_kind(class),
            instance_id: id,
            reason,
        });
        if ready_at > now {
            self.push_event(ready_at, EventKind::InstanceReady(id));
        }
        true
    }

    fn retire(&mut self, id: u64, now: f64) {
        let Some(inst) = self.instances.get_mut(&id) else {
            return;
        };
        if inst.state.draining {
            return;
        }
        inst.state.draining = true;
        self.actions.push(ActionRow {
            time: now,
            kind: ActionKind::Remove,
            instance_id: id,
            reason: ActionReason::Retire,
        });
        if self.instances[&id].settled_idle() {
            self.instances.remove(&id);
        }
    }

    /// Re-enter a displaced or newly queued job into its class queue at the
    /// position its arrival time dictates.
    fn requeue(&mut self, job: QueuedJob) {
        let map = match job.request.class {
            RequestClass::Interactive => &mut self.q_interactive,
            RequestClass::Batch => &mut self.q_batch,
        };
        let q = map
            .get_mut(&job.request.model_id)
            .expect("queues exist for every validated model");
        let key = (job.request.arrival_time, job.request.id);
        let pos = q
            .iter()
            .position(|j| (j.request.arrival_time, j.request.id) > key)
            .unwrap_or(q.len());
        q.insert(pos, job);
    }

    fn try_admit(&mut self, id: u64, job: &QueuedJob, now: f64) -> bool {
        let inst = self.instances.get_mut(&id).expect("admission target exists");
        if matches!(inst.state.admit(job, now), Ok(AdmitOutcome::Admitted)) {
            self.first_admit.entry(job.request.id).or_insert(now);
            true
        } else {
            false
        }
    }

    fn ids_of(&self, model: &str, class: InstanceClass) -> Vec<u64> {
        self.instances
            .iter()
            .filter(|(_, i)| i.state.class == class && i.state.profile.model_id == model)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Place a job on an instance, or return None for Queued. Interactive
    /// work tries its own pool, then mixed instances without disturbing
    /// anyone, then mixed instances by evicting batch residents. Batch work
    /// takes batch instances, then spare mixed capacity, and never evicts.
    /// Candidates are visited in ascending id so the decision is a pure
    /// function of state.
    fn route_job(&mut self, job: &QueuedJob, now: f64) -> Option<u64> {
        let model = job.request.model_id.clone();
        match job.request.class {
            RequestClass::Interactive => {
                for id in self.ids_of(&model, InstanceClass::Interactive) {
                    if self.try_admit(id, job, now) {
                        return Some(id);
                    }
                }
                let mixed = self.ids_of(&model, InstanceClass::Mixed);
                for &id in &mixed {
                    if self.try_admit(id, job, now) {
                        return Some(id);
                    }
                }
                let needed = job.request.input_tokens + job.progress.tokens_generated + 1;
                for &id in &mixed {
                    let inst = self.instances.get_mut(&id).expect("candidate exists");
                    if !inst.state.is_live(now) {
                        continue;
                    }
                    let victims = inst.state.evict_for_interactive(needed, now);
                    let freed = !victims.is_empty();
                    for v in victims {
                        self.requeue(v);
                    }
                    if freed && self.try_admit(id, job, now) {
                        return Some(id);
                    }
                }
                None
            }
            RequestClass::Batch => {
                for id in self.ids_of(&model, InstanceClass::Batch) {
                    if self.try_admit(id, job, now) {
                        return Some(id);
                    }
                }
                for id in self.ids_of(&model, InstanceClass::Mixed) {
                    if self.try_admit(id, job, now) {
                        return Some(id);
                    }
                }
                None
            }
        }
    }

    /// Move queued work onto instances until every queue head blocks, then
    /// kick the instances that received something. Interactive queues drain
    /// first because doing so can push batch victims back into the batch
    /// queues drained right after.
    fn drain_and_start(&mut self, now: f64) {
        let models: Vec<String> = self.profiles.keys().cloned().collect();
        let mut touched = Vec::new();
        for model in &models {
            let mut q = std::mem::take(
                self.q_interactive
                    .get_mut(model)
                    .expect("queue exists per model"),
            );
            while let Some(job) = q.pop_front() {
                match self.route_job(&job, now) {
                    Some(id) => touched.push(id),
                    None => {
                        q.push_front(job);
                        break;
                    }
                }
            }
            *self.q_interactive.get_mut(model).expect("still present") = q;
        }
        for model in &models {
            let mut q = std::mem::take(
                self.q_batch.get_mut(model).expect("queue exists per model"),
            );
            while let Some(job) = q.pop_front() {
                match self.route_job(&job, now) {
                    Some(id) => touched.push(id),
                    None => {
                        q.push_front(job);
                        break;
                    }
                }
            }
            *self.q_batch.get_mut(model).expect("still present") = q;
        }
        touched.sort_unstable();
        touched.dedup();
        for id in touched {
            self.try_start_step(id, now);
        }
    }

    fn try_start_step(&mut self, id: u64, now: f64) {
        let Some(inst) = self.instances.get_mut(&id) else {
            return;
        };
        if inst.step_pending || inst.state.running.is_empty() || now < inst.state.ready_at {
            return;
        }
        if inst.state.decode_ready(now) == 0 {
            if !inst.wake_pending {
                inst.wake_pending = true;
                let at = inst
                    .state
                    .earliest_prefill_done()
                    .expect("resident work")
                    .max(now);
                self.push_event(at, EventKind::StepWake(id));
            }
            return;
        }
        let mut out = inst.state.step(now).expect("step with residents");
        let preempted = std::mem::take(&mut out.preempted);
        let ends_at = out.ends_at;
        inst.pending = Some(out);
        inst.step_pending = true;
        self.push_event(ends_at, EventKind::StepComplete(id));
        for job in preempted {
            self.requeue(job);
        }
    }

    fn on_step_complete(&mut self, id: u64, now: f64) {
        let inst = self.instances.get_mut(&id).expect("stepping instance exists");
        inst.step_pending = false;
        let out = inst.pending.take().expect("outcome stored at step start");
        let model = inst.state.profile.model_id.clone();

        // Local tier: one evaluation per executed iteration. A shrunken
        // max_batch_size only tightens admission; residents already in the
        // batch finish in place and the batch decays by attrition.
        if !inst.state.draining {
            if let Some(ctl) = inst.ctl.as_mut() {
                ctl.after_step(&mut inst.state, now, out.completions.len());
            }
        }

        let drained_out = inst.state.draining && inst.state.running.is_empty();
        if drained_out {
            self.instances.remove(&id);
        }

        for fin in &out.completions {
            if fin.request.class == RequestClass::Batch {
                self.output_dists
                    .get_mut(&model)
                    .expect("dist per model")
                    .observe(fin.request.output_tokens);
            }
        }
        self.records.extend(out.completions);
        // Admit at the iteration boundary, then launch the next step.
        self.drain_and_start(now);
        if !drained_out {
            self.try_start_step(id, now);
        }
    }

    fn on_arrival(&mut self, idx: usize, now: f64) {
        let job = QueuedJob::fresh(self.arrivals[idx].clone());
        if let Some(id) = self.route_job(&job, now) {
            self.try_start_step(id, now);
            // Routing may have displaced batch work that fits elsewhere.
            self.drain_and_start(now);
            return;
        }
        let class = job.request.class;
        let model = job.request.model_id.clone();
        self.requeue(job);
        if class == RequestClass::Batch {
            match self.cfg.autoscaler.kind {
                // The threshold baseline never queues batch work: every
                // unplaced request brings up its own instance while GPUs
                // last.
                AutoscalerKind::Baseline => {
                    self.provision(&model, InstanceClass::Batch, ActionReason::Baseline, now);
                }
                AutoscalerKind::Hierarchical | AutoscalerKind::GlobalOnly => {
                    self.schedule_tick_at(now);
                }
                AutoscalerKind::LocalOnly => {}
            }
        }
    }

    /// Pull the next tick to `now` (queue-insert trigger). The previously
    /// scheduled cadence event becomes stale and is dropped when popped.
    fn schedule_tick_at(&mut self, now: f64) {
        if self.next_tick == Some(now) {
            return;
        }
        self.next_tick = Some(now);
        self.push_event(now, EventKind::Tick);
    }

    fn on_tick(&mut self, t: f64) {
        if self.next_tick != Some(t) {
            return;
        }
        self.next_tick = None;
        self.run_controllers(t);
        let row = self.observe_row(t);
        self.timeline.push(row);
        if self.work_remains() {
            let next = t + self.cfg.autoscaler.tick;
            self.next_tick = Some(next);
            self.push_event(next, EventKind::Tick);
        }
    }

    fn run_controllers(&mut self, now: f64) {
        let models: Vec<String> = self.profiles.keys().cloned().collect();
        match self.cfg.autoscaler.kind {
            AutoscalerKind::Hierarchical | AutoscalerKind::GlobalOnly => {
                for model in &models {
                    self.interactive_tier(model, now);
                    self.batch_tier(model, now);
                }
            }
            AutoscalerKind::Baseline => {
                for model in &models {
                    self.baseline_tier(model, now);
                }
            }
            AutoscalerKind::LocalOnly => {}
        }
    }

    fn views_of(&self, model: &str, now: f64) -> Vec<InstanceView> {
        self.instances
            .values()
            .filter(|i| i.state.profile.model_id == model)
            .map(|i| InstanceView {
                id: i.state.instance_id,
                class: i.state.class,
                loaded: now >= i.state.ready_at,
                draining: i.state.draining,
                idle: i.settled_idle(),
                runs_interactive: i.state.runs_interactive(),
                kv_used: i.state.kv_used,
                kv_capacity: i.state.profile.kv_capacity,
                ready_at: i.state.ready_at,
            })
            .collect()
    }

    fn interactive_tier(&mut self, model: &str, now: f64) {
        let views = self.views_of(model, now);
        // A model that has no interactive pool and no queued interactive
        // demand needs nothing from this tier; the empty-pool bootstrap is
        // for demand that arrived before any instance existed, not for
        // models that only ever see batch work.
        if !views.iter().any(|v| v.in_interactive_pool())
            && self.q_interactive[model].is_empty()
        {
            return;
        }
        let policy = OverprovisionPolicy {
            theta: self.cfg.autoscaler.theta,
            delta: self.cfg.autoscaler.delta,
        };
        let plan = interactive_scale(
            &views,
            policy,
            self.cfg.autoscaler.mixed_fraction,
            self.cfg.autoscaler.min_interactive_pool,
            self.gpu_headroom_instances(model),
        );
        for _ in 0..plan.add_interactive {
            self.provision(model, InstanceClass::Interactive, ActionReason::Ibp, now);
        }
        for _ in 0..plan.add_mixed {
            self.provision(model, InstanceClass::Mixed, ActionReason::Ibp, now);
        }
        for id in plan.retire {
            self.retire(id, now);
        }
    }

    fn queue_views(&self, model: &str) -> Vec<QueuedRequestView> {
        self.q_batch[model]
            .iter()
            .map(|j| QueuedRequestView {
                id: j.request.id,
                arrival_time: j.request.arrival_time,
                input_tokens: j.request.input_tokens,
                ttft_slo: j.request.ttft_slo,
            })
            .collect()
    }

    /// Capacity as the batch tier sees it: measured per-instance throughput
    /// of loaded batch instances (profile-derived before any measurement
    /// exists), spare mixed throughput, and in-flight provisions.
    fn batch_capacity(&mut self, model: &str, now: f64) -> BatchCapacity {
        let window = self.cfg.autoscaler.tput_window;
        let profile = self.profiles[model].clone();
        let mut measured = Vec::new();
        let mut spare_rate = 0.0;
        let mut live_batch = 0u64;
        let mut loading_offsets = Vec::new();
        for inst in self
            .instances
            .values_mut()
            .filter(|i| i.state.profile.model_id == model && !i.state.draining)
        {
            match inst.state.class {
                InstanceClass::Batch => {
                    if now >= inst.state.ready_at {
                        live_batch += 1;
                        let r = inst.state.batch_token_rate(now, window);
                        if r > 0.0 {
                            measured.push(r);
                        }
                    } else {
                        loading_offsets.push(inst.state.ready_at - now);
                    }
                }
                InstanceClass::Mixed => {
                    if now >= inst.state.ready_at {
                        let r = inst
                            .state
                            .batch_token_rate(now, window)
                            .max(inst.state.instantaneous_batch_rate(now));
                        spare_rate += r;
                    }
                }
                InstanceClass::Interactive => {}
            }
        }
        let theta_tput = if measured.is_empty() {
            // Cold start: no batch tokens observed anywhere yet. A nominal
            // 256-token resident footprint turns the decode coefficient into
            // a conservative tokens/s figure; measurements replace it within
            // one window.
            1.0 / (profile.decode_per_token * 256.0)
        } else {
            measured.iter().sum::<f64>() / measured.len() as f64
        };
        BatchCapacity {
            theta_tput,
            spare_rate,
            live_batch,
            loading_offsets,
            load_time: profile.load_time,
        }
    }

    fn batch_tier(&mut self, model: &str, now: f64) {
        let a = &self.cfg.autoscaler;
        let (tolerance, tick) = (a.group_tolerance, a.tick);
        let max_new = self.gpu_headroom_instances(model);
        let queue = self.queue_views(model);
        let mu = self.output_dists[model].mu_o();
        let groups = form_request_groups(&queue, tolerance, mu);
        let capacity = self.batch_capacity(model, now);
        let any_batch_active = self
            .instances
            .values()
            .any(|i| i.state.profile.model_id == model && i.state.runs_batch());
        let plan = batch_scale(
            &queue,
            &groups,
            &capacity,
            mu,
            now,
            max_new,
            any_batch_active,
            tick,
        );
        for est in &plan.estimates {
            self.estimates.push(EstimateRow {
                group_id: est.group_id,
                time: now,
                estimated_wait: est.estimated_wait,
                realized_wait: None,
            });
        }
        if plan.unmet {
            self.unmet_since_row = true;
        }
        for _ in 0..plan.dispatch {
            self.provision(model, InstanceClass::Batch, ActionReason::Bbp, now);
        }
        if plan.retire_all {
            let ids: Vec<u64> = self
                .instances
                .iter()
                .filter(|(_, i)| {
                    i.state.class == InstanceClass::Batch
                        && i.state.profile.model_id == model
                        && !i.state.draining
                })
                .map(|(&id, _)| id)
                .collect();
            for id in ids {
                self.retire(id, now);
            }
        }
    }

    fn baseline_tier(&mut self, model: &str, now: f64) {
        let views = self.views_of(model, now);
        let plan = baseline_utilization_scale(
            &views,
            self.cfg.autoscaler.baseline_low,
            self.cfg.autoscaler.baseline_high,
            !self.q_batch[model].is_empty(),
        );
        if let Some(class) = plan.add {
            self.provision(model, class, ActionReason::Baseline, now);
        }
        if let Some(id) = plan.retire {
            self.retire(id, now);
        }
    }

    fn observe_row(&mut self, now: f64) -> TimelineRow {
        let models: Vec<String> = self.profiles.keys().cloned().collect();
        let mut bbp = 0u64;
        for model in &models {
            let queue = self.queue_views(model);
            if queue.is_empty() {
                continue;
            }
            let mu = self.output_dists[model].mu_o();
            let groups = form_request_groups(&queue, self.cfg.autoscaler.group_tolerance, mu);
            let capacity = self.batch_capacity(model, now);
            bbp += current_backpressure(&queue, &groups, &capacity, mu, now);
        }
        let mut all_views = Vec::new();
        for model in &models {
            all_views.extend(self.views_of(model, now));
        }
        let ibp = compute_ibp(&all_views);
        let (mut n_interactive, mut n_mixed, mut n_batch) = (0u32, 0u32, 0u32);
        let mut max_batch = Vec::new();
        let mut lbp_max = 0.0f64;
        for inst in self.instances.values() {
            if now < inst.state.ready_at || inst.state.draining {
                continue;
            }
            match inst.state.class {
                InstanceClass::Interactive => n_interactive += 1,
                InstanceClass::Mixed => n_mixed += 1,
                InstanceClass::Batch => n_batch += 1,
            }
            max_batch.push((inst.state.instance_id, inst.state.max_batch_size));
            if !inst.state.itl_window.is_empty() {
                if let Some(slo) = instance_itl_slo(&inst.state) {
                    let mean = inst.state.itl_window.iter().sum::<f64>()
                        / inst.state.itl_window.len() as f64;
                    lbp_max = lbp_max.max(compute_lbp(mean, slo));
                }
            }
        }
        TimelineRow {
            clock: now,
            n_interactive,
            n_mixed,
            n_batch,
            queue_len_batch: self.q_batch.values().map(|q| q.len() as u64).sum(),
            ibp,
            bbp,
            max_batch,
            live_gpus: self.used_gpus(),
            unmet_backpressure: std::mem::replace(&mut self.unmet_since_row, false),
            lbp_max,
        }
    }
}
