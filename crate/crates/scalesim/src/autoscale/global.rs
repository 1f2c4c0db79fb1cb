//! Cluster-level instance controller.
//!
//! Two independent signals drive it. Interactive backpressure (IBP) is the
//! fraction of interactive-capable instances currently running interactive
//! work; the controller keeps it inside a band around a target so spare
//! capacity always exists for spikes. Batch backpressure (BBP) is the number
//! of queued batch request groups whose projected waiting time overruns
//! their TTFT budget; the controller provisions the minimal number of batch
//! instances that brings it to zero, accounting for instance load lag.
//!
//! The controller sees the queue through [`QueuedRequestView`], which
//! carries input tokens and SLOs only. Output lengths of queued requests are
//! unknowable at decision time, so the type does not expose them; estimates
//! come from the running distribution of completed requests.

use crate::error::{Result, SimError};
use crate::perfmodel::InstanceClass;

/// Target busy fraction with tolerance band for interactive capacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverprovisionPolicy {
    pub theta: f64,
    pub delta: f64,
}

impl Default for OverprovisionPolicy {
    fn default() -> Self {
        OverprovisionPolicy {
            theta: 1.0 / 3.0,
            delta: 0.05,
        }
    }
}

impl OverprovisionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.theta - self.delta <= 0.0 || self.theta + self.delta > 1.0 {
            return Err(SimError::validation(format!(
                "overprovision band [{:.3}, {:.3}] must sit inside (0, 1]",
                self.theta - self.delta,
                self.theta + self.delta
            )));
        }
        Ok(())
    }
}

/// What the global controller may know about one instance.
#[derive(Clone, Debug)]
pub struct InstanceView {
    pub id: u64,
    pub class: InstanceClass,
    /// Finished loading (contributes capacity now).
    pub loaded: bool,
    /// Marked for removal; ignores new work.
    pub draining: bool,
    /// No resident requests.
    pub idle: bool,
    /// Currently running at least one interactive-class request.
    pub runs_interactive: bool,
    pub kv_used: u64,
    pub kv_capacity: u64,
    /// Time the instance finishes (or finished) loading.
    pub ready_at: f64,
}

impl InstanceView {
    pub(crate) fn in_interactive_pool(&self) -> bool {
        !self.draining
            && matches!(
                self.class,
                InstanceClass::Interactive | InstanceClass::Mixed
            )
    }
}

/// What the global controller may know about one queued batch request.
/// Deliberately omits output tokens: they have not been generated yet.
#[derive(Clone, Debug)]
pub struct QueuedRequestView {
    pub id: u64,
    pub arrival_time: f64,
    pub input_tokens: u64,
    pub ttft_slo: f64,
}

/// Queued requests clustered by similar TTFT SLO, FCFS within the group.
#[derive(Clone, Debug)]
pub struct RequestGroup {
    /// Id of the last member; the group is served once that request starts.
    pub group_id: u64,
    pub members: Vec<QueuedRequestView>,
    /// Representative SLO (first member's).
    pub ttft_slo: f64,
    /// Estimated tokens to serve the whole group (inputs + mean output each).
    pub total_queued_tokens: f64,
    /// Tightest absolute deadline among members.
    pub earliest_deadline: f64,
    /// Position of the last member in the global FCFS queue.
    last_position: usize,
}

/// Running output-length distribution fitted from completed requests, with
/// a prior that washes out linearly over the first 30 observations.
#[derive(Clone, Debug)]
pub struct OutputDist {
    n: u64,
    mean: f64,
    m2: f64,
    prior_mu: f64,
    prior_sigma: f64,
}

/// Observations needed before the prior stops contributing.
const PRIOR_WASHOUT: f64 = 30.0;

impl OutputDist {
    pub fn new(prior_mu: f64, prior_sigma: f64) -> Self {
        OutputDist {
            n: 0,
            mean: 0.0,
            m2: 0.0,
            prior_mu,
            prior_sigma,
        }
    }

    /// Welford update with one completed request's output length.
    pub fn observe(&mut self, output_tokens: u64) {
        let x = output_tokens as f64;
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    fn blend(&self, sample: f64, prior: f64) -> f64 {
        let w = (self.n as f64 / PRIOR_WASHOUT).min(1.0);
        w * sample + (1.0 - w) * prior
    }

    pub fn mu_o(&self) -> f64 {
        self.blend(self.mean, self.prior_mu)
    }

    pub fn sigma_o(&self) -> f64 {
        let sample = if self.n >= 2 {
            (self.m2 / (self.n - 1) as f64).sqrt()
        } else {
            0.0
        };
        self.blend(sample, self.prior_sigma)
    }
}

/// Trailing token-generation throughput of one batch-serving instance.
#[derive(Clone, Copy, Debug)]
pub struct ThroughputEstimate {
    pub theta_tput: f64,
    pub window: f64,
}

/// Interactive backpressure: busy fraction of the interactive-capable pool.
/// Instances still loading count as capacity (denominator) so bursts do not
/// trigger duplicate scale-ups while provisions are in flight; an empty pool
/// reads as maximal pressure.
pub fn compute_ibp(instances: &[InstanceView]) -> f64 {
    let pool: Vec<&InstanceView> = instances
        .iter()
        .filter(|v| v.in_interactive_pool())
        .collect();
    if pool.is_empty() {
        return 1.0;
    }
    let busy = pool
        .iter()
        .filter(|v| v.loaded && v.runs_interactive)
        .count();
    busy as f64 / pool.len() as f64
}

/// Interactive-tier scaling decision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractivePlan {
    pub add_interactive: u64,
    pub add_mixed: u64,
    /// Ids to retire, chosen youngest-first among idle pool members.
    pub retire: Vec<u64>,
}

impl InteractivePlan {
    pub fn is_empty(&self) -> bool {
        self.add_interactive == 0 && self.add_mixed == 0 && self.retire.is_empty()
    }
}

/// Scale the interactive pool toward the target band. Above the band, adds
/// the smallest instance count whose projected busy fraction returns to the
/// target; below it, retires idle instances while the projection stays at or
/// under the target (never overshooting into pressure) and the pool keeps at
/// least `min_pool` members.
pub fn interactive_scale(
    instances: &[InstanceView],
    policy: OverprovisionPolicy,
    mixed_fraction: f64,
    min_pool: u64,
    max_new: u64,
) -> InteractivePlan {
    let pool: Vec<&InstanceView> = instances
        .iter()
        .filter(|v| v.in_interactive_pool())
        .collect();
    let total = pool.len() as u64;
    let busy = pool
        .iter()
        .filter(|v| v.loaded && v.runs_interactive)
        .count() as f64;
    let ibp = if total == 0 {
        1.0
    } else {
        busy / total as f64
    };

    let mut plan = InteractivePlan::default();
    if ibp > policy.theta + policy.delta {
        let mut n = 0u64;
        while n < max_new && busy / (total + n) as f64 > policy.theta {
            n += 1;
        }
        n = n.max(if total == 0 { 1 } else { 0 }).min(max_new);
        plan.add_mixed = ((n as f64 * mixed_fraction).round_ties_even() as u64).min(n);
        plan.add_interactive = n - plan.add_mixed;
    } else if ibp < policy.theta - policy.delta {
        let mut idle: Vec<&&InstanceView> = pool
            .iter()
            .filter(|v| v.loaded && v.idle)
            .collect();
        idle.sort_by(|a, b| b.id.cmp(&a.id));
        let mut remaining = total;
        for v in idle {
            if remaining <= min_pool.max(1) {
                break;
            }
            if busy / (remaining - 1) as f64 > policy.theta {
                break;
            }
            plan.retire.push(v.id);
            remaining -= 1;
        }
    }
    plan
}

/// Cluster requests by TTFT SLO: a request joins the first group whose
/// representative SLO is within `tolerance`, else opens a new one. Groups
/// come back ordered by earliest deadline; members keep queue order.
pub fn form_request_groups(
    queue: &[QueuedRequestView],
    tolerance: f64,
    estimated_output: f64,
) -> Vec<RequestGroup> {
    let mut groups: Vec<RequestGroup> = Vec::new();
    for (pos, req) in queue.iter().enumerate() {
        let deadline = req.arrival_time + req.ttft_slo;
        let tokens = req.input_tokens as f64 + estimated_output;
        match groups
            .iter_mut()
            .find(|g| (g.ttft_slo - req.ttft_slo).abs() <= tolerance)
        {
            Some(g) => {
                g.group_id = req.id;
                g.members.push(req.clone());
                g.total_queued_tokens += tokens;
                g.earliest_deadline = g.earliest_deadline.min(deadline);
                g.last_position = pos;
            }
            None => groups.push(RequestGroup {
                group_id: req.id,
                members: vec![req.clone()],
                ttft_slo: req.ttft_slo,
                total_queued_tokens: tokens,
                earliest_deadline: deadline,
                last_position: pos,
            }),
        }
    }
    groups.sort_by(|a, b| a.earliest_deadline.total_cmp(&b.earliest_deadline));
    groups
}

/// Eq.-style waiting time at constant capacity: tokens ahead divided by
/// per-instance throughput times instance count.
pub fn estimate_waiting_time(
    tokens_ahead: f64,
    capacity: &ThroughputEstimate,
    serving_instances: u64,
) -> Result<f64> {
    if capacity.theta_tput <= 0.0 {
        return Err(SimError::validation(
            "waiting-time estimate needs positive throughput",
        ));
    }
    if serving_instances == 0 {
        return Err(SimError::validation(
            "waiting-time estimate needs at least one serving instance",
        ));
    }
    Ok(tokens_ahead.max(0.0) / (capacity.theta_tput * serving_instances as f64))
}

/// Backpressure under present capacity, before any hypothetical additions.
/// This is the raw pressure signal a timeline row reports; `batch_scale`
/// recomputes waits as it sizes the response.
pub fn current_backpressure(
    queue: &[QueuedRequestView],
    groups: &[RequestGroup],
    capacity: &BatchCapacity,
    estimated_output: f64,
    now: f64,
) -> u64 {
    let waits = group_waits(queue, groups, estimated_output, capacity, 0);
    compute_bbp(groups, &waits, now)
}

/// Count of groups whose projected wait overruns their remaining budget.
pub fn compute_bbp(groups: &[RequestGroup], estimates: &[f64], now: f64) -> u64 {
    debug_assert_eq!(groups.len(), estimates.len());
    groups
        .iter()
        .zip(estimates)
        .filter(|(g, &w)| now + w > g.earliest_deadline)
        .count() as u64
}

/// Batch-serving capacity as the drain solver sees it.
#[derive(Clone, Debug)]
pub struct BatchCapacity {
    /// Tokens/s one batch instance sustains.
    pub theta_tput: f64,
    /// Tokens/s of spare mixed capacity, available immediately.
    pub spare_rate: f64,
    /// Loaded batch instances.
    pub live_batch: u64,
    /// Offsets from now at which already-provisioning instances come up.
    pub loading_offsets: Vec<f64>,
    /// Lag before a newly added instance contributes.
    pub load_time: f64,
}

impl BatchCapacity {
    /// Time to drain `tokens` with `extra` hypothetical instances that come
    /// up after `load_time`. Piecewise-linear cumulative capacity walk.
    fn drain_time(&self, tokens: f64, extra: u64) -> f64 {
        if tokens <= 0.0 {
            return 0.0;
        }
        let mut events: Vec<(f64, f64)> = self
            .loading_offsets
            .iter()
            .map(|&off| (off.max(0.0), self.theta_tput))
            .collect();
        if extra > 0 {
            events.push((self.load_time, extra as f64 * self.theta_tput));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut rate = self.spare_rate + self.live_batch as f64 * self.theta_tput;
        let mut drained = 0.0;
        let mut t = 0.0;
        for (at, gain) in events {
            let span = at - t;
            if rate > 0.0 && drained + rate * span >= tokens {
                return t + (tokens - drained) / rate;
            }
            drained += rate * span;
            rate += gain;
            t = at;
        }
        if rate > 0.0 {
            t + (tokens - drained) / rate
        } else {
            f64::INFINITY
        }
    }
}

/// Per-group projection logged alongside scaling decisions.
#[derive(Clone, Debug)]
pub struct GroupEstimate {
    pub group_id: u64,
    pub estimated_wait: f64,
    pub earliest_deadline: f64,
}

/// Batch-tier scaling decision.
#[derive(Clone, Debug, Default)]
pub struct BatchPlan {
    pub dispatch: u64,
    /// Queue is empty and nothing batch-class is running anywhere.
    pub retire_all: bool,
    /// True when even `max_new` instances leave BBP above zero.
    pub unmet: bool,
    pub estimates: Vec<GroupEstimate>,
}

/// Waiting time per group given `extra` hypothetical instances: tokens of
/// everything queued ahead of the group's last member, drained through the
/// capacity profile.
fn group_waits(
    queue: &[QueuedRequestView],
    groups: &[RequestGroup],
    estimated_output: f64,
    capacity: &BatchCapacity,
    extra: u64,
) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(queue.len() + 1);
    prefix.push(0.0);
    for req in queue {
        let est = req.input_tokens as f64 + estimated_output;
        prefix.push(prefix.last().unwrap() + est);
    }
    groups
        .iter()
        .map(|g| capacity.drain_time(prefix[g.last_position], extra))
        .collect()
}

/// Add the minimal number of batch instances that clears batch backpressure,
/// or retire every batch instance when no batch work remains. Dispatch is
/// deliberately lazy: when starting the same instances `defer` seconds later
/// would still land every group inside its deadline, nothing is added yet.
/// Every deferred evaluation lets more arrivals share the loads eventually
/// paid, which is where grouping beats scaling per request. The deferral
/// test shifts the whole projection, pretending even present capacity
/// pauses, so it only passes with slack to spare.
pub fn batch_scale(
    queue: &[QueuedRequestView],
    groups: &[RequestGroup],
    capacity: &BatchCapacity,
    estimated_output: f64,
    now: f64,
    max_new: u64,
    any_batch_active: bool,
    defer: f64,
) -> BatchPlan {
    let mut plan = BatchPlan::default();
    if queue.is_empty() {
        plan.retire_all = !any_batch_active;
        return plan;
    }

    let mut dispatch = 0u64;
    let mut waits = group_waits(queue, groups, estimated_output, capacity, dispatch);
    while compute_bbp(groups, &waits, now) > 0 && dispatch < max_new {
        dispatch += 1;
        waits = group_waits(queue, groups, estimated_output, capacity, dispatch);
    }
    plan.unmet = compute_bbp(groups, &waits, now) > 0;
    plan.dispatch = dispatch;
    if dispatch > 0 && !plan.unmet && defer > 0.0 {
        let shifted: Vec<f64> = waits.iter().map(|w| w + defer).collect();
        if compute_bbp(groups, &shifted, now) == 0 {
            plan.dispatch = 0;
        }
    }
    plan.estimates = groups
        .iter()
        .zip(&waits)
        .map(|(g, &w)| GroupEstimate {
            group_id: g.group_id,
            estimated_wait: w,
            earliest_deadline: g.earliest_deadline,
        })
        .collect();
    plan
}

/// Baseline tier decision: one action per tick from average KV utilization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselinePlan {
    pub add: Option<InstanceClass>,
    pub retire: Option<u64>,
}

/// Threshold baseline: keep mean KV utilization across loaded instances
/// inside [low, high]. Above: add one instance for the pressured class
/// (batch if batch work queues, else the busier of the two pools). Below:
/// retire the youngest idle instance, except the last one that can admit
/// interactive traffic. Token utilization at serving depths sits far below
/// any plausible low threshold, so a threshold controller that dropped the
/// final interactive host would have no signal to ever bring one back;
/// real deployments pin a minimum replica count for exactly this reason.
pub fn baseline_utilization_scale(
    instances: &[InstanceView],
    low: f64,
    high: f64,
    batch_queued: bool,
) -> BaselinePlan {
    let live: Vec<&InstanceView> = instances
        .iter()
        .filter(|v| v.loaded && !v.draining)
        .collect();
    let mut plan = BaselinePlan::default();
    if live.is_empty() {
        return plan;
    }
    let admits_interactive = |v: &InstanceView| {
        matches!(
            v.class,
            InstanceClass::Interactive | InstanceClass::Mixed
        )
    };
    let interactive_hosts = live.iter().filter(|v| admits_interactive(v)).count();
    let avg = live
        .iter()
        .map(|v| v.kv_used as f64 / v.kv_capacity.max(1) as f64)
        .sum::<f64>()
        / live.len() as f64;
    if avg > high {
        let class_avg = |class: InstanceClass| {
            let of: Vec<f64> = live
                .iter()
                .filter(|v| v.class == class)
                .map(|v| v.kv_used as f64 / v.kv_capacity.max(1) as f64)
                .collect();
            if of.is_empty() {
                0.0
            } else {
                of.iter().sum::<f64>() / of.len() as f64
            }
        };
        plan.add = Some(if batch_queued {
            InstanceClass::Batch
        } else if class_avg(InstanceClass::Batch) > class_avg(InstanceClass::Interactive) {
            InstanceClass::Batch
        } else {
            InstanceClass::Interactive
        });
    } else if avg < low {
        plan.retire = live
            .iter()
            .filter(|v| v.idle)
            .filter(|v| !(admits_interactive(v) && interactive_hosts == 1))
            .map(|v| v.id)
            .max();
    }
    plan
}
