//! Evaluation quantities computed from finished runs: SLO attainment,
//! scaling hysteresis, batch-size convergence, estimator fit, and GPU cost.
//! Everything here is a pure function over run artifacts so results can be
//! recomputed from the emitted CSVs by an independent pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::engine::{ActionKind, ActionReason, ActionRow, RunResult, TimelineRow};
use crate::error::{Result, SimError};
use crate::perfmodel::{FinishedRequest, InstanceClass};

/// Whether a finished request met its deadlines. The inter-token statistic
/// is the worst observed gap unless `itl_mean` opts into the average; a
/// single-token response has no gaps and cannot miss.
pub fn record_met(rec: &FinishedRequest, itl_mean: bool) -> (bool, bool) {
    let ttft = rec.first_token_at - rec.request.arrival_time <= rec.request.ttft_slo;
    let gap = if itl_mean {
        if rec.gap_count == 0 {
            0.0
        } else {
            rec.gap_sum / rec.gap_count as f64
        }
    } else {
        rec.max_gap
    };
    (ttft, gap <= rec.request.itl_slo)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attainment {
    pub ttft: f64,
    pub itl: f64,
    pub combined: f64,
    /// Requests actually scored; zero means the fractions are vacuous 1.0.
    pub scored: u64,
}

/// Fraction of requests meeting TTFT, ITL, and both. Requests arriving
/// inside the warmup window are not scored.
pub fn slo_attainment(records: &[FinishedRequest], warmup: f64, itl_mean: bool) -> Attainment {
    let mut scored = 0u64;
    let (mut ttft_ok, mut itl_ok, mut both_ok) = (0u64, 0u64, 0u64);
    for rec in records {
        if rec.request.arrival_time < warmup {
            continue;
        }
        scored += 1;
        let (ttft, itl) = record_met(rec, itl_mean);
        ttft_ok += u64::from(ttft);
        itl_ok += u64::from(itl);
        both_ok += u64::from(ttft && itl);
    }
    if scored == 0 {
        return Attainment {
            ttft: 1.0,
            itl: 1.0,
            combined: 1.0,
            scored: 0,
        };
    }
    let n = scored as f64;
    Attainment {
        ttft: ttft_ok as f64 / n,
        itl: itl_ok as f64 / n,
        combined: both_ok as f64 / n,
        scored,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hysteresis {
    /// (ups + downs) / ups; 0.0 when nothing ever scaled up.
    pub ratio: f64,
    pub ups: u64,
    pub downs: u64,
}

impl Hysteresis {
    pub fn no_scaling(&self) -> bool {
        self.ups == 0
    }
}

/// Scaling churn. The declared starting fleet is not autoscaler behavior,
/// so `initial` actions are excluded from both counts.
pub fn hysteresis(actions: &[ActionRow]) -> Hysteresis {
    let ups = actions
        .iter()
        .filter(|a| a.kind.is_add() && a.reason != ActionReason::Initial)
        .count() as u64;
    let downs = actions
        .iter()
        .filter(|a| a.kind == ActionKind::Remove)
        .count() as u64;
    let ratio = if ups == 0 {
        0.0
    } else {
        (ups + downs) as f64 / ups as f64
    };
    Hysteresis { ratio, ups, downs }
}

/// Earliest time after which the series stays inside a relative band around
/// its settled value (the mean over the trailing `final_window` seconds).
/// None means it never settles.
pub fn convergence_time(series: &[(f64, f64)], band: f64, final_window: f64) -> Option<f64> {
    let &(t_end, _) = series.last()?;
    let tail: Vec<f64> = series
        .iter()
        .filter(|(t, _)| *t >= t_end - final_window)
        .map(|&(_, v)| v)
        .collect();
    let target = tail.iter().sum::<f64>() / tail.len() as f64;
    let (lo, hi) = (target * (1.0 - band), target * (1.0 + band));
    let mut entered: Option<f64> = None;
    for &(t, v) in series {
        if v < lo || v > hi {
            entered = None;
        } else if entered.is_none() {
            entered = Some(t);
        }
    }
    entered
}

/// Coefficient of determination of estimates against realizations.
pub fn r_squared(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(SimError::validation(
            "r_squared needs at least two (estimated, realized) pairs",
        ));
    }
    let mean = pairs.iter().map(|&(_, y)| y).sum::<f64>() / pairs.len() as f64;
    let ss_tot: f64 = pairs.iter().map(|&(_, y)| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(SimError::validation(
            "r_squared undefined: realized waits have zero variance",
        ));
    }
    let ss_res: f64 = pairs.iter().map(|&(est, y)| (y - est).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Trapezoidal integral of held GPUs over the timeline, in GPU-hours, plus
/// the peak count. Loading and draining instances hold their GPUs and are
/// part of the cost.
pub fn gpu_hours(timeline: &[TimelineRow]) -> (f64, u32) {
    let mut gpu_seconds = 0.0;
    for pair in timeline.windows(2) {
        let dt = pair[1].clock - pair[0].clock;
        gpu_seconds += dt * f64::from(pair[0].live_gpus + pair[1].live_gpus) / 2.0;
    }
    let peak = timeline.iter().map(|r| r.live_gpus).max().unwrap_or(0);
    (gpu_seconds / 3600.0, peak)
}

fn serving_count(row: &TimelineRow) -> f64 {
    f64::from(row.n_interactive + row.n_mixed + row.n_batch)
}

/// Integral of the serving-instance count over the run, in instance-seconds.
pub fn instance_seconds(timeline: &[TimelineRow]) -> f64 {
    let mut total = 0.0;
    for pair in timeline.windows(2) {
        let dt = pair[1].clock - pair[0].clock;
        total += dt * (serving_count(&pair[0]) + serving_count(&pair[1])) / 2.0;
    }
    total
}

/// Instance classes recovered from the scale-up log, which names every
/// instance the run ever created.
pub fn instance_classes(actions: &[ActionRow]) -> BTreeMap<u64, InstanceClass> {
    actions
        .iter()
        .filter_map(|a| {
            let class = match a.kind {
                ActionKind::AddInteractive => InstanceClass::Interactive,
                ActionKind::AddMixed => InstanceClass::Mixed,
                ActionKind::AddBatch => InstanceClass::Batch,
                ActionKind::Remove => return None,
            };
            Some((a.instance_id, class))
        })
        .collect()
}

/// Per-tick mean max_batch_size across live instances of one class; ticks
/// where the class has no live instances contribute no sample.
pub fn max_batch_series(run: &RunResult, class: InstanceClass) -> Vec<(f64, f64)> {
    let classes = instance_classes(&run.actions);
    run.timeline
        .iter()
        .filter_map(|row| {
            let vals: Vec<u64> = row
                .max_batch
                .iter()
                .filter(|(id, _)| classes.get(id) == Some(&class))
                .map(|&(_, v)| v)
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some((row.clock, vals.iter().sum::<u64>() as f64 / vals.len() as f64))
            }
        })
        .collect()
}

/// Flat, serialization-ready digest of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub ttft_attainment: f64,
    pub itl_attainment: f64,
    pub combined_attainment: f64,
    pub n_scored: u64,
    pub per_instance_tput: f64,
    pub gpu_hours: f64,
    pub peak_gpus: u32,
    pub hysteresis: f64,
    pub scale_ups: u64,
    pub scale_downs: u64,
    pub no_scaling: bool,
    pub convergence_time_interactive: Option<f64>,
    pub convergence_time_mixed: Option<f64>,
    pub convergence_time_batch: Option<f64>,
    pub estimator_r2: Option<f64>,
    pub estimator_n: u64,
    pub generated: u64,
    pub completed: u64,
    pub incomplete: bool,
    pub end_clock: f64,
}

pub fn summarize(cfg: &ScenarioConfig, run: &RunResult) -> RunSummary {
    let att = slo_attainment(&run.records, cfg.metrics.warmup, cfg.metrics.itl_mean);
    let hys = hysteresis(&run.actions);
    let (hours, peak_gpus) = gpu_hours(&run.timeline);
    let busy = instance_seconds(&run.timeline);
    let per_instance_tput = if busy > 0.0 {
        run.records.len() as f64 / busy
    } else {
        0.0
    };
    let conv = |class| {
        let series = max_batch_series(run, class);
        convergence_time(
            &series,
            cfg.metrics.convergence_band,
            cfg.metrics.convergence_window,
        )
    };
    let pairs: Vec<(f64, f64)> = run
        .estimates
        .iter()
        .filter_map(|e| e.realized_wait.map(|r| (e.estimated_wait, r)))
        .collect();
    RunSummary {
        scenario: run.scenario.clone(),
        seed: run.seed,
        config_hash: run.config_hash.clone(),
        ttft_attainment: att.ttft,
        itl_attainment: att.itl,
        combined_attainment: att.combined,
        n_scored: att.scored,
        per_instance_tput,
        gpu_hours: hours,
        peak_gpus,
        hysteresis: hys.ratio,
        scale_ups: hys.ups,
        scale_downs: hys.downs,
        no_scaling: hys.no_scaling(),
        convergence_time_interactive: conv(InstanceClass::Interactive),
        convergence_time_mixed: conv(InstanceClass::Mixed),
        convergence_time_batch: conv(InstanceClass::Batch),
        estimator_r2: r_squared(&pairs).ok(),
        estimator_n: pairs.len() as u64,
        generated: run.generated,
        completed: run.records.len() as u64,
        incomplete: run.incomplete,
        end_clock: run.end_clock,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Request, RequestClass};

    fn record(
        id: u64,
        arrival: f64,
        first_token: f64,
        completion: f64,
        max_gap: f64,
        gap_sum: f64,
        gap_count: u64,
    ) -> FinishedRequest {
        FinishedRequest {
            request: Request {
                id,
                arrival_time: arrival,
                class: RequestClass::Interactive,
                model_id: "small".into(),
                input_tokens: 100,
                output_tokens: gap_count + 1,
                ttft_slo: 10.0,
                itl_slo: 0.2,
            },
            first_token_at: first_token,
            completion_at: completion,
            max_gap,
            gap_sum,
            gap_count,
            evictions: 0,
        }
    }

    #[test]
    fn attainment_scores_each_deadline_independently() {
        let records = vec![
            // Meets both.
            record(0, 0.0, 5.0, 6.0, 0.15, 0.30, 2),
            // Misses TTFT only.
            record(1, 0.0, 11.0, 12.0, 0.10, 0.20, 2),
            // Misses ITL only.
            record(2, 0.0, 4.0, 9.0, 0.25, 0.50, 2),
        ];
        let att = slo_attainment(&records, 0.0, false);
        assert_eq!(att.scored, 3);
        assert!((att.ttft - 2.0 / 3.0).abs() < 1e-12);
        assert!((att.itl - 2.0 / 3.0).abs() < 1e-12);
        assert!((att.combined - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_arrivals_are_not_scored() {
        let records = vec![
            record(0, 10.0, 40.0, 41.0, 0.1, 0.1, 1),
            record(1, 35.0, 36.0, 37.0, 0.1, 0.1, 1),
        ];
        let att = slo_attainment(&records, 30.0, false);
        assert_eq!(att.scored, 1, "the warmup-era miss must not count");
        assert_eq!(att.combined, 1.0);
    }

    #[test]
    fn empty_scoring_is_vacuously_met_and_flagged() {
        let att = slo_attainment(&[], 0.0, false);
        assert_eq!(att.scored, 0);
        assert_eq!(att.combined, 1.0);
    }

    #[test]
    fn mean_itl_flag_switches_the_statistic() {
        // One 0.3 s stall among many fast gaps: worst-case misses a 0.2 s
        // budget, the average does not.
        let rec = record(0, 0.0, 1.0, 3.0, 0.3, 0.9, 9);
        let strict = slo_attainment(std::slice::from_ref(&rec), 0.0, false);
        let relaxed = slo_attainment(std::slice::from_ref(&rec), 0.0, true);
        assert_eq!(strict.itl, 0.0);
        assert_eq!(relaxed.itl, 1.0);
    }

    fn action(kind: ActionKind, reason: ActionReason) -> ActionRow {
        ActionRow {
            time: 0.0,
            kind,
            instance_id: 0,
            reason,
        }
    }

    #[test]
    fn hysteresis_counts_churn_relative_to_scale_ups() {
        let mut actions = Vec::new();
        for _ in 0..6 {
            actions.push(action(ActionKind::AddBatch, ActionReason::Bbp));
            actions.push(action(ActionKind::Remove, ActionReason::Retire));
        }
        assert_eq!(hysteresis(&actions).ratio, 2.0);

        let ups_only: Vec<ActionRow> = (0..10)
            .map(|_| action(ActionKind::AddInteractive, ActionReason::Ibp))
            .collect();
        assert_eq!(hysteresis(&ups_only).ratio, 1.0);

        let none = hysteresis(&[]);
        assert_eq!(none.ratio, 0.0);
        assert!(none.no_scaling());

        // The declared fleet is not churn.
        let initial_only = vec![
            action(ActionKind::AddInteractive, ActionReason::Initial),
            action(ActionKind::AddMixed, ActionReason::Initial),
        ];
        assert!(hysteresis(&initial_only).no_scaling());
    }

    #[test]
    fn convergence_examples() {
        let constant: Vec<(f64, f64)> = (0..100).map(|i| (i as f64, 32.0)).collect();
        assert_eq!(convergence_time(&constant, 0.1, 30.0), Some(0.0));

        let step: Vec<(f64, f64)> = (0..100)
            .map(|i| (i as f64, if i < 40 { 8.0 } else { 32.0 }))
            .collect();
        assert_eq!(convergence_time(&step, 0.1, 30.0), Some(40.0));

        let oscillating: Vec<(f64, f64)> = (0..100)
            .map(|i| (i as f64, if i % 2 == 0 { 16.0 } else { 48.0 }))
            .collect();
        assert_eq!(convergence_time(&oscillating, 0.1, 30.0), None);

        // A brief excursion resets the entry point.
        let blip: Vec<(f64, f64)> = (0..100)
            .map(|i| (i as f64, if i == 50 { 64.0 } else { 32.0 }))
            .collect();
        assert_eq!(convergence_time(&blip, 0.1, 30.0), Some(51.0));
    }

    #[test]
    fn r_squared_matches_closed_forms() {
        let perfect: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, i as f64)).collect();
        assert_eq!(r_squared(&perfect).unwrap(), 1.0);

        // Constant offset c against realized variance V: 1 - c^2 / V.
        let offset: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64 + 0.5, i as f64)).collect();
        let v = 2.0; // population variance of 1..=5
        let got = r_squared(&offset).unwrap();
        assert!((got - (1.0 - 0.25 / v)).abs() < 1e-12, "got {got}");

        // Anti-correlated estimates go negative; the definition allows it.
        let anti: Vec<(f64, f64)> = vec![(5.0, 1.0), (4.0, 2.0), (1.0, 5.0), (2.0, 4.0)];
        assert!(r_squared(&anti).unwrap() < 0.0);

        assert!(r_squared(&[(1.0, 1.0)]).is_err(), "one pair is degenerate");
        let flat: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0)).collect();
        assert!(r_squared(&flat).is_err(), "zero realized variance");
    }

    fn gpu_row(clock: f64, live_gpus: u32) -> TimelineRow {
        TimelineRow {
            clock,
            n_interactive: live_gpus,
            n_mixed: 0,
            n_batch: 0,
            queue_len_batch: 0,
            ibp: 0.0,
            bbp: 0,
            max_batch: Vec::new(),
            live_gpus,
            unmet_backpressure: false,
            lbp_max: 0.0,
        }
    }

    #[test]
    fn gpu_hours_integrates_the_examples() {
        let six_minutes = vec![gpu_row(0.0, 10), gpu_row(360.0, 10)];
        let (hours, peak) = gpu_hours(&six_minutes);
        assert!((hours - 1.0).abs() < 1e-12);
        assert_eq!(peak, 10);

        let stepped = vec![
            gpu_row(0.0, 10),
            gpu_row(1800.0, 10),
            gpu_row(1800.0, 20),
            gpu_row(3600.0, 20),
        ];
        let (hours, peak) = gpu_hours(&stepped);
        assert!((hours - 15.0).abs() < 1e-12);
        assert_eq!(peak, 20);

        assert_eq!(gpu_hours(&[]), (0.0, 0));
    }

    #[test]
    fn gpu_hours_is_stable_under_tick_refinement() {
        // Piecewise-constant fleet sampled at 1 s and at 0.5 s; the step at
        // t = 500 is the only place the trapezoid approximates.
        let sample = |dt: f64| -> Vec<TimelineRow> {
            let mut rows = Vec::new();
            let mut t = 0.0;
            while t <= 3600.0 {
                rows.push(gpu_row(t, if t < 500.0 { 10 } else { 20 }));
                t += dt;
            }
            rows
        };
        let (coarse, _) = gpu_hours(&sample(1.0));
        let (fine, _) = gpu_hours(&sample(0.5));
        assert!(
            (coarse - fine).abs() / fine < 0.001,
            "coarse {coarse} vs fine {fine}"
        );
    }

    #[test]
    fn summary_matches_a_hand_scored_run() {
        let cfg: ScenarioConfig = toml::from_str(
            r#"
            name = "hand"
            horizon = 100.0
            [metrics]
            warmup = 0.0
            [autoscaler]
            kind = "hierarchical"
            [profiles.small]
            kind = "small"
            [[initial_instances]]
            model = "small"
            class = "interactive"
            count = 1
            "#,
        )
        .unwrap();
        let run = RunResult {
            scenario: "hand".into(),
            seed: 1,
            config_hash: "abc".into(),
            records: vec![
                record(0, 0.0, 2.0, 3.0, 0.1, 0.2, 2),
                record(1, 1.0, 12.0, 13.0, 0.1, 0.2, 2),
            ],
            timeline: vec![gpu_row(0.0, 2), gpu_row(100.0, 2)],
            actions: vec![
                ActionRow {
                    time: 0.0,
                    kind: ActionKind::AddInteractive,
                    instance_id: 0,
                    reason: ActionReason::Initial,
                },
                ActionRow {
                    time: 10.0,
                    kind: ActionKind::AddInteractive,
                    instance_id: 1,
                    reason: ActionReason::Ibp,
                },
                ActionRow {
                    time: 50.0,
                    kind: ActionKind::Remove,
                    instance_id: 1,
                    reason: ActionReason::Retire,
                },
            ],
            estimates: vec![
                crate::engine::EstimateRow {
                    group_id: 5,
                    time: 0.0,
                    estimated_wait: 4.0,
                    realized_wait: Some(5.0),
                },
                crate::engine::EstimateRow {
                    group_id: 6,
                    time: 0.0,
                    estimated_wait: 9.0,
                    realized_wait: Some(10.0),
                },
                crate::engine::EstimateRow {
                    group_id: 7,
                    time: 0.0,
                    estimated_wait: 1.0,
                    realized_wait: None,
                },
            ],
            generated: 2,
            incomplete: false,
            end_clock: 100.0,
            first_admit: BTreeMap::new(),
        };
        let summary = summarize(&cfg, &run);
        // Request 1 misses its 10 s TTFT budget; both meet ITL.
        assert_eq!(summary.ttft_attainment, 0.5);
        assert_eq!(summary.itl_attainment, 1.0);
        assert_eq!(summary.combined_attainment, 0.5);
        assert_eq!(summary.n_scored, 2);
        // One real up, one down.
        assert_eq!(summary.hysteresis, 2.0);
        assert_eq!((summary.scale_ups, summary.scale_downs), (1, 1));
        // Two GPUs held for 100 s.
        assert!((summary.gpu_hours - 200.0 / 3600.0).abs() < 1e-12);
        assert_eq!(summary.peak_gpus, 2);
        // 2 completions over 2 instances * 100 s.
        assert!((summary.per_instance_tput - 2.0 / 200.0).abs() < 1e-12);
        // Estimates off by exactly +1 with realized population variance 6.25.
        let expect_r2 = 1.0 - 2.0 / 12.5;
        assert!((summary.estimator_r2.unwrap() - expect_r2).abs() < 1e-12);
        assert_eq!(summary.estimator_n, 2);
        // The fabricated timeline carries no per-instance batch sizes, so
        // there is no series to converge.
        assert_eq!(summary.convergence_time_interactive, None);

        let json = serde_json::to_string(&summary).unwrap();
        let back: RunSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, summary);
    }
}
