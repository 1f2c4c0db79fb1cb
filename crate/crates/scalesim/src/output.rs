//! Run artifact serialization: four CSVs and a JSON digest per run. Columns
//! and row order are fixed functions of the run result, so identical runs
//! serialize to identical bytes.

use std::fs::{self, File};
use std::io::Write as IoWrite;
use std::path::Path;

use crate::config::ScenarioConfig;
use crate::engine::{ActionRow, EstimateRow, RunResult, TimelineRow};
use crate::error::Result;
use crate::metrics::{record_met, summarize, RunSummary};
use crate::perfmodel::FinishedRequest;
use crate::workload::format_seconds;

pub const RECORDS_HEADER: [&str; 10] = [
    "id",
    "class",
    "arrival",
    "first_token",
    "completion",
    "mean_itl",
    "max_itl",
    "evictions",
    "ttft_met",
    "itl_met",
];

pub const TIMELINE_HEADER: [&str; 11] = [
    "clock",
    "n_interactive",
    "n_mixed",
    "n_batch",
    "queue_len_batch",
    "ibp",
    "bbp",
    "max_batch",
    "live_gpus",
    "unmet_backpressure",
    "lbp_max",
];

pub const ACTIONS_HEADER: [&str; 4] = ["time", "kind", "instance_id", "reason"];

pub const ESTIMATES_HEADER: [&str; 4] = ["group_id", "t", "estimated_wait", "realized_wait"];

/// Per-request rows, ordered by id. The met flags use the same statistic the
/// summary scores with.
pub fn write_records<W: IoWrite>(
    writer: W,
    records: &[FinishedRequest],
    itl_mean: bool,
) -> Result<()> {
    let mut rows: Vec<&FinishedRequest> = records.iter().collect();
    rows.sort_by_key(|r| r.request.id);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORDS_HEADER)?;
    for rec in rows {
        let mean_itl = if rec.gap_count == 0 {
            0.0
        } else {
            rec.gap_sum / rec.gap_count as f64
        };
        let (ttft_met, itl_met) = record_met(rec, itl_mean);
        w.write_record([
            rec.request.id.to_string(),
            rec.request.class.as_str().to_string(),
            format_seconds(rec.request.arrival_time),
            format_seconds(rec.first_token_at),
            format_seconds(rec.completion_at),
            format_seconds(mean_itl),
            format_seconds(rec.max_gap),
            rec.evictions.to_string(),
            ttft_met.to_string(),
            itl_met.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per autoscale tick. `max_batch` packs per-instance batch sizes as
/// `id:size` pairs joined by `;`.
pub fn write_timeline<W: IoWrite>(writer: W, timeline: &[TimelineRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TIMELINE_HEADER)?;
    for row in timeline {
        let max_batch = row
            .max_batch
            .iter()
            .map(|(id, v)| format!("{id}:{v}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            format_seconds(row.clock),
            row.n_interactive.to_string(),
            row.n_mixed.to_string(),
            row.n_batch.to_string(),
            row.queue_len_batch.to_string(),
            format_seconds(row.ibp),
            row.bbp.to_string(),
            max_batch,
            row.live_gpus.to_string(),
            row.unmet_backpressure.to_string(),
            format_seconds(row.lbp_max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_actions<W: IoWrite>(writer: W, actions: &[ActionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ACTIONS_HEADER)?;
    for a in actions {
        w.write_record([
            format_seconds(a.time),
            a.kind.as_str().to_string(),
            a.instance_id.to_string(),
            a.reason.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Waiting-time predictions and, where the wait completed, what actually
/// happened. Unrealized estimates leave the last field empty.
pub fn write_estimates<W: IoWrite>(writer: W, estimates: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ESTIMATES_HEADER)?;
    for e in estimates {
        w.write_record([
            e.group_id.to_string(),
            format_seconds(e.time),
            format_seconds(e.estimated_wait),
            e.realized_wait.map(format_seconds).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the full artifact set into `dir` and return the summary it stored.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &ScenarioConfig,
    run: &RunResult,
) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    write_records(
        File::create(dir.join("records.csv"))?,
        &run.records,
        cfg.metrics.itl_mean,
    )?;
    write_timeline(File::create(dir.join("timeline.csv"))?, &run.timeline)?;
    write_actions(File::create(dir.join("actions.csv"))?, &run.actions)?;
    write_estimates(File::create(dir.join("estimates.csv"))?, &run.estimates)?;
    let summary = summarize(cfg, run);
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(dir.join("summary.json"), json)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::slo_attainment;
    use crate::workload::{Request, RequestClass};

    fn record(id: u64, arrival: f64, first_token: f64, max_gap: f64) -> FinishedRequest {
        FinishedRequest {
            request: Request {
                id,
                arrival_time: arrival,
                class: RequestClass::Interactive,
                model_id: "small".into(),
                input_tokens: 64,
                output_tokens: 4,
                ttft_slo: 10.0,
                itl_slo: 0.2,
            },
            first_token_at: first_token,
            completion_at: first_token + 1.0,
            max_gap,
            gap_sum: max_gap * 3.0,
            gap_count: 3,
            evictions: 0,
        }
    }

    #[test]
    fn records_rows_are_id_ordered_with_headers() {
        let records = vec![
            record(2, 0.0, 5.0, 0.1),
            record(0, 0.0, 12.0, 0.1),
            record(1, 0.0, 1.0, 0.3),
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &records, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RECORDS_HEADER.join(","));
        let ids: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
        assert!(text.contains("false"), "the TTFT miss must serialize");
    }

    #[test]
    fn attainment_recomputed_from_csv_matches_the_scorer() {
        // Mix of outcomes, including a warmup-era row the scorer skips.
        let records = vec![
            record(0, 5.0, 6.0, 0.1),
            record(1, 40.0, 45.0, 0.1),
            record(2, 41.0, 60.0, 0.1),
            record(3, 42.0, 43.0, 0.5),
            record(4, 90.0, 95.0, 0.15),
        ];
        let warmup = 30.0;
        let expected = slo_attainment(&records, warmup, false);

        let mut buf = Vec::new();
        write_records(&mut buf, &records, false).unwrap();
        // Independent pass: nothing below touches the scorer, only the CSV.
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        let hdr = rdr.headers().unwrap().clone();
        let col = |name: &str| hdr.iter().position(|h| h == name).unwrap();
        let (arrival_c, ttft_c, itl_c) = (col("arrival"), col("ttft_met"), col("itl_met"));
        let (mut n, mut ttft, mut itl, mut both) = (0u64, 0u64, 0u64, 0u64);
        for row in rdr.records() {
            let row = row.unwrap();
            if row[arrival_c].parse::<f64>().unwrap() < warmup {
                continue;
            }
            n += 1;
            let t = &row[ttft_c] == "true";
            let i = &row[itl_c] == "true";
            ttft += u64::from(t);
            itl += u64::from(i);
            both += u64::from(t && i);
        }
        assert_eq!(n, expected.scored);
        assert_eq!(ttft as f64 / n as f64, expected.ttft);
        assert_eq!(itl as f64 / n as f64, expected.itl);
        assert_eq!(both as f64 / n as f64, expected.combined);
    }

    #[test]
    fn estimates_leave_unrealized_waits_empty() {
        let estimates = vec![
            EstimateRow {
                group_id: 9,
                time: 1.0,
                estimated_wait: 4.5,
                realized_wait: Some(5.25),
            },
            EstimateRow {
                group_id: 10,
                time: 2.0,
                estimated_wait: 3.0,
                realized_wait: None,
            },
        ];
        let mut buf = Vec::new();
        write_estimates(&mut buf, &estimates).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ESTIMATES_HEADER.join(","));
        assert!(lines[1].ends_with(",5.250000"));
        assert!(lines[2].ends_with(","), "missing realization is an empty cell");
    }

    #[test]
    fn timeline_packs_per_instance_batch_sizes() {
        let row = TimelineRow {
            clock: 3.0,
            n_interactive: 1,
            n_mixed: 1,
            n_batch: 0,
            queue_len_batch: 7,
            ibp: 1.0 / 3.0,
            bbp: 2,
            max_batch: vec![(0, 24), (3, 96)],
            live_gpus: 2,
            unmet_backpressure: false,
            lbp_max: 0.98,
        };
        let mut buf = Vec::new();
        write_timeline(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("0:24;3:96"), "got: {text}");
    }
}
