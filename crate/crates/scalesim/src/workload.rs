//! Workload generation and trace I/O.
//!
//! Arrival streams (Poisson or Gamma-renewal for burstiness control), token
//! length sampling (lognormal or empirical resampling), burstiness summary
//! via adjacent-window spike ratios, and the CSV trace format shared with
//! the CLI. Everything is seeded explicitly; the same spec always produces
//! the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Request class. Interactive traffic carries tight latency SLOs and is
/// never deliberately queued; batch traffic tolerates queueing up to its
/// TTFT deadline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestClass {
    Interactive,
    Batch,
}

impl RequestClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestClass::Interactive => "interactive",
            RequestClass::Batch => "batch",
        }
    }

    /// Default (TTFT, ITL) SLOs in seconds for the class.
    pub fn default_slos(self) -> (f64, f64) {
        match self {
            RequestClass::Interactive => (10.0, 0.2),
            RequestClass::Batch => (3600.0, 2.0),
        }
    }
}

impl std::str::FromStr for RequestClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "interactive" => Ok(RequestClass::Interactive),
            "batch" => Ok(RequestClass::Batch),
            other => Err(format!("unknown request class `{other}`")),
        }
    }
}

/// A single request as the engine sees it. `output_tokens` is ground truth
/// used only by the execution model; controllers must never read it.
#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub class: RequestClass,
    pub model_id: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub ttft_slo: f64,
    pub itl_slo: f64,
}

/// Interarrival process family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    Poisson,
    /// Renewal process with i.i.d. Gamma interarrivals. Shape 1/cv^2 and
    /// mean 1/mean_rate, so `cv` is the coefficient of variation of the
    /// interarrival time; cv = 1 degenerates to Poisson.
    Gamma,
}

/// Arrival stream description. `seed = None` means "derive from the
/// scenario master seed" and is resolved during scenario construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalSpec {
    pub process: ArrivalProcess,
    pub mean_rate: f64,
    #[serde(default = "default_cv")]
    pub cv: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_cv() -> f64 {
    1.0
}

impl ArrivalSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_rate > 0.0) || !self.mean_rate.is_finite() {
            return Err(SimError::validation(format!(
                "arrival mean_rate must be positive and finite, got {}",
                self.mean_rate
            )));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(SimError::validation(format!(
                "arrival duration must be positive and finite, got {}",
                self.duration
            )));
        }
        if self.process == ArrivalProcess::Gamma && self.cv < 1.0 {
            return Err(SimError::validation(format!(
                "gamma arrivals require cv >= 1, got {}",
                self.cv
            )));
        }
        Ok(())
    }
}

/// Generate sorted arrival times in `[0, spec.duration)`.
pub fn gen_arrivals(spec: &ArrivalSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
    let mut out = Vec::new();
    let mut t = 0.0f64;
    match spec.process {
        ArrivalProcess::Poisson => {
            let exp = Exp::new(spec.mean_rate)
                .map_err(|e| SimError::validation(format!("bad poisson rate: {e}")))?;
            loop {
                t += exp.sample(&mut rng);
                if t >= spec.duration {
                    break;
                }
                out.push(t);
            }
        }
        ArrivalProcess::Gamma => {
            let shape = 1.0 / (spec.cv * spec.cv);
            let scale = 1.0 / (spec.mean_rate * shape);
            let gamma = Gamma::new(shape, scale)
                .map_err(|e| SimError::validation(format!("bad gamma parameters: {e}")))?;
            loop {
                t += gamma.sample(&mut rng);
                if t >= spec.duration {
                    break;
                }
                out.push(t);
            }
        }
    }
    Ok(out)
}

/// Token length distribution. Lognormal parameters are (location, scale) of
/// the underlying normal, so the median is e^location. Empirical tables are
/// resampled with replacement as joint (input, output) pairs to preserve
/// their correlation.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenDist {
    Lognormal {
        input_location: f64,
        input_scale: f64,
        output_location: f64,
        output_scale: f64,
        seed: u64,
    },
    Empirical {
        table: Vec<(u64, u64)>,
        seed: u64,
    },
}

/// Bundled (input, output) sample with a long right tail, shaped like chat
/// traces: short prompts dominate, a few huge ones stretch the tail.
pub const BUILTIN_TOKEN_TABLE: &[(u64, u64)] = &[
    (21, 42),
    (34, 88),
    (45, 61),
    (52, 130),
    (63, 95),
    (71, 204),
    (88, 77),
    (96, 150),
    (110, 230),
    (125, 310),
    (140, 118),
    (162, 270),
    (185, 356),
    (210, 160),
    (238, 420),
    (270, 215),
    (320, 520),
    (410, 388),
    (540, 700),
    (760, 455),
    (1100, 940),
    (1600, 610),
    (2400, 1300),
    (3900, 820),
];

/// Fit lognormal (location, scale) to positive samples by moments of ln(x).
pub fn fit_lognormal(samples: &[u64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(SimError::validation(
            "lognormal fit needs at least two samples",
        ));
    }
    if samples.iter().any(|&s| s == 0) {
        return Err(SimError::validation("lognormal fit needs positive samples"));
    }
    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|&s| (s as f64).ln()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// The builtin distribution: lognormal fit to [`BUILTIN_TOKEN_TABLE`].
pub fn builtin_token_dist(seed: u64) -> TokenDist {
    let inputs: Vec<u64> = BUILTIN_TOKEN_TABLE.iter().map(|&(i, _)| i).collect();
    let outputs: Vec<u64> = BUILTIN_TOKEN_TABLE.iter().map(|&(_, o)| o).collect();
    let (il, is) = fit_lognormal(&inputs).expect("builtin table is valid");
    let (ol, os) = fit_lognormal(&outputs).expect("builtin table is valid");
    TokenDist::Lognormal {
        input_location: il,
        input_scale: is,
        output_location: ol,
        output_scale: os,
        seed,
    }
}

/// Draw `n` (input_tokens, output_tokens) pairs. Counts are rounded and
/// floored at 1 token.
pub fn sample_tokens(dist: &TokenDist, n: usize) -> Result<Vec<(u64, u64)>> {
    match dist {
        TokenDist::Lognormal {
            input_location,
            input_scale,
            output_location,
            output_scale,
            seed,
        } => {
            for (name, scale) in [("input_scale", input_scale), ("output_scale", output_scale)] {
                if *scale < 0.0 || !scale.is_finite() {
                    return Err(SimError::validation(format!(
                        "{name} must be non-negative and finite, got {scale}"
                    )));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let din = LogNormal::new(*input_location, *input_scale)
                .map_err(|e| SimError::validation(format!("bad input lognormal: {e}")))?;
            let dout = LogNormal::new(*output_location, *output_scale)
                .map_err(|e| SimError::validation(format!("bad output lognormal: {e}")))?;
            Ok((0..n)
                .map(|_| {
                    let i = din.sample(&mut rng).round().max(1.0) as u64;
                    let o = dout.sample(&mut rng).round().max(1.0) as u64;
                    (i, o)
                })
                .collect())
        }
        TokenDist::Empirical { table, seed } => {
            if table.is_empty() {
                return Err(SimError::validation("empirical token table is empty"));
            }
            if table.iter().any(|&(i, o)| i == 0 || o == 0) {
                return Err(SimError::validation(
                    "empirical token table entries must be >= 1 token",
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..n)
                .map(|_| {
                    let k = rand::Rng::gen_range(&mut rng, 0..table.len());
                    table[k]
                })
                .collect())
        }
    }
}

/// Ratio of arrival counts in adjacent fixed-width windows starting at 0.
/// A zero-count denominator yields `f64::INFINITY` rather than dropping the
/// window, so bursts out of silence stay visible.
pub fn spike_ratio(arrivals: &[f64], window: f64) -> Result<Vec<f64>> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(SimError::validation(format!(
            "spike window must be positive and finite, got {window}"
        )));
    }
    let last = match arrivals.last() {
        Some(&t) => t,
        None => {
            return Err(SimError::validation(
                "spike_ratio needs at least two windows of arrivals",
            ))
        }
    };
    let n_windows = (last / window).floor() as usize + 1;
    if n_windows < 2 {
        return Err(SimError::validation(
            "spike_ratio needs at least two windows of arrivals",
        ));
    }
    let mut counts = vec![0u64; n_windows];
    for &t in arrivals {
        let idx = ((t / window).floor() as usize).min(n_windows - 1);
        counts[idx] += 1;
    }
    Ok(counts
        .windows(2)
        .map(|w| {
            if w[0] == 0 {
                f64::INFINITY
            } else {
                w[1] as f64 / w[0] as f64
            }
        })
        .collect())
}

pub const TRACE_HEADER: [&str; 8] = [
    "id",
    "arrival_time",
    "class",
    "model_id",
    "input_tokens",
    "output_tokens",
    "ttft_slo",
    "itl_slo",
];

/// Format a time in seconds: exact round-trip representation padded to at
/// least six decimal digits.
pub fn format_seconds(v: f64) -> String {
    let mut s = format!("{v}");
    match s.find('.') {
        Some(dot) => {
            let frac = s.len() - dot - 1;
            if frac < 6 {
                for _ in frac..6 {
                    s.push('0');
                }
            }
        }
        None => s.push_str(".000000"),
    }
    s
}

/// Write requests as a trace CSV.
pub fn save_trace<W: std::io::Write>(requests: &[Request], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for r in requests {
        w.write_record([
            r.id.to_string(),
            format_seconds(r.arrival_time),
            r.class.as_str().to_string(),
            r.model_id.clone(),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
            format_seconds(r.ttft_slo),
            format_seconds(r.itl_slo),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Load a trace CSV, validating the header, per-row fields (errors name the
/// offending line), monotone non-decreasing arrival times and id uniqueness.
pub fn load_trace<R: std::io::Read>(reader: R) -> Result<Vec<Request>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    {
        let headers = rdr.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != TRACE_HEADER {
            return Err(SimError::validation(format!(
                "trace header mismatch: expected {:?}, got {:?}",
                TRACE_HEADER, got
            )));
        }
    }
    let mut out: Vec<Request> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i).ok_or_else(|| {
                SimError::validation(format!("line {line}: missing field `{name}`"))
            })
        };
        let parse_u64 = |i: usize, name: &str| -> Result<u64> {
            field(i, name)?.trim().parse::<u64>().map_err(|e| {
                SimError::validation(format!("line {line}: bad {name}: {e}"))
            })
        };
        let parse_f64 = |i: usize, name: &str| -> Result<f64> {
            let v = field(i, name)?.trim().parse::<f64>().map_err(|e| {
                SimError::validation(format!("line {line}: bad {name}: {e}"))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::validation(format!(
                    "line {line}: {name} must be finite and non-negative, got {v}"
                )));
            }
            Ok(v)
        };
        let id = parse_u64(0, "id")?;
        let arrival_time = parse_f64(1, "arrival_time")?;
        let class: RequestClass = field(2, "class")?
            .trim()
            .parse()
            .map_err(|e| SimError::validation(format!("line {line}: {e}")))?;
        let model_id = field(3, "model_id")?.trim().to_string();
        if model_id.is_empty() {
            return Err(SimError::validation(format!(
                "line {line}: model_id must not be empty"
            )));
        }
        let input_tokens = parse_u64(4, "input_tokens")?;
        let output_tokens = parse_u64(5, "output_tokens")?;
        if input_tokens == 0 || output_tokens == 0 {
            return Err(SimError::validation(format!(
                "line {line}: token counts must be >= 1"
            )));
        }
        if !seen.insert(id) {
            return Err(SimError::validation(format!(
                "line {line}: duplicate request id {id}"
            )));
        }
        if let Some(prev) = out.last() {
            if arrival_time < prev.arrival_time {
                return Err(SimError::validation(format!(
                    "line {line}: arrival times must be non-decreasing ({} after {})",
                    arrival_time, prev.arrival_time
                )));
            }
        }
        out.push(Request {
            id,
            arrival_time,
            class,
            model_id,
            input_tokens,
            output_tokens,
            ttft_slo: parse_f64(6, "ttft_slo")?,
            itl_slo: parse_f64(7, "itl_slo")?,
        });
    }
    Ok(out)
}
