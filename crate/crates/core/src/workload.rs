//! Request workloads: synthetic generation and trace ingestion.
//!
//! Generation draws arrivals, prompt lengths, and output lengths from three
//! independent ChaCha streams derived from one master seed, so changing one
//! distribution never perturbs the others.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

pub type RequestId = u64;

const ARRIVAL_STREAM: u64 = 1;
const PROMPT_STREAM: u64 = 2;
const OUTPUT_STREAM: u64 = 3;

pub const TRACE_HEADER: [&str; 4] = ["request_id", "arrival_ns", "prompt_tokens", "output_tokens"];

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid distribution parameters: {0}")]
    InvalidDistributionParams(String),
    #[error("line {line}: {msg}")]
    ParseError { line: u64, msg: String },
    #[error("line {line}: token counts must be positive")]
    NonPositiveLength { line: u64 },
    #[error("request {id}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition { id: RequestId, from: RequestState, to: RequestState },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Lifecycle of a request. Co-located serving skips `KvTransferring`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestState {
    Queued,
    PrefillRunning,
    PrefillComplete,
    KvTransferring,
    DecodeQueued,
    Decoding,
    Complete,
}

impl RequestState {
    pub fn can_transition_to(self, to: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, to),
            (Queued, PrefillRunning)
                | (PrefillRunning, PrefillComplete)
                | (PrefillComplete, KvTransferring)
                | (PrefillComplete, DecodeQueued)
                | (PrefillComplete, Complete)
                | (KvTransferring, DecodeQueued)
                | (DecodeQueued, Decoding)
                | (DecodeQueued, Complete)
                | (Decoding, Complete)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival: SimTime,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub state: RequestState,
    pub tokens_emitted: u32,
    pub transitions: BTreeMap<RequestState, SimTime>,
}

impl Request {
    pub fn new(id: RequestId, arrival: SimTime, prompt_tokens: u32, output_tokens: u32) -> Self {
        assert!(prompt_tokens >= 1 && output_tokens >= 1, "token counts must be positive");
        let mut transitions = BTreeMap::new();
        transitions.insert(RequestState::Queued, arrival);
        Request {
            id,
            arrival,
            prompt_tokens,
            output_tokens,
            state: RequestState::Queued,
            tokens_emitted: 0,
            transitions,
        }
    }

    pub fn transition(&mut self, to: RequestState, at: SimTime) -> Result<(), WorkloadError> {
        if !self.state.can_transition_to(to) {
            return Err(WorkloadError::IllegalTransition { id: self.id, from: self.state, to });
        }
        if to == RequestState::Complete && self.tokens_emitted != self.output_tokens {
            return Err(WorkloadError::IllegalTransition { id: self.id, from: self.state, to });
        }
        self.state = to;
        self.transitions.insert(to, at);
        Ok(())
    }

    /// Records one generated token. Returns true when the request has
    /// produced all of its output.
    pub fn emit_token(&mut self) -> bool {
        assert!(self.tokens_emitted < self.output_tokens, "request {} over-emitted", self.id);
        self.tokens_emitted += 1;
        self.is_finished()
    }

    pub fn is_finished(&self) -> bool {
        self.tokens_emitted == self.output_tokens
    }

    /// Tokens whose KV entries exist after the last emitted token.
    pub fn context_tokens(&self) -> u32 {
        self.prompt_tokens + self.tokens_emitted
    }

    pub fn remaining_tokens(&self) -> u32 {
        self.output_tokens - self.tokens_emitted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    Poisson { rate_rps: f64 },
    FixedInterval { gap_s: f64 },
    BatchAtZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed {
        value: u32,
    },
    /// Inclusive integer range.
    Uniform {
        lo: u32,
        hi: u32,
    },
    /// `exp(N(mu, sigma))`, clamped to `[lo, hi]` then rounded.
    Lognormal {
        mu: f64,
        sigma: f64,
        lo: u32,
        hi: u32,
    },
}

impl LengthDist {
    fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidDistributionParams(format!("{what}: {m}")));
        match *self {
            LengthDist::Fixed { value: 0 } => bad("fixed length must be >= 1".into()),
            LengthDist::Uniform { lo, hi } if lo == 0 || lo > hi => {
                bad(format!("uniform requires 1 <= lo <= hi, got [{lo}, {hi}]"))
            }
            LengthDist::Lognormal { mu, sigma, lo, hi }
                if !mu.is_finite() || !(sigma.is_finite() && sigma >= 0.0) || lo == 0 || lo > hi =>
            {
                bad(format!("lognormal(mu={mu}, sigma={sigma}) clamp [{lo}, {hi}] is invalid"))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { lo, hi } => rng.random_range(lo..=hi),
            LengthDist::Lognormal { mu, sigma, lo, hi } => {
                let x: f64 = LogNormal::new(mu, sigma).expect("validated").sample(rng);
                x.clamp(lo as f64, hi as f64).round_ties_even() as u32
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    pub num_requests: usize,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self.arrival {
            ArrivalProcess::Poisson { rate_rps } if !(rate_rps.is_finite() && rate_rps > 0.0) => {
                return Err(WorkloadError::InvalidDistributionParams(format!(
                    "poisson rate must be > 0, got {rate_rps}"
                )))
            }
            ArrivalProcess::FixedInterval { gap_s } if !(gap_s.is_finite() && gap_s >= 0.0) => {
                return Err(WorkloadError::InvalidDistributionParams(format!(
                    "fixed interval gap must be >= 0, got {gap_s}"
                )))
            }
            _ => {}
        }
        self.prompt_len.validate("prompt_len")?;
        self.output_len.validate("output_len")
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates requests sorted by arrival time. Pure in `spec`.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>, WorkloadError> {
    spec.validate()?;
    let n = spec.num_requests;
    let arrivals: Vec<SimTime> = match spec.arrival {
        ArrivalProcess::BatchAtZero => vec![SimTime::ZERO; n],
        ArrivalProcess::FixedInterval { gap_s } => (0..n).map(|i| SimTime::from_secs_f64(gap_s * i as f64)).collect(),
        ArrivalProcess::Poisson { rate_rps } => {
            let mut rng = stream(spec.seed, ARRIVAL_STREAM);
            let exp = Exp::new(rate_rps).expect("validated");
            let mut t = 0.0f64;
            (0..n)
                .map(|_| {
                    t += exp.sample(&mut rng);
                    SimTime::from_secs_f64(t)
                })
                .collect()
        }
    };
    let mut prompt_rng = stream(spec.seed, PROMPT_STREAM);
    let mut output_rng = stream(spec.seed, OUTPUT_STREAM);
    Ok(arrivals
        .into_iter()
        .enumerate()
        .map(|(i, at)| {
            let p = spec.prompt_len.sample(&mut prompt_rng).max(1);
            let o = spec.output_len.sample(&mut output_rng).max(1);
            Request::new(i as RequestId, at, p, o)
        })
        .collect())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    parse_trace(file)
}

/// Parses the trace CSV format. Rows are stably sorted by arrival time.
pub fn parse_trace<R: io::Read>(reader: R) -> Result<Vec<Request>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| WorkloadError::ParseError { line: 1, msg: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(WorkloadError::ParseError {
            line: 1,
            msg: format!("expected header `{}`", TRACE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| WorkloadError::ParseError {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<i64, WorkloadError> {
            let raw = rec.get(i).unwrap_or("").trim();
            raw.parse::<i64>()
                .map_err(|e| WorkloadError::ParseError { line, msg: format!("{}: `{raw}`: {e}", TRACE_HEADER[i]) })
        };
        let (id, arrival, prompt, output) = (field(0)?, field(1)?, field(2)?, field(3)?);
        if id < 0 || arrival < 0 {
            return Err(WorkloadError::ParseError {
                line,
                msg: "request_id and arrival_ns must be non-negative".into(),
            });
        }
        if prompt <= 0 || output <= 0 {
            return Err(WorkloadError::NonPositiveLength { line });
        }
        let to_u32 =
            |v: i64| u32::try_from(v).map_err(|_| WorkloadError::ParseError { line, msg: format!("{v} out of range") });
        out.push(Request::new(id as u64, SimTime(arrival as u64), to_u32(prompt)?, to_u32(output)?));
    }
    out.sort_by_key(|r| r.arrival);
    Ok(out)
}

pub fn write_trace<W: io::Write>(requests: &[Request], writer: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| WorkloadError::Io(io::Error::other(e));
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in requests {
        w.write_record([
            r.id.to_string(),
            r.arrival.as_nanos().to_string(),
            r.prompt_tokens.to_string(),
            r.output_tokens.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
