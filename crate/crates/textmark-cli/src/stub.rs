//! Minimal external model for exercising the subprocess adapter: answers
//! every query with a fixed label. Useful as a protocol reference and in
//! integration tests.

use std::io::{BufRead, Write};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Args, Serialize)]
pub struct StubArgs {
    /// Label returned for every query.
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    /// Class count, used to shape the probability vector.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Include a probability vector in responses.
    #[arg(long, default_value_t = false)]
    pub probs: bool,
}

#[derive(Deserialize)]
struct Query {
    id: u64,
    #[allow(dead_code)]
    text: String,
}

#[derive(Serialize)]
struct Response {
    id: u64,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
}

pub fn run(args: &StubArgs) -> Result<(), CliError> {
    if args.label >= args.k {
        return Err(CliError::Usage(format!(
            "--label {} out of range for --k {}",
            args.label, args.k
        )));
    }
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    let probs = args.probs.then(|| {
        let off = 0.1 / (args.k - 1).max(1) as f64;
        (0..args.k)
            .map(|c| if c == args.label { 0.9 } else { off })
            .collect::<Vec<f64>>()
    });
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let query: Query = serde_json::from_str(&line)
            .map_err(|e| CliError::External(format!("malformed query line: {e}")))?;
        let response = Response {
            id: query.id,
            label: args.label,
            probs: probs.clone(),
        };
        serde_json::to_writer(&mut stdout, &response)?;
        stdout.write_all(b"\n")?;
        stdout.flush()?;
    }
    Ok(())
}
