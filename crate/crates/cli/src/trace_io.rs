//! Line-delimited JSON traces: a header line, one line per student step,
//! and a closing line with the final latent.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use echo_core::{GuidanceConfig, LatentVideo, RunKind, RunSeeds, SamplerTrace, StepRecord};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Header {
    kind: RunKind,
    config: GuidanceConfig,
    total_steps: usize,
    student_steps: usize,
    teacher_steps: usize,
    seeds: RunSeeds,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header(Header),
    Step(StepRecord),
    Final { final_latent: LatentVideo },
}

pub fn write_trace<W: Write>(trace: &SamplerTrace, mut w: W) -> Result<()> {
    let mut emit = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(&Line::Header(Header {
        kind: trace.kind,
        config: trace.config.clone(),
        total_steps: trace.total_steps,
        student_steps: trace.student_steps,
        teacher_steps: trace.teacher_steps,
        seeds: trace.seeds,
    }))?;
    for r in &trace.records {
        emit(&Line::Step(r.clone()))?;
    }
    emit(&Line::Final {
        final_latent: trace.final_latent.clone(),
    })?;
    w.flush()?;
    Ok(())
}

pub fn trace_to_string(trace: &SamplerTrace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_trace<R: BufRead>(r: R) -> Result<SamplerTrace> {
    let mut header = None;
    let mut records = Vec::new();
    let mut final_latent = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).with_context(|| format!("trace line {}", i + 1))?;
        match parsed {
            Line::Header(h) if header.is_none() && i == 0 => header = Some(h),
            Line::Header(_) => bail!("trace line {}: unexpected header", i + 1),
            Line::Step(_) | Line::Final { .. } if header.is_none() => bail!("trace does not start with a header"),
            Line::Step(_) if final_latent.is_some() => bail!("trace line {}: step after the final record", i + 1),
            Line::Step(s) => records.push(s),
            Line::Final { .. } if final_latent.is_some() => bail!("trace line {}: second final record", i + 1),
            Line::Final { final_latent: f } => final_latent = Some(f),
        }
    }
    let h = header.context("empty trace")?;
    let final_latent = final_latent.context("trace has no final record")?;
    Ok(SamplerTrace {
        kind: h.kind,
        config: h.config,
        total_steps: h.total_steps,
        student_steps: h.student_steps,
        teacher_steps: h.teacher_steps,
        seeds: h.seeds,
        records,
        final_latent,
    })
}
