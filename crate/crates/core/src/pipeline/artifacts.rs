use std::fs;
use std::path::Path;

use nalgebra::DVector;

use super::eval::{class_text_embeddings, Model};
use super::experiment::RunReport;
use super::train::TrainOutcome;
use crate::agents::linguistic::{unpack_prompts, LinguisticUnit, TextMode};
use crate::agents::{AblationFlags, Agent, AgentMemory, LinguisticUnitParams};
use crate::datagen::{Benchmark, DatasetSplit};
use crate::encoders::{Embedding, FeatureProvider, FrozenEncoders};
use crate::error::{Error, Result};
use crate::messaging::{AgentId, Payload, TraceLog};

pub const REPORT_JSON: &str = "report.json";
pub const TRAINING_LOG_CSV: &str = "training_log.csv";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SHOTS_CSV: &str = "shots_curve.csv";
pub const EMBEDDINGS_F32: &str = "embeddings_dump.f32";
pub const EMBEDDINGS_INDEX: &str = "embeddings_index.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_text(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(name), contents)
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write_text(dir, REPORT_JSON, &serde_json::to_string_pretty(report)?)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes one seed's training log, adapter and message trace. With several
/// seeds each goes to its own `seed<N>/` subdirectory.
pub fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(TRAINING_LOG_CSV), outcome.training_log_csv())?;
    outcome.params.save(dir, &outcome.backbone_hash)?;
    let trace = dir.join(TRACE_JSONL);
    if trace.exists() {
        fs::remove_file(&trace).map_err(|e| Error::io(&trace, e))?;
    }
    for t in &outcome.traces {
        t.append_to(&trace)?;
    }
    Ok(())
}

/// Unit-norm embeddings of OOD test images and of every class prompt under
/// the frozen and the adapted model, as little-endian f32 rows, plus a CSV
/// index describing each row.
pub fn dump_embeddings(
    dir: &Path,
    benchmark: &Benchmark,
    split: &DatasetSplit,
    adapted: Model<'_>,
) -> Result<usize> {
    let classes: Vec<usize> = (0..benchmark.classes.len()).collect();
    let mut rows: Vec<(DVector<f64>, String)> = Vec::new();
    for (state, model) in [("frozen", Model::Frozen), ("adapted", adapted)] {
        for (c, t) in classes.iter().zip(class_text_embeddings(benchmark, model, &classes)?) {
            let class = &benchmark.classes[*c];
            rows.push((t, format!("text,{},{:?},{state},", class.name, class.tag)));
        }
    }
    for &(id, c) in &split.test {
        let class = &benchmark.classes[c];
        let e = benchmark.image_features(id)?.to_vector();
        rows.push((e, format!("image,{},{:?},frozen,{id}", class.name, class.tag)));
    }
    let mut bytes = Vec::with_capacity(rows.len() * benchmark.d_embed() * 4);
    let mut index = String::from("row,kind,class,tag,state,sample_id\n");
    for (i, (v, meta)) in rows.iter().enumerate() {
        let n = v.norm();
        for x in v.iter() {
            bytes.extend_from_slice(&((x / n) as f32).to_le_bytes());
        }
        index.push_str(&format!("{i},{meta}\n"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(EMBEDDINGS_F32), bytes)?;
    write(&dir.join(EMBEDDINGS_INDEX), index)?;
    Ok(rows.len())
}

/// Recomputes the text features the linguistic unit posted in round `step`
/// from the messages it received, and checks them against the trace.
pub fn replay_linguistic(
    trace: &TraceLog,
    step: u64,
    encoders: &FrozenEncoders,
    params: &LinguisticUnitParams,
    flags: &AblationFlags,
) -> Result<Vec<Embedding>> {
    let inbound = trace.inbound(AgentId::Linguistic, step);
    let unit = LinguisticUnit {
        encoders,
        params,
        mode: if flags.contextual_text() {
            TextMode::Contextual
        } else {
            TextMode::Standard
        },
    };
    // Parse once more up front so a damaged trace reports the missing edge.
    unpack_prompts(&inbound, AgentId::Linguistic)?;
    let (out, _) = unit.run(&inbound, &AgentMemory::initial(AgentId::Linguistic))?;
    let replayed: Vec<Embedding> = out
        .outbox
        .into_iter()
        .find_map(|(_, p)| match p {
            Payload::Features(f) => Some(f),
            _ => None,
        })
        .unwrap_or_default();
    let recorded = trace
        .outbound(AgentId::Linguistic, step)
        .into_iter()
        .find_map(|m| match m.payload {
            Payload::Features(f) => Some(f),
            _ => None,
        })
        .ok_or(Error::Protocol {
            from: AgentId::Linguistic,
            to: AgentId::Coordinator,
            payload: "FEATURES",
        })?;
    if replayed != recorded {
        return Err(Error::InvalidMessage(format!(
            "replay of round {step} does not reproduce the recorded text features"
        )));
    }
    Ok(replayed)
}
