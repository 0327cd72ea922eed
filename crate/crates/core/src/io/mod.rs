//! On-disk formats: binary checkpoints and panoramas, JSON worlds and
//! reports, JSON Lines episodes, caption pairs and loss traces.
//!
//! Every decoder works on in-memory bytes or text, returns an error for
//! malformed input and never panics.

mod checkpoint;
mod panorama;
mod records;
mod world_file;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_agent, load_generator, save_agent, save_generator, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use panorama::{decode_panorama, encode_panorama, PANORAMA_MAGIC};
pub use records::{parse_episodes, parse_loss_trace, parse_metrics, parse_pairs, to_jsonl, CaptionPair, ImageRef};
pub use world_file::{parse_world, read_world, write_world, NodeEntry, WorldFile, EPISODES_FILE, WORLD_FILE};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(format!("{} is not UTF-8", path.display())))
}

/// What [`validate_bytes`] recognised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Checkpoint,
    Panorama,
    World,
    Metrics,
    Report,
    Frechet,
    Episodes,
    CaptionPairs,
    LossTrace,
}

impl FileKind {
    pub fn name(self) -> &'static str {
        match self {
            FileKind::Checkpoint => "checkpoint",
            FileKind::Panorama => "panorama",
            FileKind::World => "world",
            FileKind::Metrics => "metrics",
            FileKind::Report => "report",
            FileKind::Frechet => "frechet",
            FileKind::Episodes => "episodes",
            FileKind::CaptionPairs => "caption-pairs",
            FileKind::LossTrace => "loss-trace",
        }
    }
}

/// Detects the format of `bytes` from its magic number or leading JSON
/// keys and checks it against that format's schema.
pub fn validate_bytes(bytes: &[u8]) -> Result<FileKind> {
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        decode_checkpoint(bytes)?;
        return Ok(FileKind::Checkpoint);
    }
    if bytes.starts_with(PANORAMA_MAGIC) {
        decode_panorama(bytes)?;
        return Ok(FileKind::Panorama);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("unrecognised binary file"))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(text) {
        if obj.contains_key("nodes") {
            parse_world(text)?.graph()?;
            return Ok(FileKind::World);
        }
        if obj.contains_key("TL") {
            parse_metrics(text)?;
            return Ok(FileKind::Metrics);
        }
        if obj.contains_key("experiment") {
            crate::experiments::validate_report(text)?;
            return Ok(FileKind::Report);
        }
        if obj.contains_key("fid") {
            serde_json::from_str::<crate::metrics::FrechetReport>(text)?.validate()?;
            return Ok(FileKind::Frechet);
        }
        if !text.trim_end().contains('\n') {
            return classify_line(text, &obj);
        }
        return Err(Error::format("JSON object of unknown kind"));
    }
    match serde_json::from_str::<serde_json::Value>(first) {
        Ok(serde_json::Value::Object(obj)) => classify_line(text, &obj),
        _ => Err(Error::format("not a recognised file format")),
    }
}

fn classify_line(text: &str, first: &serde_json::Map<String, serde_json::Value>) -> Result<FileKind> {
    if first.contains_key("instruction") {
        parse_episodes(text)?;
        Ok(FileKind::Episodes)
    } else if first.contains_key("image") {
        parse_pairs(text)?;
        Ok(FileKind::CaptionPairs)
    } else if first.contains_key("iter") {
        parse_loss_trace(text)?;
        Ok(FileKind::LossTrace)
    } else {
        Err(Error::format("JSON Lines of unknown kind"))
    }
}
