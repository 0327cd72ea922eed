use serde::{Deserialize, Serialize};

use crate::agent::LossRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::pano::{ELEVATIONS, HEADINGS};
use crate::world::Episode;

/// Serializes each item on its own line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

fn lines<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::format(format!("{what}: blank line {}", i + 1)));
        }
        let v = serde_json::from_str(line).map_err(|e| Error::format(format!("{what}: line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeLine {
    instruction: Vec<String>,
    path: Vec<usize>,
}

/// Episodes without graph checks; see [`Episode::validate`].
pub fn parse_episodes(text: &str) -> Result<Vec<Episode>> {
    let raw: Vec<EpisodeLine> = lines(text, "episodes")?;
    raw.into_iter()
        .enumerate()
        .map(|(i, e)| {
            if e.path.is_empty() || e.instruction.is_empty() || e.instruction.iter().any(|t| t.is_empty()) {
                return Err(Error::format(format!(
                    "episode {} has an empty path or instruction",
                    i + 1
                )));
            }
            Ok(Episode {
                instruction: e.instruction,
                path: e.path,
            })
        })
        .collect()
}

/// One caption-pair line: a sub-view reference and its caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionPair {
    pub image: String,
    pub caption: String,
}

/// `<path>#<heading>,<elevation>`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRef {
    pub path: String,
    pub heading: usize,
    pub elevation: usize,
}

impl ImageRef {
    pub fn parse(s: &str) -> Result<Self> {
        let (path, idx) = s
            .rsplit_once('#')
            .ok_or_else(|| Error::format(format!("image reference {s:?} lacks '#'")))?;
        let (h, e) = idx
            .split_once(',')
            .ok_or_else(|| Error::format(format!("image reference {s:?} lacks ','")))?;
        let num = |v: &str, max: usize| -> Result<usize> {
            v.parse::<usize>()
                .ok()
                .filter(|n| *n < max)
                .ok_or_else(|| Error::format(format!("bad view index {v:?} in {s:?}")))
        };
        if path.is_empty() {
            return Err(Error::format(format!("image reference {s:?} has no path")));
        }
        Ok(ImageRef {
            path: path.to_string(),
            heading: num(h, HEADINGS)?,
            elevation: num(e, ELEVATIONS)?,
        })
    }

    pub fn format(&self) -> String {
        format!("{}#{},{}", self.path, self.heading, self.elevation)
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<CaptionPair>> {
    let pairs: Vec<CaptionPair> = lines(text, "caption pairs")?;
    for (i, p) in pairs.iter().enumerate() {
        ImageRef::parse(&p.image)?;
        if p.caption.trim().is_empty() {
            return Err(Error::format(format!("caption pair {} has an empty caption", i + 1)));
        }
    }
    Ok(pairs)
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<LossRecord>> {
    let trace: Vec<LossRecord> = lines(text, "loss trace")?;
    for (i, r) in trace.iter().enumerate() {
        if r.iter != i || !r.loss.is_finite() || r.parts.values().any(|v| !v.is_finite()) {
            return Err(Error::format(format!(
                "loss trace line {} is out of sequence or non-finite",
                i + 1
            )));
        }
    }
    Ok(trace)
}

pub fn parse_metrics(text: &str) -> Result<MetricsReport> {
    let r: MetricsReport = serde_json::from_str(text).map_err(|e| Error::format(format!("metrics: {e}")))?;
    r.validate()?;
    Ok(r)
}
