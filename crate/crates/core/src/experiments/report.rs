use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pano::MaskStrategy;

/// Unseen-world results of agents fine-tuned at one mix ratio, one entry
/// per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRow {
    pub ratio: f64,
    #[serde(rename = "SR")]
    pub sr: Vec<f64>,
    #[serde(rename = "SPL")]
    pub spl: Vec<f64>,
    pub median_sr: f64,
    pub median_spl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRow {
    pub rank: usize,
    pub trainable: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRow {
    pub strategy: String,
    pub mask_fraction: f64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
}

/// Fréchet distances to the target domain for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRow {
    pub seed: u64,
    pub base: f64,
    pub adapted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case", deny_unknown_fields)]
pub enum Report {
    MixRatio {
        seeds: Vec<u64>,
        rows: Vec<MixRow>,
    },
    Rank {
        rows: Vec<RankRow>,
    },
    Mask {
        rows: Vec<MaskRow>,
    },
    DomainGap {
        rows: Vec<DomainRow>,
        median_base: f64,
        median_adapted: f64,
    },
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::format("report contains non-finite values"))
    }
}

fn rate(v: f64) -> Result<()> {
    if (0.0..=100.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::format(format!("rate {v} outside [0, 100]")))
    }
}

impl Report {
    pub fn validate(&self) -> Result<()> {
        match self {
            Report::MixRatio { seeds, rows } => {
                if seeds.is_empty() || rows.is_empty() {
                    return Err(Error::format("mix-ratio report needs seeds and rows"));
                }
                for r in rows {
                    if !(0.0..=1.0).contains(&r.ratio) || r.sr.len() != seeds.len() || r.spl.len() != seeds.len() {
                        return Err(Error::format(format!("malformed row for ratio {}", r.ratio)));
                    }
                    finite(&[r.median_sr, r.median_spl])?;
                    for (s, p) in r.sr.iter().zip(&r.spl) {
                        rate(*s)?;
                        rate(*p)?;
                        if p > &(s + 1e-9) {
                            return Err(Error::format("SPL exceeds SR"));
                        }
                    }
                    if (median(&r.sr) - r.median_sr).abs() > 1e-9 || (median(&r.spl) - r.median_spl).abs() > 1e-9 {
                        return Err(Error::format("row median does not match its values"));
                    }
                }
            }
            Report::Rank { rows } => {
                if rows.is_empty() {
                    return Err(Error::format("rank report has no rows"));
                }
                for r in rows {
                    finite(&[r.initial_loss, r.final_loss, r.fid])?;
                    if r.rank == 0 || r.trainable == 0 || r.fid < 0.0 || r.final_loss < 0.0 || r.initial_loss < 0.0 {
                        return Err(Error::format(format!("malformed row for rank {}", r.rank)));
                    }
                }
            }
            Report::Mask { rows } => {
                if rows.is_empty() {
                    return Err(Error::format("mask report has no rows"));
                }
                for r in rows {
                    MaskStrategy::parse(&r.strategy).map_err(|e| Error::format(e.to_string()))?;
                    finite(&[r.mask_fraction, r.sr, r.spl])?;
                    if !(0.0..=1.0).contains(&r.mask_fraction) || r.spl > r.sr + 1e-9 {
                        return Err(Error::format(format!("malformed row for {}", r.strategy)));
                    }
                    rate(r.sr)?;
                    rate(r.spl)?;
                }
            }
            Report::DomainGap {
                rows,
                median_base,
                median_adapted,
            } => {
                if rows.is_empty() {
                    return Err(Error::format("domain-gap report has no rows"));
                }
                let base: Vec<f64> = rows.iter().map(|r| r.base).collect();
                let adapted: Vec<f64> = rows.iter().map(|r| r.adapted).collect();
                finite(&base)?;
                finite(&adapted)?;
                if base.iter().chain(&adapted).any(|v| *v < 0.0) {
                    return Err(Error::format("negative Fréchet distance"));
                }
                if (median(&base) - median_base).abs() > 1e-9 || (median(&adapted) - median_adapted).abs() > 1e-9 {
                    return Err(Error::format("medians do not match rows"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn validate_report(text: &str) -> Result<Report> {
    let r: Report = serde_json::from_str(text).map_err(|e| Error::format(format!("report: {e}")))?;
    r.validate()?;
    Ok(r)
}
