//! Navigation metrics and a Fréchet distance between image feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::world::{NodeId, WorldGraph};

pub const SUCCESS_RADIUS: f64 = 3.0;

/// A predicted path and the ground truth it should have followed.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeResult<'a> {
    pub graph: &'a WorldGraph,
    pub predicted: &'a [NodeId],
    pub truth: &'a [NodeId],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub tl: f64,
    pub ne: f64,
    pub success: bool,
    pub spl: f64,
    pub gp: f64,
}

/// Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(rename = "TL")]
    pub tl: f64,
    #[serde(rename = "NE")]
    pub ne: f64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
    #[serde(rename = "GP")]
    pub gp: f64,
    pub episodes: Vec<EpisodeMetrics>,
}

impl MetricsReport {
    /// Checks the report invariants `0 ≤ SPL ≤ SR ≤ 100`, `NE, TL ≥ 0`.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.tl, self.ne, self.sr, self.spl, self.gp]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::format("metrics contain non-finite values"));
        }
        if !(0.0 <= self.spl && self.spl <= self.sr + 1e-9 && self.sr <= 100.0) {
            return Err(Error::format(format!(
                "need 0 <= SPL <= SR <= 100, got SPL {} SR {}",
                self.spl, self.sr
            )));
        }
        if self.ne < 0.0 || self.tl < 0.0 {
            return Err(Error::format("NE and TL must be non-negative"));
        }
        for e in &self.episodes {
            if e.spl > f64::from(u8::from(e.success)) + 1e-12 || e.spl < 0.0 || e.ne < 0.0 || e.tl < 0.0 {
                return Err(Error::format("per-episode metrics out of range"));
            }
        }
        Ok(())
    }
}

fn episode(r: &EpisodeResult, radius: f64) -> Result<EpisodeMetrics> {
    let (Some(&start), Some(&goal), Some(&last)) = (r.truth.first(), r.truth.last(), r.predicted.last()) else {
        return Err(Error::invalid("paths must be nonempty"));
    };
    if r.predicted[0] != start {
        return Err(Error::invalid(format!(
            "prediction starts at {} instead of {start}",
            r.predicted[0]
        )));
    }
    let tl = r.graph.path_length(r.predicted)?;
    let ne = r.graph.geodesic(last, goal)?;
    let d = r.graph.geodesic(start, goal)?;
    let success = ne <= radius;
    let s = f64::from(u8::from(success));
    let spl = if tl == 0.0 && d == 0.0 { s } else { s * d / tl.max(d) };
    Ok(EpisodeMetrics {
        tl,
        ne,
        success,
        spl,
        gp: d - ne,
    })
}

/// TL, NE, SR, SPL and GP averaged over episodes; SR and SPL in percent.
pub fn evaluate(results: &[EpisodeResult], success_radius: f64) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::invalid("no episodes to evaluate"));
    }
    if !(success_radius >= 0.0) {
        return Err(Error::invalid("success radius must be non-negative"));
    }
    let episodes = results
        .iter()
        .map(|r| episode(r, success_radius))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / episodes.len() as f64;
    let report = MetricsReport {
        tl: mean(&|e| e.tl),
        ne: mean(&|e| e.ne),
        sr: 100.0 * mean(&|e| f64::from(u8::from(e.success))),
        spl: 100.0 * mean(&|e| e.spl),
        gp: mean(&|e| e.gp),
        episodes,
    };
    report.validate()?;
    Ok(report)
}

/// Mean reduction in geodesic distance to the goal.
pub fn goal_progress(results: &[EpisodeResult]) -> Result<f64> {
    Ok(evaluate(results, SUCCESS_RADIUS)?.gp)
}

/// Frozen random 2-layer network mapping an image to a feature vector.
/// Images are box-resampled to `side × side × 3` first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    side: usize,
    w1: Tensor,
    w2: Tensor,
}

pub const FEATURE_DIM: usize = 16;

impl FeatureExtractor {
    pub fn new(seed: u64, side: usize, hidden: usize, dim: usize) -> Self {
        let mut r = crate::rng::stream(seed, "metrics.extractor");
        let input = side * side * 3;
        FeatureExtractor {
            side,
            w1: Tensor::randn(&[hidden, input], (2.0 / input as f64).sqrt(), &mut r),
            w2: Tensor::randn(&[dim, hidden], (1.0 / hidden as f64).sqrt(), &mut r),
        }
    }

    /// The extractor used by every report: seed 0, 8×8 input, 64 hidden, 16 out.
    pub fn standard() -> Self {
        Self::new(0, 8, 64, FEATURE_DIM)
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    fn resample(&self, img: &Tensor) -> Result<Vec<f64>> {
        let (h, w, c) = crate::pano::image_dims(img)?;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape("features", "empty image"));
        }
        let s = self.side;
        let mut out = vec![0.0; s * s * 3];
        for oy in 0..s {
            let (y0, y1) = (oy * h / s, ((oy + 1) * h).div_ceil(s).max(oy * h / s + 1));
            for ox in 0..s {
                let (x0, x1) = (ox * w / s, ((ox + 1) * w).div_ceil(s).max(ox * w / s + 1));
                for ch in 0..3 {
                    let mut sum = 0.0;
                    for y in y0..y1.min(h) {
                        for x in x0..x1.min(w) {
                            sum += img.data()[(y * w + x) * c + ch % c];
                        }
                    }
                    out[(oy * s + ox) * 3 + ch] = sum / ((y1.min(h) - y0) * (x1.min(w) - x0)) as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn features(&self, img: &Tensor) -> Result<Vec<f64>> {
        let x = Tensor::matrix(1, self.w1.cols(), self.resample(img)?)?;
        let mut h = crate::autodiff::matmul(&x, &self.w1.transpose2())?;
        h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let out = crate::autodiff::matmul(&h, &self.w2.transpose2())?;
        Ok(out.into_data())
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("feature rows must be nonempty and of equal length"));
        }
        let n = rows.len();
        if n < d + 1 {
            return Err(Error::invalid(format!(
                "need at least {} samples for {d}-d statistics, got {n}",
                d + 1
            )));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FeatureStats { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

pub fn feature_stats(images: &[Tensor], extractor: &FeatureExtractor) -> Result<FeatureStats> {
    let rows = images
        .iter()
        .map(|i| extractor.features(i))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&rows)
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the square-root trace
/// taken from the eigenvalues of `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", format!("{} vs {}", a.dim(), b.dim())));
    }
    let dmu = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let ea = eigen(ca.clone())?;
    let sqrt_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let m = &root_a * &cb * &root_a;
    let cross: f64 = eigen(m)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = dmu.norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between two image sets and the set sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrechetReport {
    pub fid: f64,
    pub images_a: usize,
    pub images_b: usize,
}

impl FrechetReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.fid.is_finite() && self.fid >= 0.0) {
            return Err(Error::format(format!(
                "Fréchet distance {} is not a finite non-negative number",
                self.fid
            )));
        }
        if self.images_a < 2 || self.images_b < 2 {
            return Err(Error::format("each set needs at least two images"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
