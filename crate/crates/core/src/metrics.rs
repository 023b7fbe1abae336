//! Depth-completion error metrics over pixels with valid groundtruth.

use serde::{Deserialize, Serialize};

use crate::depth_io::DepthMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pct_within_10: f64,
    pub n_evaluated: usize,
    /// Valid-groundtruth pixels whose prediction is `<= 0`; they fail every
    /// ratio criterion.
    pub n_nonpositive_pred: usize,
}

/// Boundary conventions for the ratio criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsOptions {
    /// `max(p/g, g/p) < 1.25^i` when true, `<=` otherwise.
    pub strict_delta: bool,
    /// `|p − g| <= 0.1·g` when true, `<` otherwise.
    pub inclusive_within_10: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            strict_delta: true,
            inclusive_within_10: true,
        }
    }
}

/// Slack for the ±10% boundary: depths are stored as `f32`, so `1.1·g`
/// rounded to single precision can land a few ulps outside the band.
const WITHIN_10_SLACK: f64 = 4.0 * f32::EPSILON as f64;

pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    evaluate_with(pred, gt, MetricsOptions::default())
}

pub fn evaluate_with(pred: &DepthMap, gt: &DepthMap, opts: MetricsOptions) -> Result<MetricsReport> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs groundtruth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let thresholds = [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    let mut n = 0usize;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut delta_hits = [0usize; 3];
    let mut within = 0usize;
    let mut nonpositive = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g <= 0.0 {
            continue;
        }
        let (p, g) = (f64::from(p), f64::from(g));
        n += 1;
        let err = p - g;
        sq += err * err;
        abs += err.abs();
        if p <= 0.0 {
            nonpositive += 1;
            continue;
        }
        let ratio = (p / g).max(g / p);
        for (hit, t) in delta_hits.iter_mut().zip(thresholds) {
            let pass = if opts.strict_delta { ratio < t } else { ratio <= t };
            if pass {
                *hit += 1;
            }
        }
        let band = 0.1 * g;
        let pass = if opts.inclusive_within_10 {
            err.abs() <= band * (1.0 + WITHIN_10_SLACK)
        } else {
            err.abs() < band
        };
        if pass {
            within += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(MetricsReport {
        rmse: (sq / n as f64).sqrt(),
        mae: abs / n as f64,
        delta1: pct(delta_hits[0]),
        delta2: pct(delta_hits[1]),
        delta3: pct(delta_hits[2]),
        pct_within_10: pct(within),
        n_evaluated: n,
        n_nonpositive_pred: nonpositive,
    })
}
