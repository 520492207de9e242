//! Slope-based division of a price series into labeled market dynamics.
//!
//! A centered moving average removes high-frequency noise, strict local
//! extrema of the smoothed series cut the range into chunks, and adjacent
//! chunks with similar per-step log-price slope are merged (smallest relative
//! difference first) until no pair falls below the threshold. Labeling then
//! buckets segments into `m` dynamics by slope order, each bucket holding an
//! approximately equal share of total bars.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentCfg {
    /// Centered moving-average width in bars; truncated at the series edges.
    pub smooth_window: usize,
    /// Merge adjacent segments whose relative slope difference is below this.
    /// `INFINITY` merges everything into one segment.
    pub merge_threshold: f64,
}

impl Default for SegmentCfg {
    fn default() -> SegmentCfg {
        // One day of 5-minute bars; 25% relative slope difference.
        SegmentCfg { smooth_window: 288, merge_threshold: 0.25 }
    }
}

impl SegmentCfg {
    pub fn validate(&self) -> Result<()> {
        if self.smooth_window == 0 {
            return Err(CoreError::InvalidConfig("smoothing window must be positive".into()));
        }
        if self.merge_threshold.is_nan() || self.merge_threshold < 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "merge threshold must be non-negative, got {}",
                self.merge_threshold
            )));
        }
        Ok(())
    }
}

/// One contiguous chunk `[start, end)` of the series with its per-step
/// log-price slope; `label` is the dynamic id once assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub slope: f64,
    pub label: Option<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Relative difference between two slopes, guarded for near-zero slopes.
pub fn rel_slope_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn make_segment(prices: &[f64], start: usize, end: usize) -> Segment {
    let steps = end - start - 1;
    let slope = if steps == 0 {
        0.0
    } else {
        (prices[end - 1].ln() - prices[start].ln()) / steps as f64
    };
    Segment { start, end, slope, label: None }
}

/// Cut `prices` into segments: smooth, split at strict local extrema of the
/// smoothed series, then merge adjacent segments (smallest relative slope
/// difference first) while any difference is below the threshold. Slopes are
/// computed on the raw prices; the smoothing only steers extremum detection.
pub fn segment(prices: &[f64], cfg: &SegmentCfg) -> Result<Vec<Segment>> {
    cfg.validate()?;
    if prices.len() <= cfg.smooth_window {
        return Err(CoreError::InvalidConfig(format!(
            "series length {} must exceed the smoothing window {}",
            prices.len(),
            cfg.smooth_window
        )));
    }
    if let Some(bad) = prices.iter().find(|p| !p.is_finite() || **p <= 0.0) {
        return Err(CoreError::InvalidConfig(format!("prices must be positive, got {bad}")));
    }
    let n = prices.len();
    let half = cfg.smooth_window / 2;
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            prices[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();

    let mut bounds = vec![0usize];
    for i in 1..n.saturating_sub(1) {
        let (a, b, c) = (smoothed[i - 1], smoothed[i], smoothed[i + 1]);
        if (b > a && b > c) || (b < a && b < c) {
            bounds.push(i);
        }
    }
    bounds.push(n);
    let mut segs: Vec<Segment> =
        bounds.windows(2).map(|w| make_segment(prices, w[0], w[1])).collect();

    while segs.len() > 1 {
        let mut best = 0;
        let mut best_rel = f64::INFINITY;
        for k in 0..segs.len() - 1 {
            let rel = rel_slope_diff(segs[k].slope, segs[k + 1].slope);
            if rel < best_rel {
                best_rel = rel;
                best = k;
            }
        }
        if !(best_rel < cfg.merge_threshold) {
            break;
        }
        segs[best] = make_segment(prices, segs[best].start, segs[best + 1].end);
        segs.remove(best + 1);
    }
    Ok(segs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutcome {
    /// True when every slope was identical and all segments were assigned the
    /// neutral middle label instead of quantile buckets.
    pub degenerate: bool,
}

/// Assign each segment a dynamic id in `0..m` by slope order: label 0 holds
/// the most negative slopes, and bucket boundaries are placed so each label
/// covers an approximately equal share of total bars.
pub fn label_dynamics(segs: &mut [Segment], m: usize) -> Result<LabelOutcome> {
    if m == 0 {
        return Err(CoreError::InvalidConfig("dynamic count must be positive".into()));
    }
    if segs.len() < m {
        return Err(CoreError::InvalidConfig(format!(
            "{} segments cannot fill {m} dynamics",
            segs.len()
        )));
    }
    if let Some(bad) = segs.iter().find(|s| s.is_empty()) {
        return Err(CoreError::InvalidConfig(format!(
            "segment [{}, {}) is empty",
            bad.start, bad.end
        )));
    }
    if segs.windows(2).all(|w| w[0].slope == w[1].slope) {
        for s in segs.iter_mut() {
            s.label = Some(m / 2);
        }
        return Ok(LabelOutcome { degenerate: true });
    }
    let total: usize = segs.iter().map(Segment::len).sum();
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| {
        segs[a]
            .slope
            .partial_cmp(&segs[b].slope)
            .expect("finite slopes")
            .then(segs[a].start.cmp(&segs[b].start))
    });
    let mut cum = 0usize;
    for &idx in &order {
        segs[idx].label = Some(((cum * m) / total).min(m - 1));
        cum += segs[idx].len();
    }
    Ok(LabelOutcome { degenerate: false })
}

/// Dynamic id covering bar `t`, by binary search over the partition.
pub fn label_at(segs: &[Segment], t: usize) -> Option<usize> {
    let k = segs.partition_point(|s| s.end <= t);
    segs.get(k).filter(|s| s.start <= t && t < s.end).and_then(|s| s.label)
}

/// Write `start_ts,end_ts,slope,label` rows; `end_ts` is the timestamp of the
/// last bar inside the segment. Requires every segment to be labeled.
pub fn write_segments_csv(path: &Path, segs: &[Segment], timestamps: &[u64]) -> Result<()> {
    let csv_err = |e: csv::Error| CoreError::InvalidData(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["start_ts", "end_ts", "slope", "label"]).map_err(csv_err)?;
    for s in segs {
        if s.is_empty() || s.end > timestamps.len() {
            return Err(CoreError::InvalidConfig(format!(
                "segment [{}, {}) outside the {}-bar timestamp grid",
                s.start,
                s.end,
                timestamps.len()
            )));
        }
        let label = s.label.ok_or_else(|| {
            CoreError::InvalidConfig(format!("segment [{}, {}) is unlabeled", s.start, s.end))
        })?;
        w.write_record([
            timestamps[s.start].to_string(),
            timestamps[s.end - 1].to_string(),
            format!("{:e}", s.slope),
            label.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read segments back from [`write_segments_csv`] output, mapping timestamps
/// onto indices of the supplied grid.
pub fn read_segments_csv(path: &Path, timestamps: &[u64]) -> Result<Vec<Segment>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CoreError::InvalidData(format!("{}: {e}", path.display())))?;
    let parse_err = |line: u64, msg: String| CoreError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut segs = Vec::new();
    for (row, rec) in r.records().enumerate() {
        // Header occupies line 1.
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| parse_err(line, format!("missing column {i}")))
        };
        let ts_idx = |raw: &str| -> Result<usize> {
            let ts: u64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("bad timestamp {raw:?}")))?;
            timestamps
                .binary_search(&ts)
                .map_err(|_| parse_err(line, format!("timestamp {ts} not on the grid")))
        };
        let start = ts_idx(field(0)?)?;
        let end = ts_idx(field(1)?)? + 1;
        let slope: f64 =
            field(2)?.parse().map_err(|_| parse_err(line, "bad slope".into()))?;
        let label: usize =
            field(3)?.parse().map_err(|_| parse_err(line, "bad label".into()))?;
        if end <= start {
            return Err(parse_err(line, "segment ends before it starts".into()));
        }
        segs.push(Segment { start, end, slope, label: Some(label) });
    }
    Ok(segs)
}
