//! Class mIoU and FB-IoU accumulation. Tallies are integer pixel counts, so
//! accumulators merge exactly and evaluation parallelizes without drift.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Mask;

/// How FB-IoU aggregates across episodes: pooled tallies over the whole run,
/// or the mean of per-episode IoUs. Prior art is inconsistent; both are
/// reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FbIouMode {
    #[default]
    Global,
    PerEpisode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub intersection: u64,
    pub union: u64,
}

impl Tally {
    fn add(&mut self, other: Tally) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Running per-class and category-agnostic intersection/union tallies.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricAccumulator {
    per_class: BTreeMap<u32, Tally>,
    fg: Tally,
    bg: Tally,
    /// Per-episode (fg, bg) tallies for the per-episode FB-IoU mode.
    episodes: Vec<(Tally, Tally)>,
}

fn count_tallies(pred: &Mask, gt: &Mask) -> Result<(Tally, Tally)> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    if !pred.is_hard() || !gt.is_hard() {
        return Err(Error::InvalidConfig("metrics expect hard masks".into()));
    }
    let mut fg = Tally::default();
    let mut bg = Tally::default();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let (p, g) = (p > 0.0, g > 0.0);
        if p && g {
            fg.intersection += 1;
        }
        if p || g {
            fg.union += 1;
        }
        if !p && !g {
            bg.intersection += 1;
        }
        if !p || !g {
            bg.union += 1;
        }
    }
    Ok((fg, bg))
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one episode's prediction. Ignore-labeled pixels must already be
    /// excluded from both masks.
    pub fn update(&mut self, pred: &Mask, gt: &Mask, class_id: u32) -> Result<()> {
        let (fg, bg) = count_tallies(pred, gt)?;
        self.per_class.entry(class_id).or_default().add(fg);
        self.fg.add(fg);
        self.bg.add(bg);
        self.episodes.push((fg, bg));
        Ok(())
    }

    /// Merge another accumulator (parallel evaluation).
    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (&class, tally) in &other.per_class {
            self.per_class.entry(class).or_default().add(*tally);
        }
        self.fg.add(other.fg);
        self.bg.add(other.bg);
        self.episodes.extend(other.episodes.iter().cloned());
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Classes from `class_set` with zero union (excluded from the mean).
    pub fn zero_union_classes(&self, class_set: &[u32]) -> Vec<u32> {
        class_set
            .iter()
            .copied()
            .filter(|c| self.per_class.get(c).and_then(|t| t.iou()).is_none())
            .collect()
    }

    /// Mean per-class foreground IoU over `class_set`, in percent. Classes
    /// with zero union are excluded; callers can surface them through
    /// [`Self::zero_union_classes`].
    pub fn class_miou(&self, class_set: &[u32]) -> Result<f64> {
        let ious: Vec<f64> = class_set
            .iter()
            .filter_map(|c| self.per_class.get(c).and_then(|t| t.iou()))
            .collect();
        if ious.is_empty() {
            return Err(Error::InvalidConfig(
                "no class in the set has any observed pixels".into(),
            ));
        }
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Category-agnostic (IoU_fg + IoU_bg) / 2, in percent.
    pub fn fb_iou(&self, mode: FbIouMode) -> Result<f64> {
        match mode {
            FbIouMode::Global => {
                let fg = self.fg.iou().ok_or_else(|| {
                    Error::InvalidConfig("empty accumulator".into())
                })?;
                let bg = self.bg.iou().unwrap_or(0.0);
                Ok(100.0 * (fg + bg) / 2.0)
            }
            FbIouMode::PerEpisode => {
                if self.episodes.is_empty() {
                    return Err(Error::InvalidConfig("empty accumulator".into()));
                }
                let total: f64 = self
                    .episodes
                    .iter()
                    .map(|(fg, bg)| {
                        (fg.iou().unwrap_or(1.0) + bg.iou().unwrap_or(1.0)) / 2.0
                    })
                    .sum();
                Ok(100.0 * total / self.episodes.len() as f64)
            }
        }
    }
}
