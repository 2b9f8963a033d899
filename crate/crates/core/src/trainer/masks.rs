use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateLocation;
use crate::nets::MaskNet;
use crate::worldgen::Dataset;

/// Reported selectivity when background gates are all zero.
pub const SELECTIVITY_CAP: f64 = 1e6;

/// How well gates line up with the ground-truth relevance maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub mean_gate: f64,
    pub relevant_gate: f64,
    pub background_gate: f64,
    /// `relevant_gate / background_gate`, capped at [`SELECTIVITY_CAP`].
    pub selectivity: f64,
    /// Mean per-image IoU of gates `>= threshold` against relevance.
    pub iou: f64,
}

#[derive(Default)]
struct Tally {
    sum: f64,
    rel_sum: f64,
    rel_n: usize,
    bg_sum: f64,
    bg_n: usize,
    iou_sum: f64,
    images: usize,
}

impl Tally {
    fn add_image(&mut self, gates: &[f32], relevance: &[bool], threshold: f64) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&m, &r) in gates.iter().zip(relevance) {
            let m = m as f64;
            self.sum += m;
            if r {
                self.rel_sum += m;
                self.rel_n += 1;
            } else {
                self.bg_sum += m;
                self.bg_n += 1;
            }
            let on = m >= threshold;
            inter += (on && r) as usize;
            union += (on || r) as usize;
        }
        self.iou_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        self.images += 1;
    }

    fn report(&self) -> MaskReport {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let relevant_gate = mean(self.rel_sum, self.rel_n);
        let background_gate = mean(self.bg_sum, self.bg_n);
        let selectivity = if background_gate > 0.0 {
            (relevant_gate / background_gate).min(SELECTIVITY_CAP)
        } else {
            SELECTIVITY_CAP
        };
        MaskReport {
            mean_gate: mean(self.sum, self.rel_n + self.bg_n),
            relevant_gate,
            background_gate,
            selectivity,
            iou: self.iou_sum / self.images.max(1) as f64,
        }
    }
}

/// Scores gate maps `[H*W]` per image against relevance maps.
pub fn mask_report(
    gates: &[f32],
    relevance: &[bool],
    pixels: usize,
    threshold: f64,
) -> Result<MaskReport> {
    if pixels == 0 || gates.len() != relevance.len() || gates.len() % pixels != 0 {
        return Err(Error::shape(
            "mask_report",
            &[gates.len()],
            &[relevance.len()],
        ));
    }
    let mut t = Tally::default();
    for (m, r) in gates.chunks(pixels).zip(relevance.chunks(pixels)) {
        t.add_image(m, r, threshold);
    }
    Ok(t.report())
}

const CHUNK: usize = 64;

/// Runs the input-space gate network over `obs_t` of every record.
pub fn eval_masks(mask: &MaskNet<f32>, data: &Dataset, threshold: f64) -> Result<MaskReport> {
    if mask.location() != GateLocation::Input {
        return Err(Error::Config(
            "mask statistics need an input-space gate".into(),
        ));
    }
    let [_, h, w] = data.obs_shape();
    let mut t = Tally::default();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let batch = data.batch(idx, None)?;
        let gates = mask.predict(&batch.obs_t)?;
        for (m, r) in gates
            .data()
            .chunks(h * w)
            .zip(batch.relevance.chunks(h * w))
        {
            t.add_image(m, r, threshold);
        }
    }
    Ok(t.report())
}
