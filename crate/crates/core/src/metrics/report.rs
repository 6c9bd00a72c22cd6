use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::region::{attempt_rate, background_mask, region_mae_mse, ssim_region, ATTEMPT_THRESHOLD};
use super::text::{cer, delta_cer, is_empty_target};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::partition::BoxSpec;
use crate::synth::{decode_glyphs, GlyphFont};

/// Scores of one edited sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub num_instances: usize,
    pub cer: f64,
    pub gt_cer: f64,
    pub delta_cer: f64,
    pub mae_b: f64,
    pub mse_b: f64,
    /// `None` when no SSIM window fits outside the boxes.
    pub ssim_b: Option<f64>,
    pub attempt_rate: f64,
    /// Some box had an empty target string.
    pub empty_target: bool,
}

/// Scores `edited` against `reference`, with `ground_truth` giving the
/// decoder's own error floor. CER is averaged over the boxes.
pub fn score_sample(
    id: &str,
    reference: &RgbImage,
    edited: &RgbImage,
    ground_truth: &RgbImage,
    boxes: &[BoxSpec],
    font: &GlyphFont,
) -> Result<SampleScores> {
    if boxes.is_empty() {
        return Err(Error::UndefinedScore(format!("sample {id} has no boxes")));
    }
    let (mut model_cer, mut gt_cer) = (0.0, 0.0);
    for b in boxes {
        model_cer += cer(&decode_glyphs(edited, b, font)?, &b.tgt);
        gt_cer += cer(&decode_glyphs(ground_truth, b, font)?, &b.tgt);
    }
    let n = boxes.len() as f64;
    let (model_cer, gt_cer) = (model_cer / n, gt_cer / n);
    let (mae_b, mse_b) = region_mae_mse(reference, edited, boxes)?;
    let mask = background_mask(reference.width(), reference.height(), boxes);
    let ssim_b = match ssim_region(reference, edited, &mask) {
        Ok(v) => Some(v),
        Err(Error::UndefinedScore(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleScores {
        id: id.to_owned(),
        num_instances: boxes.len(),
        cer: model_cer,
        gt_cer,
        delta_cer: delta_cer(model_cer, gt_cer),
        mae_b,
        mse_b,
        ssim_b,
        attempt_rate: attempt_rate(reference, edited, boxes, ATTEMPT_THRESHOLD)?,
        empty_target: boxes.iter().any(|b| is_empty_target(&b.tgt)),
    })
}

/// Means over the samples where each score is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub cer: f64,
    pub delta_cer: f64,
    pub mae_b: f64,
    pub mse_b: f64,
    pub ssim_b: Option<f64>,
    pub attempt_rate: f64,
}

impl Aggregate {
    pub fn of(samples: &[&SampleScores]) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleScores) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n;
        let ssim: Vec<f64> = samples.iter().filter_map(|s| s.ssim_b).collect();
        Self {
            count: samples.len(),
            cer: mean(|s| s.cer),
            delta_cer: mean(|s| s.delta_cer),
            mae_b: mean(|s| s.mae_b),
            mse_b: mean(|s| s.mse_b),
            ssim_b: (!ssim.is_empty()).then(|| ssim.iter().sum::<f64>() / ssim.len() as f64),
            attempt_rate: mean(|s| s.attempt_rate),
        }
    }
}

/// Aggregate and per-instance-count scores, samples sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub aggregate: Aggregate,
    /// Keyed by instance count.
    pub bins: BTreeMap<usize, Aggregate>,
    pub samples: Vec<SampleScores>,
}

impl EvalReport {
    pub fn new(label: &str, mut samples: Vec<SampleScores>) -> Self {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let all: Vec<&SampleScores> = samples.iter().collect();
        let mut groups: BTreeMap<usize, Vec<&SampleScores>> = BTreeMap::new();
        for s in &samples {
            groups.entry(s.num_instances).or_default().push(s);
        }
        Self {
            label: label.to_owned(),
            aggregate: Aggregate::of(&all),
            bins: groups.iter().map(|(&k, v)| (k, Aggregate::of(v))).collect(),
            samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// One row per sample.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("id,num_instances,cer,gt_cer,delta_cer,mae_b,mse_b,ssim_b,attempt_rate\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.id,
                s.num_instances,
                s.cer,
                s.gt_cer,
                s.delta_cer,
                s.mae_b,
                s.mse_b,
                s.ssim_b.map(|v| v.to_string()).unwrap_or_default(),
                s.attempt_rate
            ));
        }
        out
    }

    /// One row per instance count.
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("num_instances,count,cer,delta_cer,mae_b,mse_b,ssim_b,attempt_rate\n");
        for (n, a) in &self.bins {
            out.push_str(&format!(
                "{n},{},{},{},{},{},{},{}\n",
                a.count,
                a.cer,
                a.delta_cer,
                a.mae_b,
                a.mse_b,
                a.ssim_b.map(|v| v.to_string()).unwrap_or_default(),
                a.attempt_rate
            ));
        }
        out
    }
}

/// Several labelled reports side by side, one row per label.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("config,cer,delta_cer,mae_b,mse_b,ssim_b,attempt_rate\n");
    for r in reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            a.cer,
            a.delta_cer,
            a.mae_b,
            a.mse_b,
            a.ssim_b.map(|v| v.to_string()).unwrap_or_default(),
            a.attempt_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_sample, SynthConfig};

    #[test]
    fn ground_truth_scores_zero_cer() {
        let font = GlyphFont::default();
        let cfg = SynthConfig::default();
        let mut scores = Vec::new();
        for seed in 0..40 {
            let s = render_sample(seed, &cfg).unwrap();
            let sc = score_sample(&format!("s{seed:02}"), &s.reference, &s.target, &s.target, &s.boxes, &font).unwrap();
            assert_eq!((sc.cer, sc.gt_cer, sc.delta_cer, sc.mae_b, sc.mse_b), (0.0, 0.0, 0.0, 0.0, 0.0));
            assert!(sc.attempt_rate > 0.0);
            scores.push(sc);
        }
        let report = EvalReport::new("gt", scores);
        assert_eq!(report.aggregate.count, 40);
        assert_eq!(report.bins.values().map(|b| b.count).sum::<usize>(), 40);
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        for key in ["cer", "delta_cer", "mae_b", "mse_b", "ssim_b", "attempt_rate"] {
            assert!(v["aggregate"].get(key).is_some(), "{key}");
        }
        assert!(report.samples.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn reference_as_prediction() {
        let font = GlyphFont::default();
        let s = render_sample(3, &SynthConfig::default()).unwrap();
        let sc = score_sample("x", &s.reference, &s.reference, &s.target, &s.boxes, &font).unwrap();
        assert!(sc.cer > 0.0);
        assert_eq!(sc.delta_cer, sc.cer);
        assert_eq!(sc.attempt_rate, 0.0);
        assert_eq!(sc.ssim_b, Some(1.0));
    }

    #[test]
    fn csv_shapes() {
        let font = GlyphFont::default();
        let s = render_sample(1, &SynthConfig::default()).unwrap();
        let sc = score_sample("a", &s.reference, &s.target, &s.target, &s.boxes, &font).unwrap();
        let r = EvalReport::new("x", vec![sc]);
        assert_eq!(r.samples_csv().lines().count(), 2);
        assert_eq!(r.bins_csv().lines().count(), 2);
        assert_eq!(comparison_csv(&[r.clone(), r]).lines().count(), 3);
    }
}
