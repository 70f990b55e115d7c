//! Displacement metrics, min-of-k aggregation and evaluation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{perturb_corpus, Perturbation};
use crate::backbone::Predictor;
use crate::error::{Error, Result};
use crate::scene::{dist, Scene};

/// Timepoints, in seconds after the last observation, sampled by ASWAEE.
pub const ASWAEE_TIMES: [f64; 5] = [0.44, 0.96, 1.48, 2.00, 2.52];

fn check_pair(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("length mismatch: {} predicted vs {} true", pred.len(), gt.len())));
    }
    Ok(())
}

/// Mean Euclidean error over all steps.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean error at the last step.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

/// 1-based prediction frame nearest to `t` seconds.
pub fn aswaee_frame(t: f64, frame_rate: f64) -> usize {
    ((t * frame_rate).round() as usize).max(1)
}

/// Mean error at the ASWAEE timepoints, each mapped to its nearest frame.
pub fn aswaee(pred: &[[f64; 2]], gt: &[[f64; 2]], frame_rate: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(frame_rate > 0.0) {
        return Err(Error::InvalidArgument("frame rate must be positive".into()));
    }
    let last = aswaee_frame(ASWAEE_TIMES[4], frame_rate);
    if last > pred.len() {
        return Err(Error::InvalidArgument(format!(
            "horizon of {} frames at {frame_rate} fps does not reach {} s",
            pred.len(),
            ASWAEE_TIMES[4]
        )));
    }
    let total: f64 = ASWAEE_TIMES
        .iter()
        .map(|&t| {
            let i = aswaee_frame(t, frame_rate) - 1;
            dist(pred[i], gt[i])
        })
        .sum();
    Ok(total / ASWAEE_TIMES.len() as f64)
}

/// Best value of `metric` over the samples.
pub fn min_of_k<F>(metric: F, samples: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<f64>
where
    F: Fn(&[[f64; 2]], &[[f64; 2]]) -> Result<f64>,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("min_of_k needs at least one sample".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        best = best.min(metric(s, gt)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub index: usize,
    pub category: String,
    pub ade: f64,
    pub fde: f64,
    pub aswaee: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_scenes: usize,
    pub ade: f64,
    pub fde: f64,
    pub aswaee: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub k: usize,
    pub n_scenes: usize,
    /// Min-of-k values; equal to the single-sample values when k = 1.
    pub ade: f64,
    pub fde: f64,
    pub aswaee: Option<f64>,
    /// Values of the first (noise-free) sample alone.
    pub single_sample: Summary,
    pub per_category: BTreeMap<String, Summary>,
    pub per_scene: Vec<SceneMetrics>,
    pub perturbation: Option<Perturbation>,
    pub notes: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Plain-text table of the headline numbers.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!("predictor {}  k={}  scenes={}\n", self.predictor, self.k, self.n_scenes);
        out += &format!("{:<14} {:>6} {:>9} {:>9} {:>9}\n", "subset", "n", "ADE", "FDE", "ASWAEE");
        out += &format!("{:<14} {:>6} {:>9.4} {:>9.4} {:>9}\n", format!("min-of-{}", self.k), self.n_scenes, self.ade, self.fde, fmt(self.aswaee));
        let s = &self.single_sample;
        out += &format!("{:<14} {:>6} {:>9.4} {:>9.4} {:>9}\n", "sample-0", s.n_scenes, s.ade, s.fde, fmt(s.aswaee));
        for (name, c) in &self.per_category {
            out += &format!("{:<14} {:>6} {:>9.4} {:>9.4} {:>9}\n", name, c.n_scenes, c.ade, c.fde, fmt(c.aswaee));
        }
        out
    }
}

fn summarize<'a>(rows: impl Iterator<Item = (f64, f64, Option<f64>)> + 'a) -> Summary {
    let (mut n, mut a, mut f, mut w, mut wn) = (0usize, 0.0, 0.0, 0.0, 0usize);
    for (ra, rf, rw) in rows {
        n += 1;
        a += ra;
        f += rf;
        if let Some(x) = rw {
            w += x;
            wn += 1;
        }
    }
    let n_f = n.max(1) as f64;
    Summary { n_scenes: n, ade: a / n_f, fde: f / n_f, aswaee: (wn == n && n > 0).then(|| w / n_f) }
}

/// Runs `predictor` over the corpus and aggregates metrics.
pub fn evaluate(
    predictor: &dyn Predictor,
    corpus: &[Scene],
    k: usize,
    perturbation: Option<&Perturbation>,
    seed: u64,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let perturbed;
    let scenes = match perturbation {
        Some(p) => {
            perturbed = perturb_corpus(corpus, p);
            &perturbed[..]
        }
        None => corpus,
    };
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut single = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let batch = predictor.predict(scene, k)?;
        if !batch.is_finite() {
            return Err(Error::NonFinite { location: format!("prediction for scene {i}") });
        }
        let gt = scene.future();
        let fr = scene.frame_rate;
        let reaches = aswaee_frame(ASWAEE_TIMES[4], fr) <= gt.len();
        let asw = |s: &[[f64; 2]], g: &[[f64; 2]]| aswaee(s, g, fr);
        per_scene.push(SceneMetrics {
            index: i,
            category: scene.category.name().to_string(),
            ade: min_of_k(ade, &batch.samples, gt)?,
            fde: min_of_k(fde, &batch.samples, gt)?,
            aswaee: if reaches { Some(min_of_k(asw, &batch.samples, gt)?) } else { None },
        });
        let s0 = &batch.samples[0];
        single.push((ade(s0, gt)?, fde(s0, gt)?, if reaches { Some(aswaee(s0, gt, fr)?) } else { None }));
    }
    let overall = summarize(per_scene.iter().map(|m| (m.ade, m.fde, m.aswaee)));
    let mut per_category = BTreeMap::new();
    let mut names: Vec<&str> = per_scene.iter().map(|m| m.category.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let rows = per_scene.iter().filter(|m| m.category == name).map(|m| (m.ade, m.fde, m.aswaee));
        per_category.insert(name.to_string(), summarize(rows));
    }
    Ok(MetricsReport {
        predictor: predictor.name(),
        k,
        n_scenes: scenes.len(),
        ade: overall.ade,
        fde: overall.fde,
        aswaee: overall.aswaee,
        single_sample: summarize(single.into_iter()),
        per_category,
        per_scene,
        perturbation: perturbation.cloned(),
        notes: vec![
            "ASWAEE maps each timepoint t to the 1-based prediction frame round(t * frame_rate)".into(),
            "models are trained with a mean squared position loss; extra samples come from decoder noise".into(),
        ],
        seed,
        config,
    })
}
