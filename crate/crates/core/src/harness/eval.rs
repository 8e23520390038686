//! Evaluation runs and their artifacts: `metrics.json`, `confusion.png`
//! and per-sample attention overlays.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AggregationMode;
use crate::data::images::{to_rgb8, write_png};
use crate::data::{materialize_split, PairSample, SplitKind};
use crate::error::{Error, Result};
use crate::geometry::RegionProposal;
use crate::losses;
use crate::metrics::{evaluate, evaluate_domains, EvalResult};
use crate::model::{DualGlance, Prediction};
use crate::types::BoundingBox;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::pipeline::{prepare, sample_regions, samples_for, truth_of};
use super::{version_string, RunData};

/// Number of highest-attention regions drawn per overlay.
pub const TOP_REGIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config_hash: String,
    pub split: SplitKind,
    /// Training stages completed by the evaluated checkpoint.
    pub stage: u8,
    pub aggregation: AggregationMode,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    /// Final model (fused scores after stage 2, pair scores otherwise).
    pub relationship: EvalResult,
    pub domain: EvalResult,
    /// Pair branch alone, `softmax(S1)`.
    pub first_glance: EvalResult,
    pub accuracy: f64,
    pub first_glance_accuracy: f64,
    /// Mean number of contextual regions per sample.
    pub mean_regions: f64,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One evaluated sample.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub sample: PairSample,
    pub regions: Vec<RegionProposal>,
    pub prediction: Prediction,
}

impl SampleOutput {
    /// Indices into `regions` of the `min(2, N)` highest-attention regions,
    /// where `N` counts regions that reached the attention head.
    pub fn top_regions(&self) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> =
            self.prediction.attention.iter().enumerate().filter_map(|(i, a)| a.map(|a| (i, a))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.into_iter().take(TOP_REGIONS).map(|(i, _)| i).collect()
    }
}

/// Predictions for every sample, in sample order.
pub fn predict_samples(
    model: &DualGlance,
    ck: &Checkpoint,
    cfg: &RunConfig,
    data: &RunData,
    samples: &[PairSample],
) -> Result<Vec<SampleOutput>> {
    samples
        .par_iter()
        .map(|sample| {
            let input = prepare(&data.dataset, sample, &ck.header.geometry, model.spec.first_glance.patch_size, &cfg.regions)?;
            let prediction = model.predict(&input, cfg.aggregation)?;
            let regions = sample_regions(&data.dataset, sample, &cfg.regions);
            Ok(SampleOutput { sample: sample.clone(), regions, prediction })
        })
        .collect()
}

/// Metrics of a checkpoint on one split, without writing anything.
pub fn score_split(cfg: &RunConfig, data: &RunData, ck: &Checkpoint, split: SplitKind) -> Result<(MetricsReport, Vec<SampleOutput>)> {
    ck.ensure_compatible(&cfg.taxonomy, &cfg.model)?;
    if !data.manifest.contains_key(&split) {
        return Err(Error::MissingSplit(split.name().into()));
    }
    let records = materialize_split(&data.dataset, &data.manifest, split)?.records;
    if records.is_empty() {
        return Err(Error::EmptySplit);
    }
    let samples = samples_for(&data.dataset, &records, false)?;
    let model = ck.model()?;
    let mut outputs = predict_samples(&model, ck, cfg, data, &samples)?;
    if ck.header.stage < 2 {
        // the context branch is still at initialization
        for o in &mut outputs {
            o.prediction.scores = o.prediction.s1.clone();
            o.prediction.probs = losses::softmax(o.prediction.s1.view());
        }
    }

    let truths: Vec<usize> = outputs.iter().map(|o| truth_of(&o.sample)).collect();
    let first: Vec<Array1<f64>> = outputs.iter().map(|o| losses::softmax(o.prediction.s1.view())).collect();
    let final_probs: Vec<Array1<f64>> = outputs.iter().map(|o| o.prediction.probs.clone()).collect();
    let r = cfg.taxonomy.num_classes();
    let relationship = evaluate(&final_probs, &truths, r)?;
    let domain = evaluate_domains(&final_probs, &truths, &cfg.taxonomy)?;
    let first_glance = evaluate(&first, &truths, r)?;
    let mean_regions = outputs.iter().map(|o| o.regions.len() as f64).sum::<f64>() / outputs.len() as f64;
    let report = MetricsReport {
        version: version_string(),
        config_hash: cfg.hash(),
        split,
        stage: ck.header.stage,
        aggregation: cfg.aggregation,
        classes: cfg.taxonomy.relationships.clone(),
        domains: cfg.taxonomy.domains.clone(),
        accuracy: relationship.accuracy(),
        first_glance_accuracy: first_glance.accuracy(),
        relationship,
        domain,
        first_glance,
        mean_regions,
    };
    Ok((report, outputs))
}

/// Scores a split and writes `metrics.json`, `confusion.png` and attention
/// overlays under `out_dir`.
pub fn evaluate_run(cfg: &RunConfig, data: &RunData, ck: &Checkpoint, split: SplitKind, out_dir: &Path) -> Result<MetricsReport> {
    let (report, outputs) = score_split(cfg, data, ck, split)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    report.write(&out_dir.join("metrics.json"))?;
    write_confusion_png(&out_dir.join("confusion.png"), &report.relationship.confusion, &report)?;
    let limit = cfg.eval.max_overlays.unwrap_or(usize::MAX);
    write_attention_artifacts(&out_dir.join("attention"), data, &outputs[..outputs.len().min(limit)], &report)?;
    Ok(report)
}

fn text_chunks(report: &MetricsReport) -> Vec<(&'static str, String)> {
    vec![("config_hash", report.config_hash.clone()), ("version", report.version.clone())]
}

/// Row-normalized confusion heatmap, white (0) to dark blue (1), one
/// square cell per entry.
pub fn write_confusion_png(path: &Path, confusion: &[Vec<u64>], report: &MetricsReport) -> Result<()> {
    const CELL: usize = 24;
    let r = confusion.len();
    let side = r * CELL;
    let mut rgb = vec![0u8; side * side * 3];
    for (t, row) in confusion.iter().enumerate() {
        let total = row.iter().sum::<u64>().max(1) as f64;
        for (p, &count) in row.iter().enumerate() {
            let v = count as f64 / total;
            let color = [255.0 * (1.0 - 0.9 * v), 255.0 * (1.0 - 0.75 * v), 255.0 * (1.0 - 0.45 * v)].map(|c| c.round() as u8);
            for y in t * CELL..(t + 1) * CELL {
                for x in p * CELL..(p + 1) * CELL {
                    let border = y % CELL == 0 || x % CELL == 0;
                    let px = if border { [200, 200, 200] } else { color };
                    rgb[(y * side + x) * 3..][..3].copy_from_slice(&px);
                }
            }
        }
    }
    let chunks = text_chunks(report);
    let classes = report.classes.join(",");
    let mut text: Vec<(&str, &str)> = chunks.iter().map(|(k, v)| (*k, v.as_str())).collect();
    text.push(("classes", &classes));
    write_png(path, side as u32, side as u32, &rgb, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttention {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub attention: Option<f64>,
}

/// Per-sample attention dump written next to each overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub version: String,
    pub config_hash: String,
    pub image_id: String,
    pub pair: usize,
    pub box_1: BoundingBox,
    pub box_2: BoundingBox,
    pub truth: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub regions: Vec<RegionAttention>,
    /// Indices into `regions`, highest attention first.
    pub top_regions: Vec<usize>,
}

impl AttentionDump {
    pub fn new(output: &SampleOutput, report: &MetricsReport) -> Self {
        let probs = output.prediction.probs.to_vec();
        let predicted = probs.iter().enumerate().fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
        Self {
            version: report.version.clone(),
            config_hash: report.config_hash.clone(),
            image_id: output.sample.image_id.clone(),
            pair: output.sample.pair,
            box_1: output.sample.box_1,
            box_2: output.sample.box_2,
            truth: truth_of(&output.sample),
            predicted,
            probs,
            regions: output
                .regions
                .iter()
                .zip(&output.prediction.attention)
                .map(|(r, &a)| RegionAttention { bbox: r.bbox, objectness: r.objectness, attention: a })
                .collect(),
            top_regions: output.top_regions(),
        }
    }
}

/// Writes `<image_id>_<pair>.png` overlays (pair in green, top regions in
/// red) and matching `.json` dumps.
pub fn write_attention_artifacts(dir: &Path, data: &RunData, outputs: &[SampleOutput], report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let chunks = text_chunks(report);
    let text: Vec<(&str, &str)> = chunks.iter().map(|(k, v)| (*k, v.as_str())).collect();
    outputs.par_iter().try_for_each(|output| {
        let dump = AttentionDump::new(output, report);
        let stem = format!("{}_{}", dump.image_id, dump.pair);
        let json = serde_json::to_string_pretty(&dump)?;
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

        let image = data.dataset.image(&dump.image_id)?;
        let (w, h, pixels) = to_rgb8(image);
        let mut canvas = Canvas::upscaled(w as usize, h as usize, &pixels, 128);
        canvas.rect(&dump.box_1, [0, 220, 0]);
        canvas.rect(&dump.box_2, [0, 220, 0]);
        for &i in &dump.top_regions {
            canvas.rect(&dump.regions[i].bbox, [230, 0, 0]);
        }
        write_png(&dir.join(format!("{stem}.png")), canvas.width as u32, canvas.height as u32, &canvas.rgb, &text)
    })
}

/// Nearest-neighbour upscaled RGB buffer for drawing box outlines.
struct Canvas {
    width: usize,
    height: usize,
    scale: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn upscaled(w: usize, h: usize, pixels: &[u8], min_side: usize) -> Self {
        let scale = min_side.div_ceil(w.max(h)).max(1);
        let (width, height) = (w * scale, h * scale);
        let mut rgb = vec![0u8; width * height * 3];
        for y in 0..height {
            for x in 0..width {
                let src = ((y / scale) * w + x / scale) * 3;
                rgb[(y * width + x) * 3..][..3].copy_from_slice(&pixels[src..src + 3]);
            }
        }
        Self { width, height, scale, rgb }
    }

    fn rect(&mut self, b: &BoundingBox, color: [u8; 3]) {
        let s = self.scale as f64;
        let clamp = |v: f64, hi: usize| (v * s).round().clamp(0.0, (hi - 1) as f64) as usize;
        let (x0, x1) = (clamp(b.x_min, self.width), clamp(b.x_max, self.width));
        let (y0, y1) = (clamp(b.y_min, self.height), clamp(b.y_max, self.height));
        for x in x0..=x1 {
            self.put(x, y0, color);
            self.put(x, y1, color);
        }
        for y in y0..=y1 {
            self.put(x0, y, color);
            self.put(x1, y, color);
        }
    }

    fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        self.rgb[(y * self.width + x) * 3..][..3].copy_from_slice(&color);
    }
}
