//! Turns records into model inputs.

use ndarray::{s, Array1, Array3};

use crate::data::{augment, Dataset, PairSample};
use crate::error::Result;
use crate::geometry::{encode_geometry, select_contextual_regions, GeometryNormStats, RegionProposal, GEOMETRY_DIM};
use crate::losses::Target;
use crate::model::{crop_patches, PairInput, SampleInput};
use crate::types::AnnotationRecord;

use super::config::RegionConfig;

/// Samples of a split, with the three augmented views per record when
/// `augmented` is set.
pub fn samples_for(dataset: &Dataset, records: &[AnnotationRecord], augmented: bool) -> Result<Vec<PairSample>> {
    let mut out = Vec::with_capacity(records.len() * if augmented { 3 } else { 1 });
    for record in records {
        let entry = dataset.entry(&record.image_id)?;
        let sample = PairSample::from_record(record, f64::from(entry.width), f64::from(entry.height));
        if augmented {
            out.extend(augment(&sample));
        } else {
            out.push(sample);
        }
    }
    Ok(out)
}

/// Geometry statistics over both boxes of every sample.
pub fn fit_geometry(samples: &[PairSample]) -> Result<GeometryNormStats> {
    let raw: Vec<[f64; GEOMETRY_DIM]> = samples
        .iter()
        .flat_map(|s| {
            [
                encode_geometry(&s.box_1, s.image_width, s.image_height),
                encode_geometry(&s.box_2, s.image_width, s.image_height),
            ]
        })
        .collect();
    GeometryNormStats::fit(&raw)
}

/// Contextual regions for a sample, mirrored with the image when flipped.
pub fn sample_regions(dataset: &Dataset, sample: &PairSample, regions: &RegionConfig) -> Vec<RegionProposal> {
    let proposals: Vec<RegionProposal> = dataset
        .proposals_for(&sample.image_id)
        .iter()
        .map(|p| {
            if sample.flipped {
                RegionProposal { bbox: p.bbox.flip_horizontal(sample.image_width), ..*p }
            } else {
                *p
            }
        })
        .collect();
    select_contextual_regions(&proposals, &sample.box_1, &sample.box_2, regions.tau_u, regions.m)
}

/// Model input for one sample.
pub fn prepare(
    dataset: &Dataset,
    sample: &PairSample,
    stats: &GeometryNormStats,
    patch_size: usize,
    regions: &RegionConfig,
) -> Result<SampleInput> {
    let stored = dataset.image(&sample.image_id)?;
    let image: Array3<f32> = if sample.flipped { stored.slice(s![.., .., ..;-1]).to_owned() } else { stored.clone() };
    let (p1, p2, pu) = crop_patches(image.view(), &sample.box_1, &sample.box_2, patch_size);
    let geometry = stats.pair_feature(&sample.box_1, &sample.box_2, sample.image_width, sample.image_height);
    let selected = sample_regions(dataset, sample, regions);
    Ok(SampleInput {
        pair: PairInput { patches: [p1, p2, pu], geometry },
        image: image.mapv(f64::from),
        regions: selected.iter().map(|p| p.bbox).collect(),
    })
}

/// Supervision for a sample under a soft- or hard-label loss. Hard losses
/// on ambiguous records fall back to the soft label's argmax.
pub fn target_of(sample: &PairSample, soft: bool) -> Target<'_> {
    if soft {
        Target::Soft(&sample.soft_label)
    } else {
        Target::Hard(sample.majority_label.unwrap_or_else(|| sample.soft_label.argmax()))
    }
}

/// Ground-truth class for evaluation.
pub fn truth_of(sample: &PairSample) -> usize {
    sample.majority_label.unwrap_or_else(|| sample.soft_label.argmax())
}

/// Stage-1 outputs kept while the first branch is frozen.
#[derive(Debug, Clone)]
pub struct FrozenFirst {
    pub s1: Array1<f64>,
    pub v_top: Array1<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::types::RelationshipTaxonomy;

    #[test]
    fn flipped_sample_mirrors_image_and_regions() {
        let spec = SyntheticSpec { num_images: 2, seed: 3, ..Default::default() };
        let d = generate_synthetic(&spec, &RelationshipTaxonomy::default()).unwrap();
        let samples = samples_for(&d, &d.records[..1], true).unwrap();
        assert_eq!(samples.len(), 3);
        let stats = fit_geometry(&samples).unwrap();
        let cfg = RegionConfig::default();
        let orig = prepare(&d, &samples[0], &stats, 8, &cfg).unwrap();
        let flip = prepare(&d, &samples[1], &stats, 8, &cfg).unwrap();
        let w = orig.image.dim().2;
        assert_eq!(orig.image[[1, 4, 0]], flip.image[[1, 4, w - 1]]);
        assert_eq!(orig.regions.len(), flip.regions.len());
        for (a, b) in orig.regions.iter().zip(&flip.regions) {
            assert_eq!(a.flip_horizontal(w as f64), *b);
        }
        // the mirrored person crop is the mirror of the original crop
        let (p, q) = (&orig.pair.patches[0], &flip.pair.patches[0]);
        for x in 0..8 {
            assert!((p[[0, 3, x]] - q[[0, 3, 7 - x]]).abs() < 1e-6);
        }
    }
}
