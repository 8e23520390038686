//! Procedural pair-relationship images with planted appearance and context
//! cues.
//!
//! Classes split into two groups. For *pair* classes the two people are
//! painted in a class-specific color and the rest of the image carries no
//! signal. For *context* classes both people wear the same neutral color and
//! the class is given by the color of a square object placed elsewhere in
//! the image, so only a model that looks beyond the pair can separate them.
//! Every image also has uninformative distractor objects. Proposals cover the
//! people, their union, the informative object, the distractors and a few
//! background boxes.
//!
//! An ambiguous pair has its cue color blended part way toward another class
//! of the same group, and its annotators split between the two classes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::images::{quantize, save_image, Image};
use super::{write_annotations, write_proposals, Dataset, DatasetPaths};
use crate::error::{Error, Result};
use crate::geometry::RegionProposal;
use crate::types::{AnnotationRecord, BoundingBox, ImageEntry, RelationshipTaxonomy};

const PALETTE: [[f32; 3]; 6] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
];
const NEUTRAL_PERSON: [f32; 3] = [0.55, 0.45, 0.35];
const SKIN: [f32; 3] = [0.85, 0.7, 0.55];
const DISTRACTORS: [[f32; 3]; 4] = [[0.5, 0.5, 0.5], [0.85, 0.85, 0.85], [0.3, 0.25, 0.2], [0.6, 0.4, 0.2]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub pairs_per_image: usize,
    /// Distractor objects per image.
    pub num_context_regions: usize,
    /// Share of classes whose label is carried by a context object.
    pub context_informative_fraction: f64,
    /// Side length in pixels of the square images.
    pub image_size: usize,
    /// Share of records whose votes fall below the consistency threshold.
    /// Zero makes every record one-hot.
    pub ambiguous_fraction: f64,
    pub annotators: u32,
    /// Uniform per-pixel noise amplitude.
    pub pixel_noise: f32,
    /// Uniform per-object color jitter amplitude.
    pub color_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 400,
            pairs_per_image: 1,
            num_context_regions: 2,
            context_informative_fraction: 0.6,
            image_size: 32,
            ambiguous_fraction: 0.0,
            annotators: 5,
            pixel_noise: 0.1,
            color_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn check(&self, num_classes: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.num_images == 0 || self.pairs_per_image == 0 {
            return bad("need at least one image and one pair per image");
        }
        if self.image_size < 24 {
            return bad("image_size must be at least 24");
        }
        if self.pairs_per_image > 2 {
            return bad("at most 2 pairs fit in one image");
        }
        if !(0.0..=1.0).contains(&self.context_informative_fraction) || !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.annotators < 3 {
            return bad("need at least 3 annotators");
        }
        if num_classes < 2 || num_classes > PALETTE.len() {
            return bad("taxonomy must have between 2 and 6 classes");
        }
        if !(self.pixel_noise >= 0.0 && self.color_jitter >= 0.0) {
            return bad("noise amplitudes must be nonnegative");
        }
        Ok(())
    }

    /// Number of classes labelled by context, the highest class indices.
    pub fn num_context_classes(&self, num_classes: usize) -> usize {
        ((self.context_informative_fraction * num_classes as f64).round() as usize).min(num_classes)
    }

    pub fn is_context_class(&self, class: usize, num_classes: usize) -> bool {
        class >= num_classes - self.num_context_classes(num_classes)
    }
}

struct Canvas {
    img: Image,
    occupied: Vec<BoundingBox>,
}

impl Canvas {
    fn paint(&mut self, b: &BoundingBox, color: [f32; 3]) {
        for c in 0..3 {
            for y in b.y_min as usize..b.y_max as usize {
                for x in b.x_min as usize..b.x_max as usize {
                    self.img[[c, y, x]] = color[c];
                }
            }
        }
    }

    fn is_free(&self, b: &BoundingBox) -> bool {
        // one pixel of clearance around every placed object
        self.occupied.iter().all(|o| {
            b.x_max + 1.0 <= o.x_min || o.x_max + 1.0 <= b.x_min || b.y_max + 1.0 <= o.y_min || o.y_max + 1.0 <= b.y_min
        })
    }
}

fn jitter(color: [f32; 3], amount: f32, rng: &mut ChaCha8Rng) -> [f32; 3] {
    if amount == 0.0 {
        return color;
    }
    color.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn pixel_box(x: usize, y: usize, w: usize, h: usize) -> BoundingBox {
    BoundingBox { x_min: x as f64, y_min: y as f64, x_max: (x + w) as f64, y_max: (y + h) as f64 }
}

/// Places a `w x h` box uniformly at random in a free spot.
fn place(canvas: &Canvas, w: usize, h: usize, size: usize, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    if w >= size || h >= size {
        return None;
    }
    (0..200).find_map(|_| {
        let b = pixel_box(rng.gen_range(0..=size - w), rng.gen_range(0..=size - h), w, h);
        canvas.is_free(&b).then_some(b)
    })
}

fn jitter_box(b: &BoundingBox, size: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let mut d = || rng.gen_range(-1.0..=1.0f64);
    let out = BoundingBox {
        x_min: (b.x_min + d()).clamp(0.0, size - 1.0),
        y_min: (b.y_min + d()).clamp(0.0, size - 1.0),
        x_max: (b.x_max + d()).clamp(1.0, size),
        y_max: (b.y_max + d()).clamp(1.0, size),
    };
    if out.is_valid() {
        out
    } else {
        *b
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t)
}

/// Votes from `n` annotators for a pair whose true class is `class`. An
/// ambiguous pair splits its votes between the true class and `confuser`,
/// with no class reaching 60%.
fn draw_votes(class: usize, confuser: Option<usize>, num_classes: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n = spec.annotators;
    let mut votes = vec![0u32; num_classes];
    if spec.ambiguous_fraction == 0.0 {
        votes[class] = n;
        return votes;
    }
    let others: Vec<usize> = (0..num_classes).filter(|&c| c != class).collect();
    // largest count strictly below 60% of n
    let below = ((0.6 * n as f64).ceil() as u32).saturating_sub(1).max(1);
    let cap = match confuser {
        Some(c) => {
            votes[class] = below;
            votes[c] = rng.gen_range(1..=below.min(n - below));
            below
        }
        None => {
            let at_least = (0.6 * n as f64).ceil() as u32;
            votes[class] = match rng.gen_range(0..10) {
                0..=4 => n,
                5..=7 => (n - 1).max(at_least),
                _ => at_least,
            };
            votes[class]
        }
    };
    let mut left = n - votes.iter().sum::<u32>();
    while left > 0 {
        let c = *others.choose(rng).expect("at least two classes");
        if votes[c] < cap {
            votes[c] += 1;
            left -= 1;
        }
    }
    votes
}

/// Draws a complete dataset; a pure function of `spec` and the taxonomy.
pub fn generate_synthetic(spec: &SyntheticSpec, taxonomy: &RelationshipTaxonomy) -> Result<Dataset> {
    let num_classes = taxonomy.num_classes();
    spec.check(num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let sz = size as f64;
    let n_pair_classes = num_classes - spec.num_context_classes(num_classes);

    let mut entries = BTreeMap::new();
    let mut images = BTreeMap::new();
    let mut records = Vec::new();
    let mut proposals = BTreeMap::new();

    for index in 0..spec.num_images {
        let class = index % num_classes;
        let image_id = format!("syn{index:05}");
        let is_context = spec.is_context_class(class, num_classes);
        // ambiguous pairs blend their cue toward a class of the same group
        let confuser = (spec.ambiguous_fraction > 0.0 && rng.gen_bool(spec.ambiguous_fraction)).then(|| {
            let same: Vec<usize> =
                (0..num_classes).filter(|&c| c != class && spec.is_context_class(c, num_classes) == is_context).collect();
            let pool = if same.is_empty() { (0..num_classes).filter(|&c| c != class).collect() } else { same };
            (*pool.choose(&mut rng).expect("at least two classes"), rng.gen_range(0.3f32..0.45))
        });
        let cue = |c: usize| -> [f32; 3] {
            if spec.is_context_class(c, num_classes) {
                PALETTE[c - n_pair_classes]
            } else {
                PALETTE[c]
            }
        };

        // retry layouts until everything fits
        let (canvas, people, context_box, distractors) = (0..50)
            .find_map(|_| {
                let mut canvas = Canvas { img: Image::zeros((3, size, size)), occupied: Vec::new() };
                let mut people = Vec::new();
                for _ in 0..spec.pairs_per_image {
                    let w = rng.gen_range(size * 14 / 100..=size * 22 / 100).max(3);
                    let h = rng.gen_range(size * 35 / 100..=size * 50 / 100).max(6);
                    let gap = rng.gen_range(0..=size / 10);
                    let pair_box = place(&canvas, 2 * w + gap, h, size, &mut rng)?;
                    let b1 = pixel_box(pair_box.x_min as usize, pair_box.y_min as usize, w, h);
                    let b2 = pixel_box(pair_box.x_min as usize + w + gap, pair_box.y_min as usize, w, h);
                    canvas.occupied.push(pair_box);
                    people.push((b1, b2));
                }
                let context_box = if is_context {
                    let s = rng.gen_range(size * 20 / 100..=size * 28 / 100).max(3);
                    let b = place(&canvas, s, s, size, &mut rng)?;
                    canvas.occupied.push(b);
                    Some(b)
                } else {
                    None
                };
                let mut distractors = Vec::new();
                for _ in 0..spec.num_context_regions {
                    let s = rng.gen_range(size * 15 / 100..=size * 25 / 100).max(3);
                    if let Some(b) = place(&canvas, s, s, size, &mut rng) {
                        canvas.occupied.push(b);
                        distractors.push(b);
                    }
                }
                Some((canvas, people, context_box, distractors))
            })
            .ok_or_else(|| Error::InvalidSpec(format!("could not lay out image {index}; image_size too small")))?;
        let mut canvas = canvas;

        for v in canvas.img.iter_mut() {
            *v = rng.gen_range(0.0..0.15);
        }
        let blended = match confuser {
            Some((other, t)) if spec.is_context_class(other, num_classes) == is_context => mix(cue(class), cue(other), t),
            Some((_, t)) if is_context => mix(cue(class), DISTRACTORS[0], t),
            Some((_, t)) => mix(cue(class), NEUTRAL_PERSON, t),
            None => cue(class),
        };
        let body = if is_context { NEUTRAL_PERSON } else { blended };
        for (b1, b2) in &people {
            for b in [b1, b2] {
                canvas.paint(b, jitter(body, spec.color_jitter, &mut rng));
                let head_h = ((b.height() / 4.0).round()).max(1.0);
                let head = BoundingBox { y_max: b.y_min + head_h, ..*b };
                canvas.paint(&head, jitter(SKIN, spec.color_jitter, &mut rng));
            }
        }
        if let Some(b) = &context_box {
            canvas.paint(b, jitter(blended, spec.color_jitter, &mut rng));
        }
        for b in &distractors {
            let color = *DISTRACTORS.choose(&mut rng).expect("nonempty palette");
            canvas.paint(b, jitter(color, spec.color_jitter, &mut rng));
        }
        if spec.pixel_noise > 0.0 {
            for v in canvas.img.iter_mut() {
                *v += rng.gen_range(-spec.pixel_noise..=spec.pixel_noise);
            }
        }
        // store exactly what an 8-bit PNG round trip yields
        let img = canvas.img.mapv(|v| f32::from(quantize(v)) / 255.0);

        let mut props = Vec::new();
        for (b1, b2) in &people {
            for b in [b1, b2] {
                props.push(RegionProposal { bbox: jitter_box(b, sz, &mut rng), objectness: rng.gen_range(0.9..1.0) });
            }
            props.push(RegionProposal { bbox: jitter_box(&b1.union(b2), sz, &mut rng), objectness: rng.gen_range(0.6..0.9) });
        }
        if let Some(b) = &context_box {
            props.push(RegionProposal { bbox: jitter_box(b, sz, &mut rng), objectness: rng.gen_range(0.6..0.95) });
        }
        for b in &distractors {
            props.push(RegionProposal { bbox: jitter_box(b, sz, &mut rng), objectness: rng.gen_range(0.4..0.9) });
        }
        for _ in 0..2 {
            let w = rng.gen_range(size / 6..=size / 3);
            let h = rng.gen_range(size / 6..=size / 3);
            let b = pixel_box(rng.gen_range(0..=size - w), rng.gen_range(0..=size - h), w, h);
            props.push(RegionProposal { bbox: b, objectness: rng.gen_range(0.05..0.4) });
        }
        props.shuffle(&mut rng);

        for (pair, (b1, b2)) in people.iter().enumerate() {
            let votes = draw_votes(class, confuser.map(|(c, _)| c), num_classes, spec, &mut rng);
            records.push(AnnotationRecord::new(image_id.clone(), pair, *b1, *b2, votes, 0)?);
        }
        entries.insert(image_id.clone(), ImageEntry { width: sz, height: sz, path: format!("images/{image_id}.png") });
        images.insert(image_id.clone(), img);
        proposals.insert(image_id, props);
    }

    Ok(Dataset { taxonomy: taxonomy.clone(), entries, images, records, proposals })
}

/// Writes a dataset in the standard on-disk layout and returns its paths.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetPaths> {
    let paths = DatasetPaths::in_dir(dir);
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for (id, entry) in &dataset.entries {
        save_image(&dir.join(&entry.path), dataset.image(id)?)?;
    }
    let manifest = serde_json::to_vec_pretty(&dataset.entries)?;
    fs::write(&paths.manifest, manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    write_annotations(&paths.annotations, &dataset.records, &dataset.taxonomy)?;
    if let Some(p) = &paths.proposals {
        write_proposals(p, &dataset.proposals)?;
    }
    Ok(paths)
}
