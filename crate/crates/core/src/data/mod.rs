//! Annotation ingestion, split construction, augmentation and the synthetic
//! dataset generator.

pub mod augment;
pub mod images;
pub mod labels;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RegionProposal;
use crate::losses::ClassFrequency;
use crate::types::{validate_record, AnnotationLine, AnnotationRecord, ImageEntry, RelationshipTaxonomy};

pub use augment::{augment, PairSample};
pub use images::{Image, ImageStore};
pub use labels::{build_soft_label, classify_consistency, CONSISTENCY_THRESHOLD};
pub use synth::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    TrainConsistent,
    TrainAmbiguous,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [SplitKind::TrainConsistent, SplitKind::TrainAmbiguous, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::TrainConsistent => "train_consistent",
            SplitKind::TrainAmbiguous => "train_ambiguous",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::MissingSplit(s.to_string()))
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub records: Vec<AnnotationRecord>,
}

/// Record ids per split, as written next to a run's outputs.
pub type SplitManifest = BTreeMap<SplitKind, Vec<String>>;

/// Everything needed to train or evaluate: validated records, image
/// metadata and pixels, and per-image region proposals.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub taxonomy: RelationshipTaxonomy,
    pub entries: BTreeMap<String, ImageEntry>,
    pub images: ImageStore,
    pub records: Vec<AnnotationRecord>,
    pub proposals: BTreeMap<String, Vec<RegionProposal>>,
}

impl Dataset {
    pub fn entry(&self, image_id: &str) -> Result<&ImageEntry> {
        self.entries
            .get(image_id)
            .ok_or_else(|| Error::Data(format!("image `{image_id}` missing from manifest")))
    }

    pub fn image(&self, image_id: &str) -> Result<&Image> {
        self.images
            .get(image_id)
            .ok_or_else(|| Error::Data(format!("no pixels loaded for image `{image_id}`")))
    }

    pub fn proposals_for(&self, image_id: &str) -> &[RegionProposal] {
        self.proposals.get(image_id).map_or(&[], Vec::as_slice)
    }

    pub fn record_by_id(&self) -> BTreeMap<String, &AnnotationRecord> {
        self.records.iter().map(|r| (r.id(), r)).collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, ImageEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses annotation lines and validates each against its image size.
/// Pairs without an explicit `pair` key are numbered in file order per image.
pub fn read_annotations(
    path: &Path,
    manifest: &BTreeMap<String, ImageEntry>,
    taxonomy: &RelationshipTaxonomy,
) -> Result<Vec<AnnotationRecord>> {
    let mut next_pair: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for (lineno, line) in read_lines(path)? {
        let parsed: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        let entry = manifest
            .get(&parsed.image_id)
            .ok_or_else(|| Error::Data(format!("{}:{lineno}: unknown image `{}`", path.display(), parsed.image_id)))?;
        let counter = next_pair.entry(parsed.image_id.clone()).or_insert(0);
        let pair = parsed.pair.unwrap_or(*counter);
        *counter = pair + 1;
        let raw = AnnotationRecord::new(
            parsed.image_id.clone(),
            pair,
            parsed.box_1,
            parsed.box_2,
            parsed.vote_vector(taxonomy)?,
            parsed.unsure,
        )
        .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        records.push(validate_record(&raw, entry.width, entry.height)?);
    }
    Ok(records)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord], taxonomy: &RelationshipTaxonomy) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, &AnnotationLine::from_record(record, taxonomy))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ProposalLine {
    image_id: String,
    proposals: Vec<RegionProposal>,
}

pub fn read_proposals(path: &Path) -> Result<BTreeMap<String, Vec<RegionProposal>>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let parsed: ProposalLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        if let Some(bad) = parsed.proposals.iter().find(|p| !p.objectness.is_finite() || !p.bbox.is_valid()) {
            return Err(Error::Data(format!("{}:{lineno}: invalid proposal {bad:?}", path.display())));
        }
        out.entry(parsed.image_id).or_insert_with(Vec::new).extend(parsed.proposals);
    }
    Ok(out)
}

pub fn write_proposals(path: &Path, proposals: &BTreeMap<String, Vec<RegionProposal>>) -> Result<()> {
    let mut out = Vec::new();
    for (image_id, list) in proposals {
        let line = ProposalLine { image_id: image_id.clone(), proposals: list.clone() };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// File locations of an on-disk dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub annotations: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub proposals: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard layout used by the synthetic writer.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            annotations: dir.join("annotations.jsonl"),
            manifest: dir.join("manifest.json"),
            proposals: Some(dir.join("proposals.jsonl")),
        }
    }
}

/// Loads records, manifest, pixels and proposals. Image paths in the
/// manifest are relative to the manifest's directory. Without a proposal
/// file, images get sliding-window proposals.
pub fn load_dataset(paths: &DatasetPaths, taxonomy: &RelationshipTaxonomy, workers: usize) -> Result<Dataset> {
    let entries = read_manifest(&paths.manifest)?;
    let records = read_annotations(&paths.annotations, &entries, taxonomy)?;
    let root = paths.manifest.parent().unwrap_or(Path::new("."));
    let images = images::load_images(&entries, root, workers)?;
    let proposals = match &paths.proposals {
        Some(p) => read_proposals(p)?,
        None => images
            .iter()
            .map(|(id, img)| (id.clone(), crate::proposals::sliding_window_proposals(img, &Default::default())))
            .collect(),
    };
    Ok(Dataset { taxonomy: taxonomy.clone(), entries, images, records, proposals })
}

/// Sums raw votes per class over a split.
pub fn annotation_class_counts(records: &[AnnotationRecord]) -> Result<ClassFrequency> {
    let first = records.first().ok_or(Error::EmptySplit)?;
    let mut counts = vec![0u64; first.votes.len()];
    for record in records {
        if record.votes.len() != counts.len() {
            return Err(Error::DimensionMismatch("records disagree on class count".into()));
        }
        for (c, &v) in counts.iter_mut().zip(&record.votes) {
            *c += u64::from(v);
        }
    }
    Ok(ClassFrequency::new(counts))
}

/// Fractions of images assigned to validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.15, test: 0.25 }
    }
}

/// Assigns whole images to train/val/test by a seeded shuffle. Val and test
/// keep only consistent records; the ambiguous training split is every
/// training record, the consistent one its consistent subset.
pub fn split_records(records: &[AnnotationRecord], fractions: SplitFractions, seed: u64) -> Result<SplitManifest> {
    if records.is_empty() {
        return Err(Error::EmptySplit);
    }
    if !(fractions.val >= 0.0 && fractions.test >= 0.0 && fractions.val + fractions.test < 1.0) {
        return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
    }
    let image_ids: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut image_ids: Vec<&str> = image_ids.into_iter().collect();
    image_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = image_ids.len() as f64;
    let n_test = (n * fractions.test).round() as usize;
    let n_val = (n * fractions.val).round() as usize;
    let test: BTreeSet<&str> = image_ids[..n_test].iter().copied().collect();
    let val: BTreeSet<&str> = image_ids[n_test..(n_test + n_val).min(image_ids.len())].iter().copied().collect();

    let mut manifest: SplitManifest = SplitKind::ALL.into_iter().map(|k| (k, Vec::new())).collect();
    for record in records {
        let id = record.id();
        let image = record.image_id.as_str();
        let kinds: &[SplitKind] = if test.contains(image) {
            if record.is_consistent { &[SplitKind::Test] } else { &[] }
        } else if val.contains(image) {
            if record.is_consistent { &[SplitKind::Val] } else { &[] }
        } else if record.is_consistent {
            &[SplitKind::TrainConsistent, SplitKind::TrainAmbiguous]
        } else {
            &[SplitKind::TrainAmbiguous]
        };
        for kind in kinds {
            manifest.get_mut(kind).expect("all kinds present").push(id.clone());
        }
    }
    Ok(manifest)
}

/// Resolves manifest ids to records.
pub fn materialize_split(dataset: &Dataset, manifest: &SplitManifest, kind: SplitKind) -> Result<DatasetSplit> {
    let ids = manifest.get(&kind).ok_or_else(|| Error::MissingSplit(kind.name().into()))?;
    let by_id = dataset.record_by_id();
    let records = ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Data(format!("split references unknown record `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit { kind, records })
}

/// Picks whole images from `records` in a seeded order, accepting an image
/// only while no majority class exceeds `per_class`. Stops once every class
/// reaches `per_class` or the pool is exhausted.
pub fn balanced_subset(records: &[AnnotationRecord], num_classes: usize, per_class: usize, seed: u64) -> Vec<String> {
    let mut by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_consistent) {
        by_image.entry(r.image_id.as_str()).or_default().push(r);
    }
    let mut images: Vec<_> = by_image.into_iter().collect();
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut counts = vec![0usize; num_classes];
    let mut chosen = Vec::new();
    for (_, group) in images {
        let mut added = vec![0usize; num_classes];
        for r in &group {
            added[r.majority_label.expect("consistent")] += 1;
        }
        if counts.iter().zip(&added).all(|(c, a)| c + a <= per_class) {
            for (c, a) in counts.iter_mut().zip(&added) {
                *c += a;
            }
            chosen.extend(group.iter().map(|r| r.id()));
        }
        if counts.iter().all(|&c| c >= per_class) {
            break;
        }
    }
    chosen
}

pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let named: BTreeMap<&str, &Vec<String>> = manifest.iter().map(|(k, v)| (k.name(), v)).collect();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, &named)?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let named: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)?;
    named.into_iter().map(|(k, v)| Ok((k.parse()?, v))).collect()
}
