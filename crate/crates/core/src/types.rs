//! Shared domain types: the relationship taxonomy, boxes, soft labels and
//! annotation records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::labels::{build_soft_label, classify_consistency};
use crate::error::{Error, Result};

/// Unnormalized class scores, one entry per relationship class.
pub type ScoreVector = ndarray::Array1<f64>;

/// Hierarchical relationship classes. Class indices are dense and follow the
/// declaration order of `relationships`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationshipTaxonomy {
    pub domains: Vec<String>,
    pub relationships: Vec<String>,
    /// Domain index for each relationship, parallel to `relationships`.
    pub domain_of: Vec<usize>,
}

impl Default for RelationshipTaxonomy {
    fn default() -> Self {
        Self::standard(false)
    }
}

impl RelationshipTaxonomy {
    /// Intimate {friends, family, couple} and non-intimate {professional,
    /// commercial}; `with_no_relation` appends `no_relation` as a sixth class
    /// in its own domain.
    pub fn standard(with_no_relation: bool) -> Self {
        let mut domains = vec!["intimate".to_string(), "non_intimate".to_string()];
        let mut relationships: Vec<String> = ["friends", "family", "couple", "professional", "commercial"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut domain_of = vec![0, 0, 0, 1, 1];
        if with_no_relation {
            domains.push("no_relation".to_string());
            relationships.push("no_relation".to_string());
            domain_of.push(2);
        }
        Self { domains, relationships, domain_of }
    }

    pub fn new(domains: Vec<String>, relationships: Vec<String>, domain_of: Vec<usize>) -> Result<Self> {
        let taxonomy = Self { domains, relationships, domain_of };
        taxonomy.check()?;
        Ok(taxonomy)
    }

    pub fn check(&self) -> Result<()> {
        if self.relationships.is_empty() {
            return Err(Error::Config("taxonomy has no relationship classes".into()));
        }
        if self.domain_of.len() != self.relationships.len() {
            return Err(Error::Config("every relationship needs exactly one domain".into()));
        }
        if let Some(&d) = self.domain_of.iter().find(|&&d| d >= self.domains.len()) {
            return Err(Error::Config(format!("domain index {d} out of range")));
        }
        for (i, name) in self.relationships.iter().enumerate() {
            if self.relationships[..i].contains(name) {
                return Err(Error::Config(format!("duplicate relationship `{name}`")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.relationships.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.relationships
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn name(&self, class: usize) -> &str {
        &self.relationships[class]
    }

    pub fn domain(&self, class: usize) -> &str {
        &self.domains[self.domain_of[class]]
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x_min: v[0], y_min: v[1], x_max: v[2], y_max: v[3] }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(x_min, y_min, x_max, y_max))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Tight box covering both inputs.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Clamp into `[0, width] x [0, height]`; errors if nothing with positive
    /// extent is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Result<BoundingBox> {
        if !self.is_valid() {
            return Err(Error::DegenerateBox(self.x_min, self.y_min, self.x_max, self.y_max));
        }
        let b = BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(b.x_min, b.y_min, b.x_max, b.y_max))
        }
    }

    /// Mirror around the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, width: f64) -> BoundingBox {
        BoundingBox {
            x_min: width - self.x_max,
            y_min: self.y_min,
            x_max: width - self.x_min,
            y_max: self.y_max,
        }
    }
}

/// Distribution over relationship classes obtained from annotator votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    /// Wraps an already-normalized distribution. Panics if it is not one.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let total: f64 = probs.iter().sum();
        assert!(
            probs.iter().all(|p| (0.0..=1.0).contains(p)) && (total - 1.0).abs() <= 1e-9,
            "not a probability distribution: {probs:?}"
        );
        Self { probs }
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

/// One annotated person pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// Position of this pair among the pairs of its image.
    pub pair: usize,
    pub box_1: BoundingBox,
    pub box_2: BoundingBox,
    /// Vote count per class, indexed by the taxonomy.
    pub votes: Vec<u32>,
    pub unsure_count: u32,
    pub soft_label: SoftLabel,
    pub majority_label: Option<usize>,
    pub is_consistent: bool,
}

impl AnnotationRecord {
    /// Builds a record and derives soft label and consistency from the votes.
    pub fn new(
        image_id: impl Into<String>,
        pair: usize,
        box_1: BoundingBox,
        box_2: BoundingBox,
        votes: Vec<u32>,
        unsure_count: u32,
    ) -> Result<Self> {
        let soft_label = build_soft_label(&votes)?;
        let (is_consistent, majority_label) = classify_consistency(&soft_label);
        Ok(Self {
            image_id: image_id.into(),
            pair,
            box_1,
            box_2,
            votes,
            unsure_count,
            soft_label,
            majority_label,
            is_consistent,
        })
    }

    /// Stable identifier used in split manifests and artifact names.
    pub fn id(&self) -> String {
        format!("{}_{}", self.image_id, self.pair)
    }

    pub fn total_votes(&self) -> u32 {
        self.votes.iter().sum()
    }
}

/// Clamps both boxes to the image, rejects degenerate ones and recomputes
/// every derived field from the raw votes.
pub fn validate_record(record: &AnnotationRecord, image_width: f64, image_height: f64) -> Result<AnnotationRecord> {
    let box_1 = record.box_1.clamp_to(image_width, image_height)?;
    let box_2 = record.box_2.clamp_to(image_width, image_height)?;
    AnnotationRecord::new(
        record.image_id.clone(),
        record.pair,
        box_1,
        box_2,
        record.votes.clone(),
        record.unsure_count,
    )
}

/// On-disk form of one annotation line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<usize>,
    pub box_1: BoundingBox,
    pub box_2: BoundingBox,
    pub votes: BTreeMap<String, u32>,
    #[serde(default)]
    pub unsure: u32,
}

impl AnnotationLine {
    pub fn from_record(record: &AnnotationRecord, taxonomy: &RelationshipTaxonomy) -> Self {
        let votes = record
            .votes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(i, &v)| (taxonomy.name(i).to_string(), v))
            .collect();
        Self {
            image_id: record.image_id.clone(),
            pair: Some(record.pair),
            box_1: record.box_1,
            box_2: record.box_2,
            votes,
            unsure: record.unsure_count,
        }
    }

    /// Maps class names onto taxonomy indices. Derived fields are computed by
    /// [`validate_record`] once image dimensions are known.
    pub fn vote_vector(&self, taxonomy: &RelationshipTaxonomy) -> Result<Vec<u32>> {
        let mut votes = vec![0u32; taxonomy.num_classes()];
        for (name, &count) in &self.votes {
            votes[taxonomy.index_of(name)?] += count;
        }
        Ok(votes)
    }
}

/// Image dimensions and location from the sidecar manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub width: f64,
    pub height: f64,
    pub path: String,
}
