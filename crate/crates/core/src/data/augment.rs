use crate::types::{AnnotationRecord, BoundingBox, SoftLabel};

/// One model input: a record's pair, possibly flipped or reordered.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub image_id: String,
    pub pair: usize,
    pub box_1: BoundingBox,
    pub box_2: BoundingBox,
    pub soft_label: SoftLabel,
    pub majority_label: Option<usize>,
    pub image_width: f64,
    pub image_height: f64,
    /// Image and proposals must be mirrored before use.
    pub flipped: bool,
}

impl PairSample {
    pub fn from_record(record: &AnnotationRecord, image_width: f64, image_height: f64) -> Self {
        Self {
            image_id: record.image_id.clone(),
            pair: record.pair,
            box_1: record.box_1,
            box_2: record.box_2,
            soft_label: record.soft_label.clone(),
            majority_label: record.majority_label,
            image_width,
            image_height,
            flipped: false,
        }
    }

    pub fn flipped(&self) -> Self {
        Self {
            box_1: self.box_1.flip_horizontal(self.image_width),
            box_2: self.box_2.flip_horizontal(self.image_width),
            flipped: !self.flipped,
            ..self.clone()
        }
    }

    pub fn reversed(&self) -> Self {
        Self { box_1: self.box_2, box_2: self.box_1, ..self.clone() }
    }
}

/// Original, horizontally flipped and pair-reversed copies of a sample.
pub fn augment(sample: &PairSample) -> Vec<PairSample> {
    vec![sample.clone(), sample.flipped(), sample.reversed()]
}
