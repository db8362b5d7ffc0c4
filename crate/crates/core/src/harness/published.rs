//! Published ImageNet few-shot accuracies (percent), shown next to measured
//! rows for comparison. Columns are avg, 1, 2, 4, 8, 16 shots. These are
//! reference metadata only and are never asserted against.

use crate::pipeline::CaptionMode;

pub const SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

pub type ReferenceRow = [f64; 6];

const ABLATION: [(CaptionMode, ReferenceRow); 5] = [
    (CaptionMode::Image, [50.74, 37.88, 45.76, 52.18, 57.14, 60.72]),
    (CaptionMode::Description, [66.94, 58.38, 66.52, 67.28, 70.94, 71.56]),
    (CaptionMode::Structured, [72.09, 65.42, 70.96, 73.66, 74.20, 76.20]),
    (CaptionMode::RandomRef, [75.65, 69.16, 73.12, 76.64, 79.08, 80.24]),
    (CaptionMode::SimilarRef, [76.78, 70.18, 74.42, 78.00, 80.24, 81.08]),
];

const REGIONS: [(usize, ReferenceRow); 5] = [
    (1, [70.10, 66.24, 67.22, 71.15, 72.28, 73.62]),
    (2, [73.81, 67.25, 71.08, 74.97, 77.44, 78.33]),
    (3, [76.78, 70.18, 74.42, 78.00, 80.24, 81.08]),
    (4, [76.74, 70.24, 74.44, 77.56, 80.83, 80.62]),
    (5, [77.32, 70.21, 75.32, 77.98, 81.00, 82.18]),
];

const REFERENCES: [(usize, ReferenceRow); 5] = [
    (0, [72.09, 65.42, 70.96, 73.66, 74.20, 76.20]),
    (1, [76.36, 69.03, 74.30, 77.76, 79.38, 81.33]),
    (2, [76.25, 69.25, 74.42, 77.04, 80.23, 80.32]),
    (3, [76.61, 70.63, 74.68, 77.34, 80.21, 80.20]),
    (4, [76.78, 70.18, 74.42, 78.00, 80.24, 81.08]),
];

pub fn ablation_row(mode: CaptionMode) -> Option<ReferenceRow> {
    ABLATION.iter().find(|(m, _)| *m == mode).map(|(_, r)| *r)
}

pub fn regions_row(s: usize) -> Option<ReferenceRow> {
    REGIONS.iter().find(|(v, _)| *v == s).map(|(_, r)| *r)
}

pub fn references_row(t: usize) -> Option<ReferenceRow> {
    REFERENCES.iter().find(|(v, _)| *v == t).map(|(_, r)| *r)
}
