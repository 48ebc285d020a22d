//! Reference figures used to exercise report rendering.

use super::{ComparisonRow, ConfusionMatrix};

/// Per-class accuracy in whole percent.
pub const REFERENCE_PER_CLASS: [(&str, u64); 16] = [
    ("Femur", 94),
    ("Head (PPP, Tectum)", 91),
    ("Head (Cerebellum)", 90),
    ("Head (Sagittal)", 95),
    ("Other", 84),
    ("Stomach", 88),
    ("Bladder (CDC)", 85),
    ("Nasal triangle", 84),
    ("Shoulder bone", 96),
    ("Spine", 85),
    ("Kidneys", 77),
    ("Umbilical cord (Anterior abdominal wall)", 55),
    ("Placenta (Umbilical cord)", 70),
    ("Slice through three vessels", 86),
    ("Four-chamber heart section", 78),
    ("Cervix", 93),
];

pub const FOCUS_CLASS: &str = "Umbilical cord (Anterior abdominal wall)";

/// 100 samples per class with the reference accuracy on the diagonal; the
/// misses all land on the next class.
pub fn reference_matrix() -> ConfusionMatrix {
    let k = REFERENCE_PER_CLASS.len();
    let names = REFERENCE_PER_CLASS.iter().map(|(n, _)| n.to_string()).collect();
    let mut counts = vec![vec![0u64; k]; k];
    for (i, &(_, pct)) in REFERENCE_PER_CLASS.iter().enumerate() {
        counts[i][i] = pct;
        counts[i][(i + 1) % k] = 100 - pct;
    }
    ConfusionMatrix::from_counts(names, counts).expect("square")
}

/// Best ensemble line of the reference comparison.
pub fn reference_row() -> ComparisonRow {
    ComparisonRow {
        architecture: "EfficientNet-B0+ EfficientNet-B6".into(),
        loss: "LDAM-Focal Loss".into(),
        accuracy: 0.85,
        f1: 0.86,
        focus_class: "Umbilical Cord (AAW)".into(),
        focus_accuracy: 0.55,
    }
}
