use std::cmp::Ordering;

use super::Detection;

/// Confidence descending, then cell row, column and class ascending.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cell.row.cmp(&b.cell.row))
        .then(a.cell.col.cmp(&b.cell.col))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class duplicate removal: a detection survives unless a kept
/// detection of the same class overlaps it with IoU above `iou_threshold`.
/// Output is sorted by confidence, descending.
pub fn nms_duplicates(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}
