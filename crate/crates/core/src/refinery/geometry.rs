use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("mask `{0}` has no set cells")]
    Empty(String),
    #[error("mask `{id}` is malformed: {reason}")]
    Malformed { id: String, reason: String },
}

/// Binary segmentation mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    segment_id: String,
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl SegmentMask {
    pub fn new(segment_id: impl Into<String>, height: usize, width: usize, cells: Vec<bool>) -> Result<Self, MaskError> {
        let segment_id = segment_id.into();
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(MaskError::Malformed {
                reason: format!("{height}x{width} grid with {} cells", cells.len()),
                id: segment_id,
            });
        }
        Ok(Self {
            segment_id,
            height,
            width,
            cells,
        })
    }

    /// Builds a mask from rows of `'0'` / `'1'` characters.
    pub fn from_rows<S: AsRef<str>>(segment_id: impl Into<String>, rows: &[S]) -> Result<Self, MaskError> {
        let segment_id = segment_id.into();
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut cells = Vec::with_capacity(rows.len() * width);
        for (y, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != width {
                return Err(MaskError::Malformed {
                    id: segment_id,
                    reason: format!("row {y} has length {} (expected {width})", row.len()),
                });
            }
            for ch in row.chars() {
                match ch {
                    '0' => cells.push(false),
                    '1' => cells.push(true),
                    other => {
                        return Err(MaskError::Malformed {
                            id: segment_id,
                            reason: format!("unexpected character {other:?} in row {y}"),
                        })
                    }
                }
            }
        }
        Self::new(segment_id, rows.len(), width, cells)
    }

    pub fn segment_id(&self) -> &str {
        &self.segment_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.set_count() as f64 / (self.height * self.width) as f64
    }
}

/// Axis-aligned box in grid cells: column `x`, row `y`, width `w`, height `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Ordering key used for tie-breaking: (y, x, h, w).
    pub fn key(&self) -> (usize, usize, usize, usize) {
        (self.y, self.x, self.h, self.w)
    }

    pub fn intersection(&self, other: &BoundingBox) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Maximum-area all-ones rectangle; ties go to the smallest (y, x, h, w).
///
/// For every top row the column-wise AND of the rows below it is extended one
/// row at a time; a best rectangle for a fixed (top, height) always spans a
/// whole run of set columns, so only runs are scored.
pub fn largest_rectangle(mask: &SegmentMask) -> Result<BoundingBox, MaskError> {
    let (height, width) = (mask.height(), mask.width());
    let mut best: Option<BoundingBox> = None;
    let mut band = vec![true; width];
    for top in 0..height {
        band.iter_mut().for_each(|b| *b = true);
        for bottom in top..height {
            let mut any = false;
            for (x, b) in band.iter_mut().enumerate() {
                *b = *b && mask.get(bottom, x);
                any |= *b;
            }
            if !any {
                break;
            }
            let h = bottom - top + 1;
            let mut x = 0;
            while x < width {
                if !band[x] {
                    x += 1;
                    continue;
                }
                let start = x;
                while x < width && band[x] {
                    x += 1;
                }
                let cand = BoundingBox {
                    x: start,
                    y: top,
                    w: x - start,
                    h,
                };
                let better = match best {
                    None => true,
                    Some(b) => cand.area() > b.area() || (cand.area() == b.area() && cand.key() < b.key()),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }
    best.ok_or_else(|| MaskError::Empty(mask.segment_id().to_string()))
}

/// Greedy suppression by descending area (ties by (y, x, h, w)); a box is kept
/// when its IoU with every kept box is at most `iou_threshold`.
pub fn dedup_boxes(boxes: &[BoundingBox], iou_threshold: f64, max_boxes: usize) -> Vec<BoundingBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(|a, b| b.area().cmp(&a.area()).then(a.key().cmp(&b.key())));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in sorted {
        if kept.len() >= max_boxes {
            break;
        }
        if kept.iter().all(|k| k.iou(&b) <= iou_threshold) {
            kept.push(b);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x: usize, y: usize, w: usize, h: usize) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    /// Exhaustive scan over every rectangle.
    fn brute_force(mask: &SegmentMask) -> Option<BoundingBox> {
        let mut best: Option<BoundingBox> = None;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                for h in 1..=mask.height() - y {
                    for w in 1..=mask.width() - x {
                        let full = (y..y + h).all(|r| (x..x + w).all(|c| mask.get(r, c)));
                        if !full {
                            continue;
                        }
                        let cand = bb(x, y, w, h);
                        if best.is_none_or(|b| {
                            cand.area() > b.area() || (cand.area() == b.area() && cand.key() < b.key())
                        }) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn full_grid() {
        let m = SegmentMask::from_rows("m", &["1111", "1111", "1111"]).unwrap();
        assert_eq!(largest_rectangle(&m).unwrap(), bb(0, 0, 4, 3));
    }

    #[test]
    fn l_shape() {
        let m = SegmentMask::from_rows("m", &["1100", "1100", "1111"]).unwrap();
        let r = largest_rectangle(&m).unwrap();
        assert_eq!(r, bb(0, 0, 2, 3));
        assert_eq!(Some(r), brute_force(&m));
    }

    #[test]
    fn singleton() {
        let m = SegmentMask::from_rows("m", &["000", "000", "010"]).unwrap();
        assert_eq!(largest_rectangle(&m).unwrap(), bb(1, 2, 1, 1));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = SegmentMask::from_rows("blank", &["00", "00"]).unwrap();
        assert_eq!(largest_rectangle(&m), Err(MaskError::Empty("blank".into())));
    }

    #[test]
    fn malformed_rows() {
        assert!(SegmentMask::from_rows("m", &["10", "1"]).is_err());
        assert!(SegmentMask::from_rows("m", &["1x"]).is_err());
        assert!(SegmentMask::from_rows::<&str>("m", &[]).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(bb(0, 0, 4, 4).iou(&bb(0, 0, 4, 4)), 1.0);
        assert_eq!(bb(0, 0, 2, 2).iou(&bb(5, 5, 2, 2)), 0.0);
        assert!((bb(0, 0, 4, 4).iou(&bb(2, 2, 4, 4)) - 4.0 / 28.0).abs() < 1e-12);
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_boxes(&[bb(1, 1, 3, 3), bb(1, 1, 3, 3)], 0.5, 8).len(), 1);
        assert_eq!(dedup_boxes(&[bb(0, 0, 2, 2), bb(5, 5, 2, 2)], 0.5, 8).len(), 2);
        assert_eq!(dedup_boxes(&[bb(0, 0, 4, 4), bb(2, 2, 4, 4)], 0.5, 8).len(), 2);
        let many: Vec<_> = (0..20).map(|i| bb(i * 10, 0, 2, 2)).collect();
        assert_eq!(dedup_boxes(&many, 0.5, 8).len(), 8);
    }

    fn mask_strategy() -> impl Strategy<Value = SegmentMask> {
        (1usize..=12, 1usize..=12, 0.2f64..0.9).prop_flat_map(|(h, w, p)| {
            proptest::collection::vec(proptest::bool::weighted(p), h * w)
                .prop_map(move |cells| SegmentMask::new("r", h, w, cells).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_brute_force(mask in mask_strategy()) {
            prop_assert_eq!(largest_rectangle(&mask).ok(), brute_force(&mask));
        }

        #[test]
        fn dedup_respects_threshold_and_order(
            raw in proptest::collection::vec((0usize..10, 0usize..10, 1usize..6, 1usize..6), 0..15),
            thr in 0.0f64..1.0,
        ) {
            let boxes: Vec<_> = raw.iter().map(|&(x, y, w, h)| bb(x, y, w, h)).collect();
            let kept = dedup_boxes(&boxes, thr, 8);
            prop_assert!(kept.len() <= 8);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.iou(b) <= thr);
                }
            }
            let mut rev = boxes.clone();
            rev.reverse();
            prop_assert_eq!(dedup_boxes(&rev, thr, 8), kept);
        }
    }
}
