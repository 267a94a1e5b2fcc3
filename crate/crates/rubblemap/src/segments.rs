//! Connected-component segments over label maps, ground-truth assignment by
//! maximum overlap, and per-segment descriptor cropping.

use serde::Serialize;

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::imaging::{Image, LabelMap, NUM_CLASSES};

/// An 8-connected region of one non-background class. Pixels are sorted
/// row-major, so the first pixel is the top-left one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentRecord {
    pub id: u32,
    /// Grid the segment was extracted from.
    pub width: u32,
    pub height: u32,
    pub class: u8,
    pub gt_class: Option<u8>,
    pub pixels: Vec<(u32, u32)>,
    /// Inclusive bounding box (x0, y0, x1, y1).
    pub bbox: (u32, u32, u32, u32),
}

impl SegmentRecord {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Membership test via binary search on the sorted (y, x) pixel list.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.pixels.binary_search(&(y, x)).is_ok()
    }
}

/// Extracts 8-connected components of every non-background class, dropping
/// those smaller than `min_area`. Segments are ordered by their top-left
/// pixel (row, then column) and numbered in that order.
pub fn extract_segments(lm: &LabelMap, min_area: usize) -> Vec<SegmentRecord> {
    let w = lm.width as usize;
    let h = lm.height as usize;
    let mut visited = vec![false; w * h];
    let mut segments = Vec::new();
    let mut stack = Vec::new();

    for start in 0..w * h {
        let class = lm.labels[start];
        if class == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut pixels: Vec<(u32, u32)> = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            pixels.push((y as u32, x as u32));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if !visited[ni] && lm.labels[ni] == class {
                        visited[ni] = true;
                        stack.push(ni);
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        pixels.sort_unstable();
        let mut bbox = (u32::MAX, u32::MAX, 0u32, 0u32);
        for &(y, x) in &pixels {
            bbox.0 = bbox.0.min(x);
            bbox.1 = bbox.1.min(y);
            bbox.2 = bbox.2.max(x);
            bbox.3 = bbox.3.max(y);
        }
        segments.push(SegmentRecord {
            id: 0,
            width: lm.width,
            height: lm.height,
            class,
            gt_class: None,
            pixels,
            bbox,
        });
    }

    // Scan order already visits components by their top-left pixel, but the
    // pop order inside a component does not matter; sort to pin it down.
    segments.sort_by_key(|s| s.pixels[0]);
    for (i, s) in segments.iter_mut().enumerate() {
        s.id = i as u32;
    }
    segments
}

/// Ground-truth class with the largest pixel overlap against the segment
/// mask (background included); ties resolve toward the more severe class.
pub fn assign_gt_label(seg: &SegmentRecord, gt: &LabelMap) -> Result<u8> {
    if seg.width != gt.width || seg.height != gt.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} ground truth", seg.width, seg.height),
            got: format!("{}x{}", gt.width, gt.height),
        });
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &(y, x) in &seg.pixels {
        counts[gt.get(x, y) as usize] += 1;
    }
    let mut best = 0u8;
    let mut best_count = 0usize;
    for (c, &count) in counts.iter().enumerate() {
        if count >= best_count {
            best = c as u8;
            best_count = count;
        }
    }
    Ok(best)
}

/// Descriptors whose center pixel falls inside the segment mask. An empty
/// result marks the segment as unencodable; the caller decides what to do.
pub fn crop_segment(img: &Image, seg: &SegmentRecord, ds: &DescriptorSet) -> Result<DescriptorSet> {
    if img.width != seg.width || img.height != seg.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} image", seg.width, seg.height),
            got: format!("{}x{}", img.width, img.height),
        });
    }
    let mut out = DescriptorSet::empty(ds.dim);
    for i in 0..ds.len() {
        if seg.contains(ds.xs[i], ds.ys[i]) {
            let v = ds.vector_f64(i);
            out.push(ds.xs[i], ds.ys[i], &v);
        }
    }
    Ok(out)
}

/// One JSON line per segment for the segment dump interface.
#[derive(Serialize)]
pub struct SegmentDump<'a> {
    pub image_id: &'a str,
    pub segment_id: u32,
    pub class: u8,
    pub area: usize,
    pub bbox: [u32; 4],
}

pub fn dump_segments(image_id: &str, segments: &[SegmentRecord]) -> String {
    let mut out = String::new();
    for s in segments {
        let line = serde_json::to_string(&SegmentDump {
            image_id,
            segment_id: s.id,
            class: s.class,
            area: s.area(),
            bbox: [s.bbox.0, s.bbox.1, s.bbox.2, s.bbox.3],
        })
        .expect("segment dump serialization");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::DescriptorSet;

    fn map_from(rows: &[&str]) -> LabelMap {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        let labels = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b - b'0'))
            .collect();
        LabelMap::new(w, h, labels).unwrap()
    }

    #[test]
    fn background_only_yields_no_segments() {
        let lm = LabelMap::zeros(6, 4);
        assert!(extract_segments(&lm, 1).is_empty());
    }

    #[test]
    fn two_disjoint_blobs_two_segments() {
        let lm = map_from(&[
            "330003",
            "330003",
            "000003",
            "000000",
        ]);
        let segs = extract_segments(&lm, 1);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.class == 3));
        assert_eq!(segs[0].pixels[0], (0, 0));
        assert_eq!(segs[1].pixels[0], (0, 5));
        assert_eq!(segs[0].area(), 4);
        assert_eq!(segs[1].area(), 3);
        assert_eq!(segs[1].bbox, (5, 0, 5, 2));
    }

    #[test]
    fn diagonal_pixels_join_under_8_connectivity() {
        let lm = map_from(&[
            "200",
            "020",
            "002",
        ]);
        let segs = extract_segments(&lm, 1);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].area(), 3);

        // Flood-fill oracle: breadth-first over 8-neighbors from (0,0).
        let mut reach = vec![(0u32, 0u32)];
        let mut frontier = vec![(0i64, 0i64)];
        while let Some((x, y)) = frontier.pop() {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (0..3).contains(&nx)
                        && (0..3).contains(&ny)
                        && lm.get(nx as u32, ny as u32) == 2
                        && !reach.contains(&(ny as u32, nx as u32))
                    {
                        reach.push((ny as u32, nx as u32));
                        frontier.push((nx, ny));
                    }
                }
            }
        }
        reach.sort_unstable();
        assert_eq!(segs[0].pixels, reach);
    }

    #[test]
    fn min_area_filters_small_components() {
        let lm = map_from(&[
            "110",
            "110",
            "002",
        ]);
        let segs = extract_segments(&lm, 2);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].class, 1);
    }

    #[test]
    fn same_class_segments_are_disjoint() {
        let lm = map_from(&[
            "101",
            "010",
            "101",
        ]);
        // All of class 1 and 8-connected through the diagonals: one segment.
        let segs = extract_segments(&lm, 1);
        assert_eq!(segs.len(), 1);
        let total: usize = segs.iter().map(|s| s.area()).sum();
        let fg = lm.labels.iter().filter(|&&l| l != 0).count();
        assert_eq!(total, fg);
    }

    #[test]
    fn gt_label_fully_inside_region() {
        let lm = map_from(&["33", "33"]);
        let gt = map_from(&["11", "11"]);
        let seg = &extract_segments(&lm, 1)[0];
        assert_eq!(assign_gt_label(seg, &gt).unwrap(), 1);
    }

    #[test]
    fn gt_label_max_overlap_and_tie_rule() {
        // Segment covers the full 1x15 row; GT has 10 mild, 5 severe.
        let lm = LabelMap::new(15, 1, vec![2; 15]).unwrap();
        let gt = LabelMap::new(
            15,
            1,
            vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 3, 3, 3, 3, 3],
        )
        .unwrap();
        let seg = &extract_segments(&lm, 1)[0];
        assert_eq!(assign_gt_label(seg, &gt).unwrap(), 1);

        // Tie {Md: 7, S: 7}: severity wins, cross-checked by counting.
        let lm = LabelMap::new(14, 1, vec![1; 14]).unwrap();
        let gt_labels: Vec<u8> = (0..14).map(|i| if i < 7 { 2 } else { 3 }).collect();
        let gt = LabelMap::new(14, 1, gt_labels.clone()).unwrap();
        let seg = &extract_segments(&lm, 1)[0];
        let mut counts = [0usize; 4];
        for &l in &gt_labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts[2], counts[3]);
        assert_eq!(assign_gt_label(seg, &gt).unwrap(), 3);
    }

    #[test]
    fn gt_label_ignores_pixel_order() {
        let lm = map_from(&["22", "22"]);
        let gt = map_from(&["13", "31"]);
        let mut seg = extract_segments(&lm, 1)[0].clone();
        let forward = assign_gt_label(&seg, &gt).unwrap();
        seg.pixels.reverse();
        let reversed = assign_gt_label(&seg, &gt).unwrap();
        assert_eq!(forward, reversed);
    }

    #[test]
    fn crop_whole_image_mask_keeps_everything() {
        let img = Image::constant(4, 4, 0.5);
        let lm = LabelMap::new(4, 4, vec![2; 16]).unwrap();
        let seg = &extract_segments(&lm, 1)[0];
        let mut ds = DescriptorSet::empty(2);
        ds.push(0, 0, &[1.0, 2.0]);
        ds.push(3, 2, &[3.0, 4.0]);
        let kept = crop_segment(&img, seg, &ds).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn crop_empty_intersection_flags_unencodable() {
        let img = Image::constant(4, 4, 0.5);
        let lm = map_from(&["2000", "0000", "0000", "0000"]);
        let seg = &extract_segments(&lm, 1)[0];
        let mut ds = DescriptorSet::empty(1);
        ds.push(3, 3, &[1.0]);
        let kept = crop_segment(&img, seg, &ds).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn crop_half_plane_matches_membership_scan() {
        let img = Image::constant(6, 6, 0.5);
        let mut labels = vec![0u8; 36];
        for y in 0..6 {
            for x in 0..3 {
                labels[y * 6 + x] = 3;
            }
        }
        let lm = LabelMap::new(6, 6, labels).unwrap();
        let seg = &extract_segments(&lm, 1)[0];
        let mut ds = DescriptorSet::empty(1);
        for y in 0..6u32 {
            for x in 0..6u32 {
                ds.push(x, y, &[(x + y) as f64]);
            }
        }
        let kept = crop_segment(&img, seg, &ds).unwrap();
        // Brute-force membership filter.
        let expect: Vec<(u32, u32)> = (0..36u32)
            .map(|i| (i % 6, i / 6))
            .filter(|&(x, y)| seg.pixels.contains(&(y, x)))
            .collect();
        assert_eq!(kept.len(), expect.len());
        for (i, &(x, y)) in expect.iter().enumerate() {
            assert_eq!((kept.xs[i], kept.ys[i]), (x, y));
        }
    }

    #[test]
    fn dump_emits_one_json_line_per_segment() {
        let lm = map_from(&["30", "02"]);
        let segs = extract_segments(&lm, 1);
        let dump = dump_segments("scene-7", &segs);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"image_id\":\"scene-7\""));
        assert!(lines[0].contains("\"bbox\""));
    }
}
