//! Images, polygon annotations, label maps and dataset folds.
//!
//! Images are 8-bit PGM (P5) or PPM (P6) on disk, scaled to [0,1] in memory.
//! Annotations are one JSON document per image with per-annotator polygon
//! lists. Rasterization uses the even-odd rule sampled at pixel centers;
//! polygon overlaps and voting ties both resolve toward the more severe
//! class.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

/// Number of pixel classes: background plus three damage levels.
pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;

pub fn class_name(class: u8) -> &'static str {
    match class {
        0 => "Background",
        1 => "Mild",
        2 => "Medium",
        3 => "Severe",
        _ => "?",
    }
}

/// Damage level attached to an annotated polygon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DamageLabel {
    Mild,
    Medium,
    Severe,
}

impl DamageLabel {
    pub fn class_index(self) -> u8 {
        match self {
            DamageLabel::Mild => 1,
            DamageLabel::Medium => 2,
            DamageLabel::Severe => 3,
        }
    }

    pub fn from_class_index(class: u8) -> Option<DamageLabel> {
        match class {
            1 => Some(DamageLabel::Mild),
            2 => Some(DamageLabel::Medium),
            3 => Some(DamageLabel::Severe),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Image

/// Grayscale or RGB image with intensities in [0,1], row-major, channels
/// interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} samples"),
                got: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Data("image samples must be finite in [0,1]".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: u32, height: u32, value: f32) -> Image {
        Image {
            width,
            height,
            channels: 1,
            data: vec![value; width as usize * height as usize],
        }
    }

    /// Rec. 601 luma for RGB images; identity for grayscale.
    pub fn to_gray(&self) -> Vec<f64> {
        let n = self.width as usize * self.height as usize;
        if self.channels == 1 {
            self.data.iter().map(|&v| v as f64).collect()
        } else {
            let mut out = Vec::with_capacity(n);
            for px in self.data.chunks_exact(3) {
                out.push(0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64);
            }
            out
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

// ---------------------------------------------------------------------------
// PNM (P5/P6) input/output

fn pnm_error(msg: impl Into<String>) -> Error {
    FormatError::Malformed(msg.into()).into()
}

/// Reads one whitespace-delimited ASCII token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(pnm_error("expected integer in PNM header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| pnm_error("bad integer in PNM header"))
}

fn parse_pnm(bytes: &[u8]) -> Result<(u32, u32, u32, &[u8])> {
    if bytes.len() < 2 {
        return Err(pnm_error("file too short for PNM header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1u32,
        b"P6" => 3u32,
        _ => return Err(pnm_error("not a binary PGM/PPM (expected P5 or P6)")),
    };
    let mut pos = 2;
    let width = next_token(bytes, &mut pos)? as u32;
    let height = next_token(bytes, &mut pos)? as u32;
    let maxval = next_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(pnm_error(format!("only 8-bit PNM supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(pnm_error("missing separator before PNM payload"));
    }
    pos += 1;
    let expected = width as usize * height as usize * channels as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            needed: expected - payload.len(),
            got: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(pnm_error("trailing bytes after PNM payload"));
    }
    Ok((width, height, channels, payload))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let (width, height, channels, payload) = parse_pnm(&bytes)?;
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(
        img.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

// ---------------------------------------------------------------------------
// Label maps

/// Per-pixel class assignment: 0 background, 1 mild, 2 medium, 3 severe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(width: u32, height: u32) -> LabelMap {
        LabelMap {
            width,
            height,
            labels: vec![0; width as usize * height as usize],
        }
    }

    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<LabelMap> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{} labels", width, height),
                got: format!("{}", labels.len()),
            });
        }
        if labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data("label out of range 0..=3".into()));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        self.labels[y as usize * self.width as usize + x as usize] = label;
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != BACKGROUND)
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Label maps are persisted as raw P5 files whose byte values are the class
/// indices themselves (not intensity-scaled).
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let (width, height, channels, payload) = parse_pnm(&bytes)?;
    if channels != 1 {
        return Err(pnm_error("label map must be single-channel P5"));
    }
    LabelMap::new(width, height, payload.to_vec())
}

pub fn write_label_map(path: &Path, lm: &LabelMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", lm.width, lm.height).into_bytes();
    bytes.extend_from_slice(&lm.labels);
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

// ---------------------------------------------------------------------------
// Annotations

/// One labeled polygon. Vertices are in pixel units; the polygon interior is
/// defined by the even-odd rule sampled at pixel centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub label: DamageLabel,
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    /// A polygon needs at least three distinct vertices to enclose area.
    pub fn is_degenerate(&self) -> bool {
        let mut distinct: Vec<[f64; 2]> = Vec::new();
        for p in &self.points {
            if !distinct.contains(p) {
                distinct.push(*p);
            }
        }
        distinct.len() < 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorEntry {
    pub annotator: String,
    pub polygons: Vec<Polygon>,
}

/// All annotations for one image, as stored in its JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<AnnotatorEntry>,
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: invalid annotation JSON: {e}", path.display())))
}

pub fn write_annotations(path: &Path, ann: &AnnotationSet) -> Result<()> {
    let json = serde_json::to_string(ann).expect("annotation serialization");
    fs::write(path, json).map_err(|e| Error::file(path, e))
}

// ---------------------------------------------------------------------------
// Rasterization

/// Even-odd scanline fill of one polygon into `map`, writing `class` wherever
/// it beats the existing label (higher severity wins on overlap).
fn fill_polygon(map: &mut LabelMap, poly: &Polygon, class: u8) {
    let w = map.width as i64;
    let n = poly.points.len();
    for row in 0..map.height {
        let yc = row as f64 + 0.5;
        let mut crossings: Vec<f64> = Vec::new();
        for i in 0..n {
            let [x1, y1] = poly.points[i];
            let [x2, y2] = poly.points[(i + 1) % n];
            // Half-open span so shared vertices count once.
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                crossings.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            // Pixel centers x+0.5 inside [xa, xb).
            let first = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let last_excl = ((pair[1] - 0.5).ceil() as i64).min(w);
            for x in first..last_excl {
                let cur = map.get(x as u32, row);
                if class > cur {
                    map.set(x as u32, row, class);
                }
            }
        }
    }
}

/// Result of rasterizing an annotation set: one label map per annotator,
/// plus the count of degenerate polygons that were skipped.
pub struct Rasterized {
    pub maps: Vec<LabelMap>,
    pub degenerate_skipped: usize,
}

/// Turns each annotator's polygons into a label map of the given size.
/// Polygon overlap resolves toward the higher severity; polygons with fewer
/// than three distinct vertices are skipped and counted.
pub fn rasterize_annotations(ann: &AnnotationSet, width: u32, height: u32) -> Rasterized {
    let mut maps = Vec::with_capacity(ann.annotations.len());
    let mut degenerate_skipped = 0;
    for entry in &ann.annotations {
        let mut map = LabelMap::zeros(width, height);
        for poly in &entry.polygons {
            if poly.is_degenerate() {
                degenerate_skipped += 1;
                log::warn!(
                    "skipping degenerate polygon ({} points) from annotator {}",
                    poly.points.len(),
                    entry.annotator
                );
                continue;
            }
            fill_polygon(&mut map, poly, poly.label.class_index());
        }
        maps.push(map);
    }
    Rasterized {
        maps,
        degenerate_skipped,
    }
}

/// Per-pixel mode over annotator maps; ties resolve toward the more severe
/// class (S > Md > M > B).
pub fn majority_vote(maps: &[LabelMap]) -> Result<LabelMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("majority vote over empty map list".into()))?;
    for m in maps {
        if !m.same_shape(first) {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", first.width, first.height),
                got: format!("{}x{}", m.width, m.height),
            });
        }
    }
    let mut out = LabelMap::zeros(first.width, first.height);
    for i in 0..out.labels.len() {
        let mut counts = [0u32; NUM_CLASSES];
        for m in maps {
            counts[m.labels[i] as usize] += 1;
        }
        let mut best = 0u8;
        let mut best_count = 0u32;
        for (c, &count) in counts.iter().enumerate() {
            if count >= best_count && count > 0 {
                best = c as u8;
                best_count = count;
            }
        }
        out.labels[i] = best;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Folds

/// Assignment of `n_items` dataset items to `k` cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub n_items: usize,
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, item: usize) -> usize {
        self.assignment[item]
    }

    pub fn items_in_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles item indices with a seeded PRNG and deals them round-robin, so
/// fold sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count {k} must be >= 2")));
    }
    if n < k {
        return Err(Error::Data(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (pos, &item) in order.iter().enumerate() {
        assignment[item] = pos % k;
    }
    Ok(FoldAssignment {
        n_items: n,
        k,
        assignment,
    })
}

/// Keeps only items whose label map contains at least one non-background
/// pixel.
pub fn retain_nonempty<T>(items: Vec<T>, map_of: impl Fn(&T) -> &LabelMap) -> Vec<T> {
    items
        .into_iter()
        .filter(|item| map_of(item).has_foreground())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(label: DamageLabel, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon {
            label,
            points: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    fn ann_one(polygons: Vec<Polygon>) -> AnnotationSet {
        AnnotationSet {
            image: "img".into(),
            width: 0,
            height: 0,
            annotations: vec![AnnotatorEntry {
                annotator: "a0".into(),
                polygons,
            }],
        }
    }

    /// Independent even-odd membership test: counts edge crossings strictly
    /// to the right of the pixel center.
    fn point_in_polygon(poly: &Polygon, cx: f64, cy: f64) -> bool {
        let n = poly.points.len();
        let mut crossings = 0;
        for i in 0..n {
            let [x1, y1] = poly.points[i];
            let [x2, y2] = poly.points[(i + 1) % n];
            if (y1 <= cy && cy < y2) || (y2 <= cy && cy < y1) {
                let xi = x1 + (cy - y1) * (x2 - x1) / (y2 - y1);
                if xi > cx {
                    crossings += 1;
                }
            }
        }
        crossings % 2 == 1
    }

    #[test]
    fn square_fills_interior() {
        let ann = ann_one(vec![square(DamageLabel::Severe, 2.0, 2.0, 6.0, 6.0)]);
        let out = rasterize_annotations(&ann, 10, 10);
        assert_eq!(out.degenerate_skipped, 0);
        let map = &out.maps[0];
        for y in 0..10 {
            for x in 0..10 {
                let expected = if (2..6).contains(&x) && (2..6).contains(&y) {
                    3
                } else {
                    0
                };
                assert_eq!(map.get(x, y), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn nested_polygons_severity_wins() {
        let ann = ann_one(vec![
            square(DamageLabel::Mild, 0.0, 0.0, 8.0, 8.0),
            square(DamageLabel::Severe, 2.0, 2.0, 6.0, 6.0),
        ]);
        let map = &rasterize_annotations(&ann, 8, 8).maps[0];
        assert_eq!(map.get(4, 4), 3);
        assert_eq!(map.get(1, 1), 1);
        // Order must not matter: severe first, mild drawn after.
        let ann2 = ann_one(vec![
            square(DamageLabel::Severe, 2.0, 2.0, 6.0, 6.0),
            square(DamageLabel::Mild, 0.0, 0.0, 8.0, 8.0),
        ]);
        let map2 = &rasterize_annotations(&ann2, 8, 8).maps[0];
        assert_eq!(map.labels, map2.labels);
    }

    #[test]
    fn triangle_matches_point_in_polygon_oracle() {
        let tri = Polygon {
            label: DamageLabel::Medium,
            points: vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]],
        };
        let ann = ann_one(vec![tri.clone()]);
        let map = &rasterize_annotations(&ann, 5, 5).maps[0];
        for y in 0..5u32 {
            for x in 0..5u32 {
                let inside = point_in_polygon(&tri, x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(
                    map.get(x, y) == 2,
                    inside,
                    "pixel ({x},{y}) disagreed with oracle"
                );
            }
        }
    }

    #[test]
    fn degenerate_polygons_skipped_and_counted() {
        let ann = ann_one(vec![
            Polygon {
                label: DamageLabel::Severe,
                points: vec![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]],
            },
            Polygon {
                label: DamageLabel::Mild,
                points: vec![[0.0, 0.0], [3.0, 0.0]],
            },
        ]);
        let out = rasterize_annotations(&ann, 4, 4);
        assert_eq!(out.degenerate_skipped, 2);
        assert!(!out.maps[0].has_foreground());
    }

    #[test]
    fn rasterization_is_deterministic() {
        let ann = ann_one(vec![
            square(DamageLabel::Mild, 0.7, 0.3, 5.2, 4.9),
            Polygon {
                label: DamageLabel::Severe,
                points: vec![[1.1, 0.2], [6.8, 2.4], [3.3, 6.6]],
            },
        ]);
        let a = rasterize_annotations(&ann, 8, 8);
        let b = rasterize_annotations(&ann, 8, 8);
        assert_eq!(a.maps[0], b.maps[0]);
    }

    #[test]
    fn majority_single_annotator_is_identity() {
        let lm = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let merged = majority_vote(std::slice::from_ref(&lm)).unwrap();
        assert_eq!(merged, lm);
    }

    #[test]
    fn majority_strict_and_tied_votes() {
        let mk = |v: Vec<u8>| LabelMap::new(1, 1, v).unwrap();
        // {S, S, Md} -> S
        let merged = majority_vote(&[mk(vec![3]), mk(vec![3]), mk(vec![2])]).unwrap();
        assert_eq!(merged.labels, vec![3]);
        // {M, S} tie -> S, checked against exhaustive counting
        let maps = [mk(vec![1]), mk(vec![3])];
        let mut counts = [0u32; NUM_CLASSES];
        for m in &maps {
            counts[m.labels[0] as usize] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let expect = (0..NUM_CLASSES as u8)
            .filter(|&c| counts[c as usize] == max)
            .max()
            .unwrap();
        assert_eq!(majority_vote(&maps).unwrap().labels[0], expect);
        assert_eq!(expect, 3);
    }

    #[test]
    fn majority_rejects_dimension_mismatch() {
        let a = LabelMap::zeros(2, 2);
        let b = LabelMap::zeros(2, 3);
        assert!(majority_vote(&[a, b]).is_err());
    }

    proptest! {
        #[test]
        fn majority_is_annotator_order_invariant(
            labels in proptest::collection::vec(proptest::collection::vec(0u8..4, 6), 1..5),
            swap in 0usize..4,
        ) {
            let maps: Vec<LabelMap> = labels
                .into_iter()
                .map(|v| LabelMap::new(3, 2, v).unwrap())
                .collect();
            let base = majority_vote(&maps).unwrap();
            let mut rotated = maps.clone();
            let n = rotated.len().max(1);
            rotated.rotate_left(swap % n);
            prop_assert_eq!(base, majority_vote(&rotated).unwrap());
        }

        #[test]
        fn folds_partition_items(n in 2usize..80, k in 2usize..8, seed: u64) {
            prop_assume!(n >= k);
            let folds = make_folds(n, k, seed).unwrap();
            let sizes = folds.fold_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            let min = sizes.iter().min().unwrap();
            let max = sizes.iter().max().unwrap();
            prop_assert!(max - min <= 1);
        }
    }

    #[test]
    fn folds_match_paper_arithmetic() {
        let folds = make_folds(1085, 5, 7).unwrap();
        assert_eq!(folds.fold_sizes(), vec![217; 5]);
    }

    #[test]
    fn folds_one_item_each() {
        let folds = make_folds(5, 5, 1).unwrap();
        assert_eq!(folds.fold_sizes(), vec![1; 5]);
    }

    #[test]
    fn folds_deterministic() {
        assert_eq!(make_folds(37, 4, 99).unwrap(), make_folds(37, 4, 99).unwrap());
    }

    #[test]
    fn folds_reject_small_n() {
        assert!(make_folds(3, 5, 0).is_err());
        assert!(make_folds(10, 1, 0).is_err());
    }

    #[test]
    fn retain_nonempty_counts() {
        // Corpus of 10 maps, 6 all-background: 4 survive.
        let mut maps = Vec::new();
        for i in 0..10 {
            let mut lm = LabelMap::zeros(2, 2);
            if [1, 3, 6, 8].contains(&i) {
                lm.set(0, 0, 3);
            }
            maps.push(lm);
        }
        let kept = retain_nonempty(maps, |m| m);
        assert_eq!(kept.len(), 4);
    }

    #[test]
    fn single_severe_pixel_is_retained() {
        let mut lm = LabelMap::zeros(3, 3);
        lm.set(2, 2, 3);
        let kept = retain_nonempty(vec![lm], |m| m);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 2, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let path = dir.path().join("t.pgm");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }

        let rgb = Image::new(2, 1, 3, vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.25]).unwrap();
        let path = dir.path().join("t.ppm");
        write_image(&path, &rgb).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.channels, 3);
    }

    #[test]
    fn label_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let path = dir.path().join("t_truth.pgm");
        write_label_map(&path, &lm).unwrap();
        assert_eq!(read_label_map(&path).unwrap(), lm);
    }

    #[test]
    fn annotation_json_schema() {
        let json = r#"{"image":"x.pgm","width":8,"height":8,"annotations":[
            {"annotator":"a1","polygons":[{"label":"severe","points":[[0,0],[4,0],[4,4]]}]}
        ]}"#;
        let ann: AnnotationSet = serde_json::from_str(json).unwrap();
        assert_eq!(ann.annotations[0].polygons[0].label, DamageLabel::Severe);
        let back = serde_json::to_string(&ann).unwrap();
        assert!(back.contains("\"severe\""));
    }
}
