//! Panoptic quality (PQ = SQ x RQ) on label maps.
//!
//! A segment is a `(class, instance)` pair with a nonzero instance id.
//! Instance id 0 marks void. Pixels that are void in the ground truth are
//! dropped from both intersections and unions, and a predicted segment that
//! lies entirely on ground-truth void is ignored rather than counted as a
//! false positive. Segments match when they share a class and their IoU is
//! strictly greater than 0.5, which makes matches unique.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_pgm, LabelPlane};

pub type SegmentId = (u16, u16);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub class: Vec<u16>,
    pub instance: Vec<u16>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, class: Vec<u16>, instance: Vec<u16>) -> Result<Self> {
        let n = height * width;
        if class.len() != n || instance.len() != n {
            return Err(Error::dim(
                "h",
                format!(
                    "{height}x{width} canvas needs {n} labels, got {} class / {} instance",
                    class.len(),
                    instance.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            class,
            instance,
        })
    }

    pub fn from_planes(class: LabelPlane, instance: LabelPlane) -> Result<Self> {
        if (class.height, class.width) != (instance.height, instance.width) {
            return Err(Error::dim(
                "h",
                format!(
                    "class plane is {}x{}, instance plane is {}x{}",
                    class.height, class.width, instance.height, instance.width
                ),
            ));
        }
        Self::new(class.height, class.width, class.values, instance.values)
    }

    /// Reads a class plane and an instance plane from PGM files.
    pub fn load(class_path: &Path, instance_path: &Path) -> Result<Self> {
        Self::from_planes(read_pgm(class_path)?, read_pgm(instance_path)?)
    }

    pub fn class_plane(&self) -> LabelPlane {
        LabelPlane {
            height: self.height,
            width: self.width,
            values: self.class.clone(),
        }
    }

    pub fn instance_plane(&self) -> LabelPlane {
        LabelPlane {
            height: self.height,
            width: self.width,
            values: self.instance.clone(),
        }
    }

    /// Segment id of pixel `i`, or `None` for void.
    pub fn segment_at(&self, i: usize) -> Option<SegmentId> {
        (self.instance[i] != 0).then(|| (self.class[i], self.instance[i]))
    }

    /// Membership mask of one segment.
    pub fn mask(&self, seg: SegmentId) -> Vec<bool> {
        (0..self.class.len()).map(|i| self.segment_at(i) == Some(seg)).collect()
    }

    pub fn segments(&self) -> BTreeSet<SegmentId> {
        (0..self.class.len()).filter_map(|i| self.segment_at(i)).collect()
    }
}

/// Intersection over union of two pixel masks on the same canvas.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("<pixels>", format!("masks cover {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::Undefined("IoU of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentMatch {
    pub class: u16,
    pub pred_instance: u16,
    pub gt_instance: u16,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Matching {
    pub matches: Vec<SegmentMatch>,
    pub unmatched_pred: Vec<SegmentId>,
    pub unmatched_gt: Vec<SegmentId>,
}

/// Matches predicted to ground-truth segments at IoU > 0.5.
pub fn match_segments(pred: &PanopticMap, gt: &PanopticMap) -> Result<Matching> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(
            "h",
            format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    let mut gt_area: BTreeMap<SegmentId, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<SegmentId, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(SegmentId, SegmentId), usize> = BTreeMap::new();
    for i in 0..gt.class.len() {
        let Some(g) = gt.segment_at(i) else { continue };
        *gt_area.entry(g).or_default() += 1;
        if let Some(p) = pred.segment_at(i) {
            *pred_area.entry(p).or_default() += 1;
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut out = Matching::default();
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    for (&(p, g), &i) in &inter {
        if p.0 != g.0 {
            continue;
        }
        let union = pred_area[&p] + gt_area[&g] - i;
        // i / union > 1/2, in integers
        if 2 * i > union {
            out.matches.push(SegmentMatch {
                class: p.0,
                pred_instance: p.1,
                gt_instance: g.1,
                iou: i as f64 / union as f64,
            });
            matched_pred.insert(p);
            matched_gt.insert(g);
        }
    }
    out.unmatched_pred = pred_area.keys().filter(|p| !matched_pred.contains(*p)).copied().collect();
    out.unmatched_gt = gt_area.keys().filter(|g| !matched_gt.contains(*g)).copied().collect();
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fneg: usize,
    pub iou_sum: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl ClassStats {
    fn finish(mut self) -> Self {
        self.sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fneg as f64;
        self.rq = if denom == 0.0 { 0.0 } else { self.tp as f64 / denom };
        self.pq = self.sq * self.rq;
        self
    }
}

/// Unweighted means over a class set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u16, ClassStats>,
    pub all: Aggregate,
    pub things: Aggregate,
    pub stuff: Aggregate,
}

fn aggregate<'a>(stats: impl Iterator<Item = &'a ClassStats>) -> Aggregate {
    let mut a = Aggregate::default();
    for s in stats {
        a.pq += s.pq;
        a.sq += s.sq;
        a.rq += s.rq;
        a.classes += 1;
    }
    if a.classes > 0 {
        let n = a.classes as f64;
        a.pq /= n;
        a.sq /= n;
        a.rq /= n;
    }
    a
}

/// Per-class and aggregate PQ/SQ/RQ. Classes in neither set contribute to
/// `all` only.
pub fn pq_stats(pred: &PanopticMap, gt: &PanopticMap, things: &BTreeSet<u16>, stuff: &BTreeSet<u16>) -> Result<PqStats> {
    if let Some(c) = things.intersection(stuff).next() {
        return Err(Error::Config(format!("class {c} is listed as both thing and stuff")));
    }
    let m = match_segments(pred, gt)?;
    let mut per_class: BTreeMap<u16, ClassStats> = BTreeMap::new();
    for s in &m.matches {
        let e = per_class.entry(s.class).or_default();
        e.tp += 1;
        e.iou_sum += s.iou;
    }
    for p in &m.unmatched_pred {
        per_class.entry(p.0).or_default().fp += 1;
    }
    for g in &m.unmatched_gt {
        per_class.entry(g.0).or_default().fneg += 1;
    }
    for s in per_class.values_mut() {
        *s = s.finish();
    }
    Ok(PqStats {
        all: aggregate(per_class.values()),
        things: aggregate(per_class.iter().filter(|(c, _)| things.contains(c)).map(|(_, s)| s)),
        stuff: aggregate(per_class.iter().filter(|(c, _)| stuff.contains(c)).map(|(_, s)| s)),
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u16,
    pub name: String,
    pub isthing: bool,
}

/// Reads `[{"id", "name", "isthing"}]` and splits ids into thing and stuff
/// sets.
pub fn load_categories(path: &Path) -> Result<(BTreeSet<u16>, BTreeSet<u16>)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let cats: Vec<Category> = serde_json::from_slice(&raw).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(split_categories(&cats))
}

pub fn split_categories(cats: &[Category]) -> (BTreeSet<u16>, BTreeSet<u16>) {
    let things = cats.iter().filter(|c| c.isthing).map(|c| c.id).collect();
    let stuff = cats.iter().filter(|c| !c.isthing).map(|c| c.id).collect();
    (things, stuff)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip(class: &[u16], inst: &[u16]) -> PanopticMap {
        PanopticMap::new(1, class.len(), class.to_vec(), inst.to_vec()).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = [true, true, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        let a: Vec<bool> = (0..11).map(|i| i < 10).collect();
        let b: Vec<bool> = (0..11).map(|i| i >= 3).collect();
        assert!((iou(&a, &b).unwrap() - 7.0 / 11.0).abs() < 1e-15);
        assert!(matches!(iou(&[false], &[false]), Err(Error::Undefined(_))));
    }

    #[test]
    fn seven_of_eleven() {
        // gt covers pixels 0..10, pred covers 3..11
        let gt = strip(&[1; 12], &[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0]);
        let pred = strip(&[1; 12], &[0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0]);
        let s = pq_stats(&pred, &gt, &BTreeSet::from([1]), &BTreeSet::new()).unwrap();
        let c = s.per_class[&1];
        // the pred pixel on gt void is dropped: |pred| = 7, IoU = 7/10
        assert_eq!((c.tp, c.fp, c.fneg), (1, 0, 0));
        assert!((c.sq - 0.7).abs() < 1e-15);
        // with the extra pixel inside gt the textbook 7/11 appears
        let gt = strip(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 1], &[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0]);
        let s = pq_stats(&pred, &gt, &BTreeSet::from([1]), &BTreeSet::new()).unwrap();
        assert!((s.per_class[&1].pq - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn half_iou_does_not_match() {
        let gt = strip(&[1; 4], &[1, 1, 2, 2]);
        let pred = strip(&[1; 4], &[1, 1, 1, 1]);
        let m = match_segments(&pred, &gt).unwrap();
        assert!(m.matches.is_empty());
        assert_eq!((m.unmatched_pred.len(), m.unmatched_gt.len()), (1, 2));
    }

    #[test]
    fn one_third_overlap_is_fp_and_fn() {
        let gt = strip(&[1, 1, 2], &[1, 1, 1]);
        let pred = strip(&[1, 1, 1], &[0, 3, 3]);
        let m = match_segments(&pred, &gt).unwrap();
        assert!(m.matches.is_empty());
        let s = pq_stats(&pred, &gt, &BTreeSet::new(), &BTreeSet::new()).unwrap();
        let c = s.per_class[&1];
        assert_eq!((c.tp, c.fp, c.fneg), (0, 1, 1));
    }

    #[test]
    fn perfect_prediction() {
        let gt = strip(&[1, 1, 2, 2, 3], &[1, 2, 1, 1, 0]);
        let s = pq_stats(&gt, &gt, &BTreeSet::from([1]), &BTreeSet::from([2])).unwrap();
        for c in s.per_class.values() {
            assert_eq!((c.pq, c.sq, c.rq), (1.0, 1.0, 1.0));
        }
        assert_eq!(s.all.classes, 2);
        assert_eq!((s.things.pq, s.stuff.pq), (1.0, 1.0));
    }

    #[test]
    fn overlapping_class_sets_rejected() {
        let gt = strip(&[1], &[1]);
        assert!(matches!(
            pq_stats(&gt, &gt, &BTreeSet::from([1]), &BTreeSet::from([1])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn canvas_mismatch_is_dimension_error() {
        assert!(matches!(
            match_segments(&strip(&[1], &[1]), &strip(&[1, 1], &[1, 1])),
            Err(Error::Dimension { .. })
        ));
    }
}
