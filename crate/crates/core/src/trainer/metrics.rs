//! Segmentation metrics: per-class IoU aggregated over a split, pixel
//! accuracy and a boundary F-score with a 2 pixel tolerance.

use serde::Serialize;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

pub const BOUNDARY_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `TP / (TP + FP + FN)` per class; 1 for a class that is neither present
    /// nor predicted.
    pub per_class_iou: Vec<f64>,
    /// Whether the class occurs in the ground truth of the split.
    pub present: Vec<bool>,
    /// Mean IoU over present classes.
    pub miou: f64,
    pub pixel_acc: f64,
    /// Mean boundary F-score over present classes with ground-truth boundaries.
    pub boundary_f: f64,
    pub images: usize,
}

/// Per-pixel argmax of the channel sigmoid scores; ties go to the lower class.
pub fn argmax_classes(logits: &[f64], classes: usize, hw: usize) -> Vec<u32> {
    (0..hw)
        .map(|k| {
            let mut best = 0;
            let mut best_score = sigmoid(logits[k]);
            for c in 1..classes {
                let s = sigmoid(logits[c * hw + k]);
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            best as u32
        })
        .collect()
}

/// Pixels of class `c` with a 4-neighbour of another class.
fn boundary(labels: &[u32], h: usize, w: usize, c: u32) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if labels[p] != c {
                continue;
            }
            let differs = (y > 0 && labels[p - w] != c)
                || (y + 1 < h && labels[p + w] != c)
                || (x > 0 && labels[p - 1] != c)
                || (x + 1 < w && labels[p + 1] != c);
            out[p] = differs;
        }
    }
    out
}

/// `(matched, total)` boundary pixels of `from` lying within the tolerance of `to`.
fn matched(from: &[bool], to: &[bool], h: usize, w: usize) -> (usize, usize) {
    let r = BOUNDARY_TOLERANCE as isize;
    let r2 = BOUNDARY_TOLERANCE * BOUNDARY_TOLERANCE;
    let (mut hit, mut total) = (0, 0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !from[(y as usize) * w + x as usize] {
                continue;
            }
            total += 1;
            let found = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    ((dy * dy + dx * dx) as f64) <= r2
                        && yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && to[yy as usize * w + xx as usize]
                })
            });
            hit += usize::from(found);
        }
    }
    (hit, total)
}

/// Running confusion and boundary counts over a split.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    // precision numerator/denominator, recall numerator/denominator
    bnd: Vec<[u64; 4]>,
    correct: u64,
    pixels: u64,
    images: usize,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            bnd: vec![[0; 4]; classes],
            correct: 0,
            pixels: 0,
            images: 0,
        }
    }

    pub fn add(&mut self, pred: &[u32], truth: &[u32], h: usize, w: usize) -> Result<()> {
        if pred.len() != h * w || truth.len() != h * w {
            return Err(Error::shape(&[h * w], &[pred.len(), truth.len()]));
        }
        for (i, &v) in pred.iter().chain(truth).enumerate() {
            if v as usize >= self.classes {
                return Err(Error::ClassOutOfRange { label: v as i64, index: i % (h * w), num_classes: self.classes });
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p == t {
                self.tp[p as usize] += 1;
                self.correct += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
        for c in 0..self.classes {
            let bp = boundary(pred, h, w, c as u32);
            let bt = boundary(truth, h, w, c as u32);
            let (pm, pt) = matched(&bp, &bt, h, w);
            let (rm, rt) = matched(&bt, &bp, h, w);
            let acc = &mut self.bnd[c];
            acc[0] += pm as u64;
            acc[1] += pt as u64;
            acc[2] += rm as u64;
            acc[3] += rt as u64;
        }
        self.pixels += (h * w) as u64;
        self.images += 1;
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let mut per_class_iou = Vec::with_capacity(self.classes);
        let mut present = Vec::with_capacity(self.classes);
        let (mut iou_sum, mut n_present) = (0.0, 0usize);
        let (mut f_sum, mut n_f) = (0.0, 0usize);
        for c in 0..self.classes {
            let denom = self.tp[c] + self.fp[c] + self.fn_[c];
            let iou = if denom == 0 { 1.0 } else { self.tp[c] as f64 / denom as f64 };
            let is_present = self.tp[c] + self.fn_[c] > 0;
            per_class_iou.push(iou);
            present.push(is_present);
            if is_present {
                iou_sum += iou;
                n_present += 1;
            }
            let [pm, pt, rm, rt] = self.bnd[c];
            if is_present && rt > 0 {
                let precision = if pt == 0 { 0.0 } else { pm as f64 / pt as f64 };
                let recall = rm as f64 / rt as f64;
                let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                f_sum += f;
                n_f += 1;
            }
        }
        EvalReport {
            per_class_iou,
            present,
            miou: if n_present == 0 { 0.0 } else { iou_sum / n_present as f64 },
            pixel_acc: if self.pixels == 0 { 0.0 } else { self.correct as f64 / self.pixels as f64 },
            boundary_f: if n_f == 0 { 0.0 } else { f_sum / n_f as f64 },
            images: self.images,
        }
    }
}

/// Metrics of label maps `pred` against `truth`, both `count x H x W`.
pub fn evaluate_predictions(pred: &[u32], truth: &[u32], classes: usize, h: usize, w: usize) -> Result<EvalReport> {
    if pred.len() != truth.len() || pred.len() % (h * w) != 0 {
        return Err(Error::shape(&[truth.len()], &[pred.len()]));
    }
    let mut acc = MetricAccumulator::new(classes);
    for (p, t) in pred.chunks_exact(h * w).zip(truth.chunks_exact(h * w)) {
        acc.add(p, t, h, w)?;
    }
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = vec![0, 0, 1, 1, 0, 2, 2, 1, 0];
        let r = evaluate_predictions(&t, &t, 3, 3, 3).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixel_acc, 1.0);
        assert_eq!(r.boundary_f, 1.0);
    }

    #[test]
    fn crafted_iou_one_half() {
        // class 1: TP = 2, FP = 1, FN = 1
        let truth = vec![1, 1, 1, 0];
        let pred = vec![1, 1, 0, 1];
        let r = evaluate_predictions(&pred, &truth, 2, 2, 2).unwrap();
        assert_eq!(r.per_class_iou[1], 0.5);
    }

    #[test]
    fn all_background_prediction() {
        let truth = vec![0, 0, 0, 0, 1, 1, 0, 2, 2];
        let pred = vec![0; 9];
        let r = evaluate_predictions(&pred, &truth, 3, 3, 3).unwrap();
        assert!(r.per_class_iou[0] < 1.0);
        assert_eq!(r.per_class_iou[1], 0.0);
        assert_eq!(r.per_class_iou[2], 0.0);
        assert_eq!(r.miou, r.per_class_iou[0] / 3.0);
    }

    #[test]
    fn absent_classes_do_not_enter_the_mean() {
        let truth = vec![0, 0, 1, 1];
        let r = evaluate_predictions(&truth, &truth, 4, 2, 2).unwrap();
        assert_eq!(r.present, vec![true, true, false, false]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn order_invariant() {
        let a = vec![0, 1, 1, 0, 2, 2, 0, 0, 1];
        let b = vec![1, 1, 0, 0, 2, 0, 0, 2, 1];
        let pa = vec![0, 1, 0, 0, 2, 2, 0, 1, 1];
        let pb = vec![1, 1, 0, 0, 0, 0, 0, 2, 1];
        let ab = evaluate_predictions(&[pa.clone(), pb.clone()].concat(), &[a.clone(), b.clone()].concat(), 3, 3, 3).unwrap();
        let ba = evaluate_predictions(&[pb, pa].concat(), &[b, a].concat(), 3, 3, 3).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn boundary_tolerance_is_two_pixels() {
        let (h, w) = (1, 9);
        let mut from = vec![false; w];
        from[2] = true;
        let mut to = vec![false; w];
        to[4] = true;
        assert_eq!(matched(&from, &to, h, w), (1, 1));
        to[4] = false;
        to[5] = true;
        assert_eq!(matched(&from, &to, h, w), (0, 1));
    }

    #[test]
    fn shifted_edge_scores_below_one() {
        let (h, w) = (8, 8);
        let truth: Vec<u32> = (0..h * w).map(|i| u32::from(i % w >= 4)).collect();
        let near: Vec<u32> = (0..h * w).map(|i| u32::from(i % w >= 5)).collect();
        let far: Vec<u32> = (0..h * w).map(|i| u32::from(i % w >= 7)).collect();
        let fn_near = evaluate_predictions(&near, &truth, 2, h, w).unwrap().boundary_f;
        let fn_far = evaluate_predictions(&far, &truth, 2, h, w).unwrap().boundary_f;
        assert_eq!(fn_near, 1.0);
        assert!(fn_far < 0.5, "{fn_far}");
    }

    #[test]
    fn argmax_ties_go_to_lower_class() {
        // pixel 0: classes 0 and 1 tie; pixel 1: class 1 wins
        let logits = vec![0.0, 1.0, 0.0, 1.5, -1.0, -1.0];
        assert_eq!(argmax_classes(&logits, 3, 2), vec![0, 1]);
    }
}
