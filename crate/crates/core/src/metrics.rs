//! Detection quality metrics, computed in f64.
//!
//! Matching is greedy in score order with one-to-one assignment (each truth
//! box may be claimed once, by the detection that overlaps it most). Average
//! precision uses 101-point interpolation; the summary score averages AP over
//! classes at IoU 0.5 and, for the stricter variant, over IoU thresholds
//! 0.50:0.05:0.95.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<crate::data::GtBox> for TruthBox {
    fn from(b: crate::data::GtBox) -> Self {
        TruthBox {
            class: b.class,
            cx: b.cx as f64,
            cy: b.cy as f64,
            w: b.w as f64,
            h: b.h as f64,
        }
    }
}

/// One image's detections and ground truth, keyed by a stable id so results
/// cannot depend on iteration order.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub dets: Vec<DetBox>,
    pub gts: Vec<TruthBox>,
}

pub fn iou(
    acx: f64, acy: f64, aw: f64, ah: f64,
    bcx: f64, bcy: f64, bw: f64, bh: f64,
) -> f64 {
    let iw = ((acx + aw / 2.0).min(bcx + bw / 2.0) - (acx - aw / 2.0).max(bcx - bw / 2.0)).max(0.0);
    let ih = ((acy + ah / 2.0).min(bcy + bh / 2.0) - (acy - ah / 2.0).max(bcy - bh / 2.0)).max(0.0);
    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        // rounding can push the ratio a couple of ulps past 1 for identical
        // boxes; the true value never exceeds 1
        (inter / union).min(1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub map50: f64,
    /// AP averaged over IoU 0.50:0.05:0.95 as well as classes.
    pub map_coco: f64,
    /// (class, AP at IoU 0.5) for every class with ground truth.
    pub ap50_per_class: Vec<(usize, f64)>,
    /// Raw PR curve at IoU 0.5 for class 0.
    pub pr50: Vec<PrPoint>,
}

/// Canonical ordering: items by id, detections by descending score with a
/// geometric tie-break. Input order then cannot influence any number.
fn canonicalize(items: &[EvalItem]) -> Vec<EvalItem> {
    let mut sorted: Vec<EvalItem> = items.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for item in &mut sorted {
        item.dets.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.cx.partial_cmp(&b.cx).unwrap())
                .then(a.cy.partial_cmp(&b.cy).unwrap())
                .then(a.w.partial_cmp(&b.w).unwrap())
                .then(a.h.partial_cmp(&b.h).unwrap())
                .then(a.class.cmp(&b.class))
        });
    }
    sorted
}

/// Score-ranked true/false positive flags for one class at one IoU threshold.
fn match_class(items: &[EvalItem], class: usize, iou_t: f64) -> (Vec<(f64, bool)>, usize) {
    let n_gt: usize = items
        .iter()
        .map(|it| it.gts.iter().filter(|g| g.class == class).count())
        .sum();
    // (score, image index, det) pool across all images
    let mut pool: Vec<(f64, usize, &DetBox)> = Vec::new();
    for (ii, item) in items.iter().enumerate() {
        for d in item.dets.iter().filter(|d| d.class == class) {
            pool.push((d.score, ii, d));
        }
    }
    // canonical det order within an image is already score-sorted; across
    // images, ties resolve by image rank
    pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut claimed: Vec<Vec<bool>> = items.iter().map(|it| vec![false; it.gts.len()]).collect();
    let mut flags = Vec::with_capacity(pool.len());
    for (score, ii, d) in pool {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in items[ii].gts.iter().enumerate() {
            if g.class != class || claimed[ii][gi] {
                continue;
            }
            let ov = iou(d.cx, d.cy, d.w, d.h, g.cx, g.cy, g.w, g.h);
            if ov >= iou_t && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                claimed[ii][gi] = true;
                flags.push((score, true));
            }
            None => flags.push((score, false)),
        }
    }
    (flags, n_gt)
}

/// 101-point interpolated AP from ranked hit flags. None when the class has
/// no ground truth (it then contributes nothing to the mean).
fn ap_from_flags(flags: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (rank, (_, hit)) in flags.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = pr
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

pub fn average_precision(items: &[EvalItem], class: usize, iou_t: f64) -> Option<f64> {
    let canon = canonicalize(items);
    let (flags, n_gt) = match_class(&canon, class, iou_t);
    ap_from_flags(&flags, n_gt)
}

fn classes_with_gt(items: &[EvalItem]) -> Vec<usize> {
    let mut seen: HashMap<usize, ()> = HashMap::new();
    for it in items {
        for g in &it.gts {
            seen.insert(g.class, ());
        }
    }
    let mut classes: Vec<usize> = seen.into_keys().collect();
    classes.sort();
    classes
}

pub fn evaluate(items: &[EvalItem]) -> Evaluation {
    let canon = canonicalize(items);
    let classes = classes_with_gt(&canon);
    let mut ap50_per_class = Vec::new();
    for &c in &classes {
        let (flags, n_gt) = match_class(&canon, c, 0.5);
        if let Some(ap) = ap_from_flags(&flags, n_gt) {
            ap50_per_class.push((c, ap));
        }
    }
    let map50 = if ap50_per_class.is_empty() {
        0.0
    } else {
        ap50_per_class.iter().map(|(_, ap)| ap).sum::<f64>() / ap50_per_class.len() as f64
    };

    let mut sweep_sum = 0.0;
    let mut sweep_n = 0usize;
    for step in 0..10u32 {
        let t = (50 + 5 * step) as f64 / 100.0;
        let mut class_aps = Vec::new();
        for &c in &classes {
            let (flags, n_gt) = match_class(&canon, c, t);
            if let Some(ap) = ap_from_flags(&flags, n_gt) {
                class_aps.push(ap);
            }
        }
        if !class_aps.is_empty() {
            sweep_sum += class_aps.iter().sum::<f64>() / class_aps.len() as f64;
            sweep_n += 1;
        }
    }
    let map_coco = if sweep_n == 0 { 0.0 } else { sweep_sum / sweep_n as f64 };

    // PR curve for class 0 at IoU 0.5
    let (flags, n_gt) = match_class(&canon, 0, 0.5);
    let mut pr50 = Vec::new();
    if n_gt > 0 {
        let mut tp = 0usize;
        for (rank, (score, hit)) in flags.iter().enumerate() {
            if *hit {
                tp += 1;
            }
            pr50.push(PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (rank + 1) as f64,
                score: *score,
            });
        }
    }

    Evaluation {
        map50,
        map_coco,
        ap50_per_class,
        pr50,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, cx: f64, cy: f64, w: f64, h: f64, score: f64) -> DetBox {
        DetBox { class, cx, cy, w, h, score }
    }

    fn gt(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> TruthBox {
        TruthBox { class, cx, cy, w, h }
    }

    fn item(id: &str, dets: Vec<DetBox>, gts: Vec<TruthBox>) -> EvalItem {
        EvalItem { id: id.into(), dets, gts }
    }

    #[test]
    fn iou_overlap_third() {
        // 2x2 squares offset by 1 in x: overlap 2, union 6
        let v = iou(1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 2.0, 2.0);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn iou_disjoint_and_identical() {
        assert_eq!(iou(0.0, 0.0, 1.0, 1.0, 5.0, 5.0, 1.0, 1.0), 0.0);
        assert_eq!(iou(0.3, 0.4, 0.2, 0.5, 0.3, 0.4, 0.2, 0.5), 1.0);
    }

    #[test]
    fn perfect_single_detection_gives_ap_one() {
        let items = [item(
            "a",
            vec![det(0, 0.5, 0.5, 0.2, 0.4, 0.9)],
            vec![gt(0, 0.5, 0.5, 0.2, 0.4)],
        )];
        assert!((average_precision(&items, 0, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn high_scoring_miss_then_hit_gives_exactly_half() {
        // FP outranks the TP: precision is 0.5 at every achieved recall
        let items = [item(
            "a",
            vec![
                det(0, 0.9, 0.9, 0.05, 0.05, 0.95),
                det(0, 0.5, 0.5, 0.2, 0.4, 0.60),
            ],
            vec![gt(0, 0.5, 0.5, 0.2, 0.4)],
        )];
        let ap = average_precision(&items, 0, 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12, "got {ap}");
    }

    #[test]
    fn half_recall_gives_51_of_101() {
        // 2 truths, 1 perfect detection: precision 1 up to recall 0.5
        let items = [item(
            "a",
            vec![det(0, 0.25, 0.25, 0.1, 0.2, 0.9)],
            vec![gt(0, 0.25, 0.25, 0.1, 0.2), gt(0, 0.75, 0.75, 0.1, 0.2)],
        )];
        let ap = average_precision(&items, 0, 0.5).unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-12, "got {ap}");
    }

    #[test]
    fn one_truth_claimed_once() {
        // both detections overlap the same truth; the second must be a FP
        let items = [item(
            "a",
            vec![
                det(0, 0.5, 0.5, 0.2, 0.4, 0.9),
                det(0, 0.5, 0.5, 0.21, 0.41, 0.8),
            ],
            vec![gt(0, 0.5, 0.5, 0.2, 0.4)],
        )];
        // curve: (r1,p1)=(1,1), (r2,p2)=(1,0.5): interp keeps 1.0 everywhere
        let ap = average_precision(&items, 0, 0.5).unwrap();
        assert!((ap - 1.0).abs() < 1e-12, "got {ap}");
    }

    #[test]
    fn classes_do_not_cross_match() {
        let items = [item(
            "a",
            vec![det(1, 0.5, 0.5, 0.2, 0.4, 0.9)],
            vec![gt(0, 0.5, 0.5, 0.2, 0.4)],
        )];
        assert_eq!(average_precision(&items, 0, 0.5).unwrap(), 0.0);
        assert!(average_precision(&items, 1, 0.5).is_none());
        let ev = evaluate(&items);
        assert_eq!(ev.map50, 0.0);
    }

    #[test]
    fn evaluation_is_shuffle_invariant() {
        let a = item(
            "a",
            vec![det(0, 0.5, 0.5, 0.2, 0.4, 0.9), det(0, 0.2, 0.2, 0.1, 0.1, 0.7)],
            vec![gt(0, 0.5, 0.5, 0.2, 0.4)],
        );
        let b = item(
            "b",
            vec![det(0, 0.6, 0.6, 0.2, 0.2, 0.8)],
            vec![gt(0, 0.6, 0.6, 0.2, 0.2), gt(0, 0.1, 0.9, 0.1, 0.1)],
        );
        let fwd = evaluate(&[a.clone(), b.clone()]);
        let mut rev_a = a;
        rev_a.dets.reverse();
        let rev = evaluate(&[b, rev_a]);
        assert_eq!(fwd.map50, rev.map50);
        assert_eq!(fwd.map_coco, rev.map_coco);
    }

    #[test]
    fn coco_sweep_counts_thresholds_below_achieved_iou() {
        // unit squares offset so IoU = 0.75/1.25 = 0.6 exactly:
        // hit at t = 0.50, 0.55, 0.60; miss above
        let items = [item(
            "a",
            vec![det(0, 0.75, 0.5, 1.0, 1.0, 0.9)],
            vec![gt(0, 0.5, 0.5, 1.0, 1.0)],
        )];
        let ev = evaluate(&items);
        assert!((ev.map50 - 1.0).abs() < 1e-12);
        assert!((ev.map_coco - 0.3).abs() < 1e-12, "got {}", ev.map_coco);
    }

    #[test]
    fn empty_detections_score_zero() {
        let items = [item("a", vec![], vec![gt(0, 0.5, 0.5, 0.2, 0.4)])];
        let ev = evaluate(&items);
        assert_eq!(ev.map50, 0.0);
        assert!(ev.pr50.is_empty());
    }

    #[test]
    fn pr_curve_tracks_cumulative_counts() {
        let items = [item(
            "a",
            vec![
                det(0, 0.5, 0.5, 0.2, 0.4, 0.9),
                det(0, 0.9, 0.9, 0.05, 0.05, 0.8),
            ],
            vec![gt(0, 0.5, 0.5, 0.2, 0.4), gt(0, 0.2, 0.2, 0.1, 0.1)],
        )];
        let ev = evaluate(&items);
        assert_eq!(ev.pr50.len(), 2);
        assert!((ev.pr50[0].recall - 0.5).abs() < 1e-12);
        assert!((ev.pr50[0].precision - 1.0).abs() < 1e-12);
        assert!((ev.pr50[1].recall - 0.5).abs() < 1e-12);
        assert!((ev.pr50[1].precision - 0.5).abs() < 1e-12);
    }
}
