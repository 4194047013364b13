//! Dense anchor-based detection head.
//!
//! Each pyramid level gets a pointwise conv emitting, per anchor, the block
//! `[tx, ty, tw, th, obj, class logits...]`. Boxes decode as
//! `center = (sigmoid(txy) + cell) / grid`, `size = prior * exp(twh)` with
//! the log-size offsets clamped to +-10. Every truth box is owned by exactly
//! one (level, cell, anchor): the anchor whose prior dimensions match it
//! best. Confidence trains against the detached IoU of the currently decoded
//! box for positives and 0 (at half weight) for the negative sea.

use crate::config::Config;
use crate::data::GtBox;
use crate::error::{Error, Result};
use crate::metrics;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{BceEntry, BoxRow, CeRow, NodeId, Tape};

pub const TWH_CLAMP: f32 = 10.0;
const NEGATIVE_WEIGHT: f32 = 0.5;
// almost every anchor slot is empty, so objectness starts pessimistic
const OBJ_BIAS_INIT: f32 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub score: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct Assignment {
    pub level: usize,
    pub anchor: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub class: usize,
    /// Regression targets: sigmoid-domain center offsets in [0,1], then raw
    /// log-size offsets.
    pub t: [f32; 4],
    pub gt: GtBox,
}

pub struct DetectionHead {
    convs: [(ParamId, ParamId); 3],
    anchors: Vec<(f32, f32)>,
    num_classes: usize,
    strides: [usize; 3],
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, cfg: &Config, in_chs: [usize; 3]) -> DetectionHead {
        let a = cfg.anchors.len();
        let out_ch = a * (5 + cfg.num_classes);
        let convs = [0, 1, 2].map(|l| {
            let w = store.register(
                &format!("head.l{l}.w"),
                &[out_ch, in_chs[l], 1, 1],
                Init::Uniform { fan_in: in_chs[l] },
            );
            let b = store.register(&format!("head.l{l}.b"), &[out_ch], Init::Zero);
            let bias = store.tensor_mut(b);
            for slot in 0..a {
                bias.data[slot * (5 + cfg.num_classes) + 4] = OBJ_BIAS_INIT;
            }
            (w, b)
        });
        DetectionHead {
            convs,
            anchors: cfg.anchors.clone(),
            num_classes: cfg.num_classes,
            strides: cfg.strides(),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Prior (w, h) of `anchor` at `level`, normalized to image coordinates.
    fn prior(&self, level: usize, anchor: usize, image_size: usize) -> (f32, f32) {
        let (aw, ah) = self.anchors[anchor];
        let s = self.strides[level] as f32 / image_size as f32;
        (aw * s, ah * s)
    }

    /// Runs the per-level prediction convs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        maps: &[NodeId; 3],
    ) -> Result<[NodeId; 3]> {
        let mut preds = [maps[0]; 3];
        for l in 0..3 {
            let w = store.bind(tape, self.convs[l].0);
            let b = store.bind(tape, self.convs[l].1);
            preds[l] = tape.conv2d(maps[l], w, Some(b), 1, 0)?;
        }
        Ok(preds)
    }

    /// IoU of two boxes as if co-centered: pure dimension match.
    fn dims_iou(gw: f32, gh: f32, aw: f32, ah: f32) -> f32 {
        let inter = gw.min(aw) * gh.min(ah);
        let union = gw * gh + aw * ah - inter;
        inter / union
    }

    /// Assigns each truth box to the (level, anchor) whose prior dimensions
    /// match it best, at the cell containing the box center. Ties go to the
    /// lowest (level, anchor) index; a cell/anchor slot is only assigned
    /// once, first truth box wins.
    pub fn assign_targets(
        &self,
        gts: &[GtBox],
        image_size: usize,
    ) -> Vec<Assignment> {
        let mut used: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut out = Vec::with_capacity(gts.len());
        for gt in gts {
            let mut best: Option<(f32, usize, usize)> = None; // (iou, level, anchor)
            for l in 0..3 {
                for a in 0..self.anchors.len() {
                    let (pw, ph) = self.prior(l, a, image_size);
                    let iou = Self::dims_iou(gt.w, gt.h, pw, ph);
                    if best.map_or(true, |(b, _, _)| iou > b) {
                        best = Some((iou, l, a));
                    }
                }
            }
            let (_, level, anchor) = best.unwrap();
            let g = image_size / self.strides[level];
            let cell_x = ((gt.cx * g as f32) as usize).min(g - 1);
            let cell_y = ((gt.cy * g as f32) as usize).min(g - 1);
            if used.contains(&(level, anchor, cell_y, cell_x)) {
                continue; // slot already owned by an earlier truth box
            }
            used.push((level, anchor, cell_y, cell_x));
            let (pw, ph) = self.prior(level, anchor, image_size);
            let t = [
                gt.cx * g as f32 - cell_x as f32,
                gt.cy * g as f32 - cell_y as f32,
                (gt.w / pw).ln().clamp(-TWH_CLAMP, TWH_CLAMP),
                (gt.h / ph).ln().clamp(-TWH_CLAMP, TWH_CLAMP),
            ];
            out.push(Assignment {
                level,
                anchor,
                cell_y,
                cell_x,
                class: gt.class,
                t,
                gt: *gt,
            });
        }
        out
    }

    /// Decodes one anchor slot from raw prediction values.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_box(
        &self,
        level: usize,
        anchor: usize,
        cell_y: usize,
        cell_x: usize,
        raw: [f32; 4],
        image_size: usize,
    ) -> (f32, f32, f32, f32) {
        let g = (image_size / self.strides[level]) as f32;
        let (pw, ph) = self.prior(level, anchor, image_size);
        let sig = |z: f32| 1.0 / (1.0 + (-z).exp());
        (
            (sig(raw[0]) + cell_x as f32) / g,
            (sig(raw[1]) + cell_y as f32) / g,
            pw * raw[2].clamp(-TWH_CLAMP, TWH_CLAMP).exp(),
            ph * raw[3].clamp(-TWH_CLAMP, TWH_CLAMP).exp(),
        )
    }

    /// Flat index of channel `c` at `(y, x)` in a `[C, g, g]` map.
    fn flat(c: usize, y: usize, x: usize, g: usize) -> u32 {
        (c * g * g + y * g + x) as u32
    }

    /// Builds the three detection loss nodes for one image. Classification
    /// and box losses average over positives (and are zero constants when
    /// the image has none). Confidence keeps separate mass for positives
    /// (1.0) and negatives (0.5) so a couple of true boxes are not drowned
    /// out by hundreds of empty slots; within the negatives, each slot is
    /// weighted by its squared objectness, so a few confident false alarms
    /// carry the whole negative share while quiet slots cost nothing. When
    /// every negative fires equally this reduces to a uniform average.
    pub fn component_losses(
        &self,
        tape: &mut Tape,
        preds: &[NodeId; 3],
        gts: &[GtBox],
        image_size: usize,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let nc = self.num_classes;
        let na = self.anchors.len();
        let block = 5 + nc;
        let assignments = self.assign_targets(gts, image_size);
        for a in &assignments {
            if a.class >= nc {
                return Err(Error::Data(format!(
                    "truth box class {} out of range ({nc} classes)",
                    a.class
                )));
            }
        }
        let n_pos = assignments.len();
        let pos_w = if n_pos > 0 { 1.0 / n_pos as f32 } else { 0.0 };

        let mut ce_rows: Vec<Vec<CeRow>> = vec![Vec::new(); 3];
        let mut box_rows: Vec<Vec<BoxRow>> = vec![Vec::new(); 3];
        // positive slots per level, with their detached-IoU confidence target
        let mut pos_conf: Vec<Vec<BceEntry>> = vec![Vec::new(); 3];
        let mut positive_set: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); 3];

        for asn in &assignments {
            let g = image_size / self.strides[asn.level];
            let base_ch = asn.anchor * block;
            let idx = [0, 1, 2, 3]
                .map(|c| Self::flat(base_ch + c, asn.cell_y, asn.cell_x, g));
            box_rows[asn.level].push(BoxRow { idx, target: asn.t });
            ce_rows[asn.level].push(CeRow {
                base: Self::flat(base_ch + 5, asn.cell_y, asn.cell_x, g),
                stride: (g * g) as u32,
                n: nc as u32,
                class: asn.class as u32,
            });
            // decode the current prediction to get the confidence target
            let data = tape.data(preds[asn.level]);
            let raw = [0, 1, 2, 3].map(|c| data[idx[c] as usize]);
            let (bx, by, bw, bh) =
                self.decode_box(asn.level, asn.anchor, asn.cell_y, asn.cell_x, raw, image_size);
            let iou = metrics::iou(
                bx as f64, by as f64, bw as f64, bh as f64,
                asn.gt.cx as f64, asn.gt.cy as f64, asn.gt.w as f64, asn.gt.h as f64,
            ) as f32;
            pos_conf[asn.level].push(BceEntry {
                idx: Self::flat(base_ch + 4, asn.cell_y, asn.cell_x, g),
                target: iou,
                weight: pos_w,
            });
            positive_set[asn.level].push((asn.anchor, asn.cell_y, asn.cell_x));
        }

        // negatives, ranked by how loudly they currently fire
        let mut neg_entries: Vec<Vec<(u32, f32)>> = vec![Vec::new(); 3];
        let mut sq_sum = 0.0f64;
        for l in 0..3 {
            let g = image_size / self.strides[l];
            let data = tape.data(preds[l]);
            for a in 0..na {
                for y in 0..g {
                    for x in 0..g {
                        if positive_set[l].contains(&(a, y, x)) {
                            continue;
                        }
                        let idx = Self::flat(a * block + 4, y, x, g);
                        let s = 1.0 / (1.0 + (-data[idx as usize]).exp());
                        sq_sum += (s * s) as f64;
                        neg_entries[l].push((idx, s * s));
                    }
                }
            }
        }
        let neg_scale = if sq_sum > 0.0 {
            NEGATIVE_WEIGHT / sq_sum as f32
        } else {
            0.0
        };

        let mut cls_total: Option<NodeId> = None;
        let mut box_total: Option<NodeId> = None;
        let mut conf_total: Option<NodeId> = None;
        let add_to = |tape: &mut Tape, acc: &mut Option<NodeId>, term: NodeId| -> Result<()> {
            *acc = Some(match *acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
            Ok(())
        };

        for l in 0..3 {
            if !ce_rows[l].is_empty() {
                let ce = tape.map_cross_entropy(preds[l], ce_rows[l].clone(), n_pos as f32)?;
                add_to(tape, &mut cls_total, ce)?;
                let br = tape.box_regression(preds[l], box_rows[l].clone(), n_pos as f32)?;
                add_to(tape, &mut box_total, br)?;
            }
            // confidence: positives at their detached IoU, everything else 0
            let mut entries = pos_conf[l].clone();
            entries.extend(neg_entries[l].iter().map(|&(idx, s2)| BceEntry {
                idx,
                target: 0.0,
                weight: s2 * neg_scale,
            }));
            let conf = tape.masked_bce(preds[l], entries, 1.0)?;
            add_to(tape, &mut conf_total, conf)?;
        }

        let zero = tape.scalar(0.0);
        Ok((
            cls_total.unwrap_or(zero),
            box_total.unwrap_or(zero),
            conf_total.expect("confidence loss always has entries"),
        ))
    }

    /// Decodes every anchor slot above the score threshold. Score is
    /// objectness times the best class probability.
    pub fn decode(
        &self,
        tape: &Tape,
        preds: &[NodeId; 3],
        image_size: usize,
        conf_threshold: f32,
    ) -> Vec<Detection> {
        let nc = self.num_classes;
        let na = self.anchors.len();
        let block = 5 + nc;
        let sig = |z: f32| 1.0 / (1.0 + (-z).exp());
        let mut out = Vec::new();
        for l in 0..3 {
            let g = image_size / self.strides[l];
            let data = tape.data(preds[l]);
            for a in 0..na {
                for y in 0..g {
                    for x in 0..g {
                        let ch = |c: usize| data[Self::flat(a * block + c, y, x, g) as usize];
                        let obj = sig(ch(4));
                        // softmax over class logits
                        let mut m = f32::NEG_INFINITY;
                        for k in 0..nc {
                            m = m.max(ch(5 + k));
                        }
                        let mut z = 0.0;
                        for k in 0..nc {
                            z += (ch(5 + k) - m).exp();
                        }
                        let (mut best_k, mut best_p) = (0usize, 0.0f32);
                        for k in 0..nc {
                            let p = (ch(5 + k) - m).exp() / z;
                            if p > best_p {
                                best_p = p;
                                best_k = k;
                            }
                        }
                        let score = obj * best_p;
                        if score < conf_threshold {
                            continue;
                        }
                        let raw = [ch(0), ch(1), ch(2), ch(3)];
                        let (cx, cy, w, h) = self.decode_box(l, a, y, x, raw, image_size);
                        out.push(Detection { class: best_k, cx, cy, w, h, score });
                    }
                }
            }
        }
        out
    }
}

/// Greedy class-wise non-maximum suppression: keep in descending score order
/// (ties by input position), drop any same-class box overlapping a kept one
/// above `iou_t`. At most `max_dets` survivors.
pub fn nms(mut dets: Vec<Detection>, iou_t: f32, max_dets: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept.len() >= max_dets {
            break;
        }
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.class == d.class
                && metrics::iou(
                    k.cx as f64, k.cy as f64, k.w as f64, k.h as f64,
                    d.cx as f64, d.cy as f64, d.w as f64, d.h as f64,
                ) as f32
                    > iou_t
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    dets.clear();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(nc: usize) -> (ParamStore, DetectionHead) {
        let mut store = ParamStore::new(13);
        let mut cfg = Config::default();
        cfg.num_classes = nc;
        let h = DetectionHead::new(&mut store, &cfg, [8, 16, 16]);
        (store, h)
    }

    #[test]
    fn decode_doubles_and_halves_prior_dimensions() {
        let (_s, h) = head(1);
        // anchor 1 at level 1 has prior (2, 4) cells * stride 16 / 64 px
        let (cx, cy, w, hh) = h.decode_box(
            1,
            1,
            0,
            0,
            [0.0, 0.0, std::f32::consts::LN_2, -std::f32::consts::LN_2],
            64,
        );
        let prior_w = 2.0 * 16.0 / 64.0;
        let prior_h = 4.0 * 16.0 / 64.0;
        assert!((w - prior_w * 2.0).abs() < 1e-6, "w {w}");
        assert!((hh - prior_h / 2.0).abs() < 1e-6, "h {hh}");
        // sigmoid(0) = 0.5 into a 4-cell grid
        assert!((cx - 0.125).abs() < 1e-6);
        assert!((cy - 0.125).abs() < 1e-6);
    }

    #[test]
    fn decoded_center_stays_inside_its_cell() {
        let (_s, h) = head(1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let l = rng.gen_range(0..3usize);
            let a = rng.gen_range(0..3usize);
            let g = 64 / h.strides[l];
            let y = rng.gen_range(0..g);
            let x = rng.gen_range(0..g);
            let raw = [
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
            ];
            let (cx, cy, w, hh) = h.decode_box(l, a, y, x, raw, 64);
            // saturated logits round onto the cell edge in f32, so closed bounds
            let cell = 1.0 / g as f32;
            assert!(cx >= x as f32 * cell && cx <= (x + 1) as f32 * cell);
            assert!(cy >= y as f32 * cell && cy <= (y + 1) as f32 * cell);
            assert!(w > 0.0 && hh > 0.0 && w.is_finite() && hh.is_finite());
        }
    }

    #[test]
    fn target_encoding_round_trips_through_decode() {
        let (_s, h) = head(1);
        let gt = GtBox { class: 0, cx: 0.53, cy: 0.41, w: 0.25, h: 0.5 };
        let asn = &h.assign_targets(&[gt], 64)[0];
        let logit = |p: f32| (p / (1.0 - p)).ln();
        let raw = [logit(asn.t[0]), logit(asn.t[1]), asn.t[2], asn.t[3]];
        let (cx, cy, w, hh) =
            h.decode_box(asn.level, asn.anchor, asn.cell_y, asn.cell_x, raw, 64);
        assert!((cx - gt.cx).abs() < 1e-5, "cx {cx}");
        assert!((cy - gt.cy).abs() < 1e-5, "cy {cy}");
        assert!((w - gt.w).abs() < 1e-5, "w {w}");
        assert!((hh - gt.h).abs() < 1e-5, "h {hh}");
    }

    #[test]
    fn assignment_matches_brute_force_dimension_iou() {
        let (_s, h) = head(1);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let w = rng.gen_range(0.05f32..0.6);
            let gt = GtBox {
                class: 0,
                cx: rng.gen_range(0.3..0.7),
                cy: rng.gen_range(0.3..0.7),
                w,
                h: (w * rng.gen_range(1.5..2.5)).min(0.9),
            };
            let asn = &h.assign_targets(&[gt], 64)[0];
            // brute force over all (level, anchor) pairs
            let mut best = (f32::NEG_INFINITY, 0usize, 0usize);
            for l in 0..3 {
                for a in 0..3 {
                    let (pw, ph) = h.prior(l, a, 64);
                    let iou = DetectionHead::dims_iou(gt.w, gt.h, pw, ph);
                    if iou > best.0 {
                        best = (iou, l, a);
                    }
                }
            }
            assert_eq!((asn.level, asn.anchor), (best.1, best.2));
        }
    }

    #[test]
    fn perfect_predictions_make_all_losses_vanish() {
        let (_s, h) = head(2);
        let gt = GtBox { class: 1, cx: 0.53, cy: 0.41, w: 0.25, h: 0.5 };
        let asn = h.assign_targets(&[gt], 64)[0];
        let mut tape = Tape::new();
        let block = 7;
        let mut preds = [tape.scalar(0.0); 3];
        let logit = |p: f32| (p / (1.0 - p)).ln();
        for l in 0..3 {
            let g = 64 / h.strides[l];
            let mut data = vec![0.0f32; 3 * block * g * g];
            // all objectness strongly negative
            for a in 0..3 {
                for i in 0..g * g {
                    data[(a * block + 4) * g * g + i] = -25.0;
                }
            }
            if l == asn.level {
                let at = |c: usize| (asn.anchor * block + c) * g * g + asn.cell_y * g + asn.cell_x;
                data[at(0)] = logit(asn.t[0]);
                data[at(1)] = logit(asn.t[1]);
                data[at(2)] = asn.t[2];
                data[at(3)] = asn.t[3];
                data[at(4)] = 25.0; // decoded box matches: IoU target = 1
                data[at(5)] = -25.0;
                data[at(6)] = 25.0; // class 1
            }
            preds[l] = tape.constant(&[3 * block, g, g], &data);
        }
        let (cls, bx, conf) = h.component_losses(&mut tape, &preds, &[gt], 64).unwrap();
        assert!(tape.data(cls)[0].abs() < 1e-6, "cls {}", tape.data(cls)[0]);
        assert!(tape.data(bx)[0].abs() < 1e-6, "box {}", tape.data(bx)[0]);
        assert!(tape.data(conf)[0].abs() < 1e-6, "conf {}", tape.data(conf)[0]);
    }

    #[test]
    fn uniform_class_logits_cost_ln2_per_positive() {
        let (_s, h) = head(2);
        let gt = GtBox { class: 0, cx: 0.5, cy: 0.5, w: 0.25, h: 0.5 };
        let mut tape = Tape::new();
        let block = 7;
        let mut preds = [tape.scalar(0.0); 3];
        for l in 0..3 {
            let g = 64 / h.strides[l];
            let data = vec![0.0f32; 3 * block * g * g];
            preds[l] = tape.constant(&[3 * block, g, g], &data);
        }
        let (cls, _bx, _conf) = h.component_losses(&mut tape, &preds, &[gt], 64).unwrap();
        let v = tape.data(cls)[0];
        assert!(
            (v - std::f32::consts::LN_2).abs() < 1e-6,
            "expected ln 2, got {v}"
        );
    }

    #[test]
    fn no_positives_still_trains_confidence() {
        let (_s, h) = head(1);
        let mut tape = Tape::new();
        let block = 6;
        let mut preds = [tape.scalar(0.0); 3];
        for l in 0..3 {
            let g = 64 / h.strides[l];
            preds[l] = tape.constant(&[3 * block, g, g], &vec![0.0; 3 * block * g * g]);
        }
        let (cls, bx, conf) = h.component_losses(&mut tape, &preds, &[], 64).unwrap();
        assert_eq!(tape.data(cls)[0], 0.0);
        assert_eq!(tape.data(bx)[0], 0.0);
        // every slot is a 0-target BCE on logit 0 at half weight: ln 2 / 2
        let v = tape.data(conf)[0];
        assert!((v - 0.5 * std::f32::consts::LN_2).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn nms_survivors_are_a_subset_with_bounded_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..30)
                .map(|_| Detection {
                    class: rng.gen_range(0..2),
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    w: rng.gen_range(0.05..0.3),
                    h: rng.gen_range(0.05..0.3),
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let kept = nms(dets.clone(), 0.5, 10);
            assert!(kept.len() <= 10);
            for k in &kept {
                assert!(dets.contains(k), "nms invented a box");
            }
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].class == kept[j].class {
                        let ov = metrics::iou(
                            kept[i].cx as f64, kept[i].cy as f64, kept[i].w as f64, kept[i].h as f64,
                            kept[j].cx as f64, kept[j].cy as f64, kept[j].w as f64, kept[j].h as f64,
                        );
                        assert!(ov <= 0.5 + 1e-9, "survivors overlap at {ov}");
                    }
                }
            }
            // scores descend
            for w in kept.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn nms_matches_a_reference_greedy_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| Detection {
                    class: 0,
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    w: rng.gen_range(0.05..0.3),
                    h: rng.gen_range(0.05..0.3),
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let got = nms(dets.clone(), 0.45, 100);
            // independent reference: sort, then keep-if-clear
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
            let mut want: Vec<Detection> = Vec::new();
            'outer: for &i in &order {
                for k in &want {
                    let ov = metrics::iou(
                        k.cx as f64, k.cy as f64, k.w as f64, k.h as f64,
                        dets[i].cx as f64, dets[i].cy as f64, dets[i].w as f64, dets[i].h as f64,
                    ) as f32;
                    if ov > 0.45 {
                        continue 'outer;
                    }
                }
                want.push(dets[i]);
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn decode_thresholds_on_score() {
        let (_s, h) = head(1);
        let mut tape = Tape::new();
        let block = 6;
        let mut preds = [tape.scalar(0.0); 3];
        for l in 0..3 {
            let g = 64 / h.strides[l];
            let mut data = vec![0.0f32; 3 * block * g * g];
            for a in 0..3 {
                for i in 0..g * g {
                    data[(a * block + 4) * g * g + i] = -20.0;
                }
            }
            if l == 0 {
                // one confident slot
                data[4 * g * g + 2 * g + 3] = 20.0;
            }
            preds[l] = tape.constant(&[3 * block, g, g], &data);
        }
        let dets = h.decode(&tape, &preds, 64, 0.5);
        assert_eq!(dets.len(), 1);
        assert!(dets[0].score > 0.99);
        // the confident slot sits at cell (2, 3) of the stride-8 grid
        assert!((dets[0].cx - (0.5 + 3.0) / 8.0).abs() < 1e-6);
        assert!((dets[0].cy - (0.5 + 2.0) / 8.0).abs() < 1e-6);
    }
}
