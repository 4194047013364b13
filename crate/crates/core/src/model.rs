//! Full detector: dual-branch backbone, per-level gated fusion into the
//! detection head, and the decoupling/contrastive branch hanging off the
//! scale-fused per-modality maps.
//!
//! The training objective is
//! `l_cls + l_box + l_conf + lambda1 * l_ortho + lambda2 * l_triplet`,
//! with the detection terms averaged over the batch and the embedding terms
//! summed over it. Ablation switches prune whole branches: fixed 0.5/0.5
//! fusion, no decoupler (which also removes both embedding losses), or no
//! triplet term.

use crate::config::Config;
use crate::contrastive::{build_triplets, triplet_loss};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::head::{nms, Detection, DetectionHead};
use crate::irfdm::{embed, ortho_loss, EmbeddingSet, FeatureDecoupler};
use crate::msfpm::SpectralFusion;
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_msfpm: bool,
    pub no_irfdm: bool,
    pub no_cl: bool,
}

pub struct Model {
    pub extractor: Extractor,
    pub fusion: SpectralFusion,
    pub decoupler: FeatureDecoupler,
    pub head: DetectionHead,
    pub cfg: Config,
}

/// One sample's forward products.
pub struct SampleForward {
    pub preds: [NodeId; 3],
    /// `[w_rgb, w_ir]` gate node per pyramid level.
    pub gates: [NodeId; 3],
    pub embeddings: Option<EmbeddingSet>,
}

/// Scalar loss snapshot for logging. Component values are pre-weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub cls: f32,
    pub box_: f32,
    pub conf: f32,
    pub triplet: f32,
    pub ortho: f32,
    pub joint: f32,
}

#[derive(Debug)]
pub struct BatchLoss {
    pub joint: NodeId,
    pub values: LossValues,
}

impl Model {
    /// Registers every parameter in a fixed order (backbone, scale fusion,
    /// spectral gates, decoupler, head) so checkpoints and seeding are
    /// reproducible.
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Model> {
        cfg.validate()?;
        let extractor = Extractor::new(store, cfg);
        let fusion = SpectralFusion::new(store, cfg)?;
        let decoupler = FeatureDecoupler::new(store, cfg.widths[0]);
        let head_in = [fusion.out_ch(0), fusion.out_ch(1), fusion.out_ch(2)];
        let head = DetectionHead::new(store, cfg, head_in);
        Ok(Model { extractor, fusion, decoupler, head, cfg: cfg.clone() })
    }

    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        ab: Ablation,
    ) -> Result<SampleForward> {
        let vis = tape.constant(&sample.visible.shape, &sample.visible.data);
        let ir = tape.constant(&sample.infrared.shape, &sample.infrared.data);
        let pv = self.extractor.visible.forward(tape, store, vis)?;
        let pi = self.extractor.infrared.forward(tape, store, ir)?;

        let gated = !ab.no_msfpm;
        let mut maps = [pv[0]; 3];
        let mut gates = [pv[0]; 3];
        for l in 0..3 {
            let (m, w) = self.fusion.forward(tape, store, l, pv[l], pi[l], gated)?;
            maps[l] = m;
            gates[l] = w;
        }
        let preds = self.head.forward(tape, store, &maps)?;

        let embeddings = if ab.no_irfdm {
            None
        } else {
            let sv = self.extractor.fuse_visible.forward(tape, store, &pv)?;
            let si = self.extractor.fuse_infrared.forward(tape, store, &pi)?;
            let (hv, bv) = self.decoupler.decouple_visible(tape, store, sv)?;
            let (hi, bi) = self.decoupler.decouple_infrared(tape, store, si)?;
            Some(EmbeddingSet {
                hv: embed(tape, hv)?,
                bv: embed(tape, bv)?,
                hi: embed(tape, hi)?,
                bi: embed(tape, bi)?,
            })
        };
        Ok(SampleForward { preds, gates, embeddings })
    }

    /// Mean thermal gate weight across the three levels for one forward pass.
    pub fn mean_ir_weight(tape: &Tape, gates: &[NodeId; 3]) -> f32 {
        gates.iter().map(|&g| tape.data(g)[1]).sum::<f32>() / 3.0
    }

    /// Builds the joint training loss for a batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        samples: &[Sample],
        ab: Ablation,
    ) -> Result<BatchLoss> {
        if samples.is_empty() {
            return Err(Error::Usage("training batch is empty".into()));
        }
        let mut cls_sum: Option<NodeId> = None;
        let mut box_sum: Option<NodeId> = None;
        let mut conf_sum: Option<NodeId> = None;
        let mut sets = Vec::new();
        for sample in samples {
            let fwd = self.forward_sample(tape, store, sample, ab)?;
            let (c, b, o) = self.head.component_losses(
                tape,
                &fwd.preds,
                &sample.boxes,
                self.cfg.image_size,
            )?;
            let acc = |tape: &mut Tape, sum: &mut Option<NodeId>, term: NodeId| -> Result<()> {
                *sum = Some(match *sum {
                    None => term,
                    Some(s) => tape.add(s, term)?,
                });
                Ok(())
            };
            acc(tape, &mut cls_sum, c)?;
            acc(tape, &mut box_sum, b)?;
            acc(tape, &mut conf_sum, o)?;
            if let Some(s) = fwd.embeddings {
                sets.push(s);
            }
        }
        let inv_n = 1.0 / samples.len() as f32;
        let cls = tape.scale(cls_sum.unwrap(), inv_n);
        let box_ = tape.scale(box_sum.unwrap(), inv_n);
        let conf = tape.scale(conf_sum.unwrap(), inv_n);

        let ortho = if ab.no_irfdm {
            None
        } else {
            Some(ortho_loss(tape, &sets, self.cfg.lambda)?)
        };
        let triplet = if ab.no_irfdm || ab.no_cl {
            None
        } else {
            let triplets = build_triplets(tape, &sets, self.cfg.anchor_modality);
            Some(triplet_loss(tape, &triplets, self.cfg.margin)?)
        };

        combine_losses(tape, cls, box_, conf, ortho, triplet, self.cfg.lambda1, self.cfg.lambda2)
    }

    /// Full inference for one sample: forward, decode, suppress.
    pub fn detect(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        ab: Ablation,
        conf_threshold: f32,
    ) -> Result<Vec<Detection>> {
        let fwd = self.forward_sample(tape, store, sample, ab)?;
        for (l, &p) in fwd.preds.iter().enumerate() {
            if tape.data(p).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("level {l} prediction map"),
                });
            }
        }
        let dets = self
            .head
            .decode(tape, &fwd.preds, self.cfg.image_size, conf_threshold);
        Ok(nms(dets, self.cfg.nms_iou, self.cfg.max_dets))
    }
}

/// Weighted sum of the loss components — `lambda1` scales the decoupling
/// (orthogonality) constraint, `lambda2` the contrastive triplet term — with
/// finiteness checks that name the offending component.
pub fn combine_losses(
    tape: &mut Tape,
    cls: NodeId,
    box_: NodeId,
    conf: NodeId,
    ortho: Option<NodeId>,
    triplet: Option<NodeId>,
    lambda1: f32,
    lambda2: f32,
) -> Result<BatchLoss> {
    let val = |tape: &Tape, n: NodeId, name: &str| -> Result<f32> {
        let v = tape.data(n)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { component: format!("{name} loss") });
        }
        Ok(v)
    };
    let values = LossValues {
        cls: val(tape, cls, "classification")?,
        box_: val(tape, box_, "box regression")?,
        conf: val(tape, conf, "confidence")?,
        triplet: triplet.map_or(Ok(0.0), |t| val(tape, t, "triplet"))?,
        ortho: ortho.map_or(Ok(0.0), |o| val(tape, o, "orthogonality"))?,
        joint: 0.0,
    };
    let mut joint = tape.add(cls, box_)?;
    joint = tape.add(joint, conf)?;
    if let Some(o) = ortho {
        let scaled = tape.scale(o, lambda1);
        joint = tape.add(joint, scaled)?;
    }
    if let Some(t) = triplet {
        let scaled = tape.scale(t, lambda2);
        joint = tape.add(joint, scaled)?;
    }
    let joint_v = val(tape, joint, "joint")?;
    Ok(BatchLoss { joint, values: LossValues { joint: joint_v, ..values } })
}
