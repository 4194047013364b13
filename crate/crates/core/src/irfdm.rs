//! Illumination-robust feature decoupling.
//!
//! Each modality's fused map is split into a person-related component and a
//! background/illumination component. The visible split is additive — the
//! background part is literally the residual, and a one-ulp value correction
//! guarantees `f_v == f_h + f_b` holds bit-for-bit. The thermal path derives
//! both components from a shared sigmoid-normalized map through two bias-free
//! pointwise heads. Pooled, L2-normalized embeddings of the four components
//! feed the orthogonality and triplet objectives.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{NodeId, PoolMode, Tape};

struct Pointwise {
    w: ParamId,
    b: Option<ParamId>,
}

fn pointwise(store: &mut ParamStore, name: &str, co: usize, ci: usize, bias: bool) -> Pointwise {
    Pointwise {
        w: store.register(&format!("{name}.w"), &[co, ci, 1, 1], Init::Uniform { fan_in: ci }),
        b: bias.then(|| store.register(&format!("{name}.b"), &[co], Init::Zero)),
    }
}

fn apply(
    tape: &mut Tape,
    store: &ParamStore,
    p: &Pointwise,
    x: NodeId,
) -> Result<NodeId> {
    let w = store.bind(tape, p.w);
    let b = p.b.map(|id| store.bind(tape, id));
    tape.conv2d(x, w, b, 1, 0)
}

pub struct FeatureDecoupler {
    ctx_max: Pointwise,
    ctx_avg: Pointwise,
    vis_mlp: [Pointwise; 3],
    ir_mlp: [Pointwise; 3],
    ir_head_h: Pointwise,
    ir_head_b: Pointwise,
}

impl FeatureDecoupler {
    /// `ch`: channel width of the fused per-modality maps (both modalities).
    pub fn new(store: &mut ParamStore, ch: usize) -> FeatureDecoupler {
        FeatureDecoupler {
            ctx_max: pointwise(store, "decouple.vis.ctx_max", ch, ch, true),
            ctx_avg: pointwise(store, "decouple.vis.ctx_avg", ch, ch, true),
            vis_mlp: [
                pointwise(store, "decouple.vis.mlp0", ch, ch, true),
                pointwise(store, "decouple.vis.mlp1", ch, ch, true),
                pointwise(store, "decouple.vis.mlp2", ch, ch, true),
            ],
            ir_mlp: [
                pointwise(store, "decouple.ir.mlp0", ch, ch, true),
                pointwise(store, "decouple.ir.mlp1", ch, ch, true),
                pointwise(store, "decouple.ir.mlp2", ch, ch, true),
            ],
            ir_head_h: pointwise(store, "decouple.ir.head_h", ch, ch, false),
            ir_head_b: pointwise(store, "decouple.ir.head_b", ch, ch, false),
        }
    }

    fn mlp3(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layers: &[Pointwise; 3],
        x: NodeId,
    ) -> Result<NodeId> {
        let h0 = apply(tape, store, &layers[0], x)?;
        let h0 = tape.silu(h0);
        let h1 = apply(tape, store, &layers[1], h0)?;
        let h1 = tape.silu(h1);
        apply(tape, store, &layers[2], h1)
    }

    /// Splits the visible fused map into (person, background) so that
    /// `person + background` reproduces the input exactly, bit for bit.
    pub fn decouple_visible(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_v: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mx = tape.pool2d(f_v, PoolMode::Max, 3, 1, 1)?;
        let av = tape.pool2d(f_v, PoolMode::Avg, 3, 1, 1)?;
        let cm = apply(tape, store, &self.ctx_max, mx)?;
        let ca = apply(tape, store, &self.ctx_avg, av)?;
        let ctx = tape.add(cm, ca)?;
        let h_raw = self.mlp3(tape, store, &self.vis_mlp, ctx)?;

        // Value-domain correction: pick h so that b := v - h satisfies
        // h + b == v exactly in f32. Rounding makes the raw h fail this for
        // some elements; one re-derivation almost always fixes it, and the
        // degenerate fallback (h = v, b = 0) always does. Gradients flow
        // through the correction unchanged.
        let v_data = tape.data(f_v).to_vec();
        let mut h_data = tape.data(h_raw).to_vec();
        for i in 0..h_data.len() {
            let v = v_data[i];
            let mut h = h_data[i];
            let mut ok = false;
            for _ in 0..2 {
                let b = v - h;
                if h + b == v {
                    ok = true;
                    break;
                }
                h = v - b;
            }
            if !ok {
                let b = v - h;
                if h + b != v {
                    h = v;
                }
            }
            h_data[i] = h;
        }
        let f_h = tape.patch(h_raw, h_data)?;
        let f_b = tape.sub(f_v, f_h)?;
        Ok((f_h, f_b))
    }

    /// Splits the thermal fused map into (person, background) components,
    /// both derived from one sigmoid-normalized context map. Spatial size
    /// halves on the way through.
    pub fn decouple_infrared(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_i: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let m = self.mlp3(tape, store, &self.ir_mlp, f_i)?;
        let pooled = tape.pool2d(m, PoolMode::Max, 2, 2, 0)?;
        let f_norm = tape.sigmoid(pooled);
        let f_h = apply(tape, store, &self.ir_head_h, f_norm)?;
        let f_b = apply(tape, store, &self.ir_head_b, f_norm)?;
        Ok((f_h, f_b))
    }
}

/// Pooled unit-norm embedding of a feature map.
pub fn embed(tape: &mut Tape, f: NodeId) -> Result<NodeId> {
    let pooled = tape.global_avg_pool(f)?;
    tape.l2_normalize(pooled)
}

/// Per-sample embedding quadruple: visible person/background, thermal
/// person/background.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSet {
    pub hv: NodeId,
    pub bv: NodeId,
    pub hi: NodeId,
    pub bi: NodeId,
}

/// Sum over samples of squared person/background cosine alignment, with the
/// thermal pair weighted by `lambda`. Zero exactly when every pair is
/// orthogonal; always nonnegative.
pub fn ortho_loss(tape: &mut Tape, sets: &[EmbeddingSet], lambda: f32) -> Result<NodeId> {
    if sets.is_empty() {
        return Err(Error::Usage("orthogonality loss needs at least one sample".into()));
    }
    let mut total: Option<NodeId> = None;
    for s in sets {
        let dv = tape.dot(s.hv, s.bv)?;
        let di = tape.dot(s.hi, s.bi)?;
        let dv2 = tape.square(dv);
        let di2 = tape.square(di);
        let di2w = tape.scale(di2, lambda);
        let term = tape.add(dv2, di2w)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}
