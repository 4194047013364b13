//! Per-modality convolutional backbone and learned cross-scale fusion.
//!
//! Each modality (RGB visible, single-channel thermal) gets its own branch:
//! a two-conv stem that reaches 1/4 resolution cheaply, then three
//! downsampling stages producing a pyramid at strides 8, 16, and 32. The
//! scale fuser projects all three levels to a common width, upsamples them
//! onto the finest grid, and blends them with softmax-normalized level
//! weights.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};

const STEM_CH: [usize; 2] = [8, 16];

struct ConvParams {
    w: ParamId,
    b: ParamId,
}

fn conv_params(
    store: &mut ParamStore,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> ConvParams {
    ConvParams {
        w: store.register(
            &format!("{name}.w"),
            &[co, ci, k, k],
            Init::Uniform { fan_in: ci * k * k },
        ),
        b: store.register(&format!("{name}.b"), &[co], Init::Zero),
    }
}

struct Stage {
    down: ConvParams,
    keep: ConvParams,
}

/// One modality's backbone.
pub struct Branch {
    in_ch: usize,
    stem: [ConvParams; 2],
    stages: [Stage; 3],
}

impl Branch {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, widths: [usize; 3]) -> Branch {
        let stem = [
            conv_params(store, &format!("{prefix}.stem0"), STEM_CH[0], in_ch, 3),
            conv_params(store, &format!("{prefix}.stem1"), STEM_CH[1], STEM_CH[0], 3),
        ];
        let mut prev = STEM_CH[1];
        let stages = [0, 1, 2].map(|l| {
            let s = Stage {
                down: conv_params(store, &format!("{prefix}.stage{l}.down"), widths[l], prev, 3),
                keep: conv_params(store, &format!("{prefix}.stage{l}.keep"), widths[l], widths[l], 3),
            };
            prev = widths[l];
            s
        });
        Branch { in_ch, stem, stages }
    }

    /// Runs the backbone, returning the three pyramid maps, finest first
    /// (strides 8, 16, 32 relative to the input).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<[NodeId; 3]> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.in_ch {
            return Err(Error::shape(
                &shape,
                &[self.in_ch, 0, 0],
                "backbone input must be [channels, size, size]",
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        if h != w || h == 0 || h % 32 != 0 {
            return Err(Error::Usage(format!(
                "input image {h}x{w} unsupported: pad or resize to a square multiple of 32"
            )));
        }
        let mut cur = x;
        for s in &self.stem {
            let wn = store.bind(tape, s.w);
            let bn = store.bind(tape, s.b);
            let c = tape.conv2d(cur, wn, Some(bn), 2, 1)?;
            cur = tape.silu(c);
        }
        let mut maps = [cur; 3];
        for (l, stage) in self.stages.iter().enumerate() {
            let dw = store.bind(tape, stage.down.w);
            let db = store.bind(tape, stage.down.b);
            let d = tape.conv2d(cur, dw, Some(db), 2, 1)?;
            let d = tape.silu(d);
            let kw = store.bind(tape, stage.keep.w);
            let kb = store.bind(tape, stage.keep.b);
            let k = tape.conv2d(d, kw, Some(kb), 1, 1)?;
            cur = tape.silu(k);
            maps[l] = cur;
        }
        Ok(maps)
    }
}

/// Learned blend of the three pyramid levels onto the finest grid.
pub struct ScaleFusion {
    projs: [ParamId; 3],
    logits: ParamId,
    out_ch: usize,
}

impl ScaleFusion {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: [usize; 3],
        out_ch: usize,
    ) -> ScaleFusion {
        let projs = [0, 1, 2].map(|l| {
            store.register(
                &format!("{prefix}.proj{l}.w"),
                &[out_ch, widths[l], 1, 1],
                Init::Uniform { fan_in: widths[l] },
            )
        });
        // zero logits start the blend at an even 1/3 per level
        let logits = store.register(&format!("{prefix}.level_logits"), &[3], Init::Zero);
        ScaleFusion { projs, logits, out_ch }
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    /// Projects each level to `out_ch`, upsamples to the finest grid, and
    /// sums with softmax level weights. Output shape matches the finest map.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        maps: &[NodeId; 3],
    ) -> Result<NodeId> {
        let logits = store.bind(tape, self.logits);
        let weights = tape.softmax(logits)?;
        let mut fused: Option<NodeId> = None;
        for l in 0..3 {
            let wn = store.bind(tape, self.projs[l]);
            let p = tape.conv2d(maps[l], wn, None, 1, 0)?;
            let up = if l == 0 { p } else { tape.upsample_nearest(p, 1 << l)? };
            let wl = tape.index(weights, l)?;
            let term = tape.scale_by(up, wl)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(fused.unwrap())
    }
}

/// Convenience bundle: both branches plus per-modality scale fusion.
pub struct Extractor {
    pub visible: Branch,
    pub infrared: Branch,
    pub fuse_visible: ScaleFusion,
    pub fuse_infrared: ScaleFusion,
}

impl Extractor {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Extractor {
        let w = cfg.widths;
        Extractor {
            visible: Branch::new(store, "backbone.vis", 3, w),
            infrared: Branch::new(store, "backbone.ir", 1, w),
            fuse_visible: ScaleFusion::new(store, "scale_fuse.vis", w, w[0]),
            fuse_infrared: ScaleFusion::new(store, "scale_fuse.ir", w, w[0]),
        }
    }
}
