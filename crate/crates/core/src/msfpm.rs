//! Gated cross-modality fusion, applied independently at each pyramid level.
//!
//! A small MLP looks at globally pooled statistics of both modality maps and
//! emits two softmax weights — a convex blend that decides, per level and per
//! image, how much to trust color versus heat. The pooled statistics are
//! L2-normalized before the MLP so the gate reads the *pattern* of channel
//! activity (which encodes scene illumination) rather than its absolute
//! energy. The blend itself runs on power-normalized maps — otherwise a
//! branch could undo any gating by simply growing its feature magnitudes.
//! The blended map is then channel-reduced 2:1 by a pointwise conv and
//! activated. The final MLP layer is zero-initialized so a fresh gate blends
//! an even 0.5/0.5.
//!
//! Two fusion modes share this machinery: `weighted_sum` blends the maps
//! elementwise, while `concat_reduce` stacks the gate-scaled maps along the
//! channel axis and lets the reduction conv mix them.
//!
//! [`SpectralFusion::set_prior`] installs a spectral-contrast prior into one
//! level's gate: the first two hidden units become a mirrored pair whose
//! difference is exactly `d = mean(rgb stats) - mean(ir stats)` (the silu
//! identity `silu(x) - silu(-x) = x` makes this exact), wired
//! antisymmetrically into the logits so that `logit_ir - logit_rgb =
//! 2 * gain * (d - center)`. With gain and center fitted to a reference batch
//! (see the model-level calibration) the gate opens toward heat on scenes
//! whose pooled contrast says the visible band is uninformative, before any
//! training step. Gradient descent is free to reshape the prior — every
//! remaining hidden unit starts neutral.

use crate::config::{Config, FusionMode};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};

struct LevelGate {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    reduce_w: ParamId,
    reduce_b: ParamId,
}

pub struct SpectralFusion {
    levels: Vec<LevelGate>,
    widths: [usize; 3],
    reduce_ratio: usize,
    mode: FusionMode,
}

impl SpectralFusion {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<SpectralFusion> {
        let r = cfg.reduce_ratio;
        if r == 0 || cfg.widths.iter().any(|w| w % r != 0) {
            return Err(Error::Usage(format!(
                "reduce_ratio {} must divide every level width {:?}",
                r, cfg.widths
            )));
        }
        let hidden = cfg.gate_hidden;
        let levels = (0..3)
            .map(|l| {
                let c = cfg.widths[l];
                // the stacking variant hands the reduce conv both maps at once
                let reduce_in = match cfg.fusion_mode {
                    FusionMode::WeightedSum => c,
                    FusionMode::ConcatReduce => 2 * c,
                };
                let fc1_w = store.register(
                    &format!("fusion.l{l}.fc1.w"),
                    &[hidden, 2 * c],
                    Init::Uniform { fan_in: 2 * c },
                );
                let fc2_w = store.register(&format!("fusion.l{l}.fc2.w"), &[2, hidden], Init::Zero);
                if hidden >= 2 {
                    // mirrored contrast pair: silu(d) - silu(-d) == d, with
                    // d = mean(rgb stats) - mean(ir stats)
                    let t = store.tensor_mut(fc1_w);
                    for j in 0..2 * c {
                        let v = if j < c { 1.0 } else { -1.0 } / c as f32;
                        t.data[j] = v;
                        t.data[2 * c + j] = -v;
                    }
                    // logit_rgb = gain * d, logit_ir = -gain * d: dim scenes
                    // lean on heat, bright scenes lean on color
                    let t = store.tensor_mut(fc2_w);
                    t.data[0] = GATE_PRIOR_GAIN;
                    t.data[1] = -GATE_PRIOR_GAIN;
                    t.data[hidden] = -GATE_PRIOR_GAIN;
                    t.data[hidden + 1] = GATE_PRIOR_GAIN;
                }
                LevelGate {
                    fc1_w,
                    fc1_b: store.register(&format!("fusion.l{l}.fc1.b"), &[hidden], Init::Zero),
                    fc2_w,
                    fc2_b: store.register(&format!("fusion.l{l}.fc2.b"), &[2], Init::Zero),
                    reduce_w: store.register(
                        &format!("fusion.l{l}.reduce.w"),
                        &[c / r, reduce_in, 1, 1],
                        Init::Uniform { fan_in: reduce_in },
                    ),
                    reduce_b: store.register(&format!("fusion.l{l}.reduce.b"), &[c / r], Init::Zero),
                }
            })
            .collect();
        Ok(SpectralFusion {
            levels,
            widths: cfg.widths,
            reduce_ratio: cfg.reduce_ratio,
            mode: cfg.fusion_mode,
        })
    }

    /// Channel width of the fused, reduced map at `level`.
    pub fn out_ch(&self, level: usize) -> usize {
        self.widths[level] / self.reduce_ratio
    }

    /// Gate for one level: returns the weight node `[w_rgb, w_ir]`, each in
    /// `[GATE_FLOOR, 1 - GATE_FLOOR]` and summing to one.
    fn gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        f_rgb: NodeId,
        f_ir: NodeId,
    ) -> Result<NodeId> {
        let g = &self.levels[level];
        let s_rgb = tape.global_avg_pool(f_rgb)?;
        let s_ir = tape.global_avg_pool(f_ir)?;
        let stats = tape.concat(&[s_rgb, s_ir])?;
        // unit-power stats: the gate keys on the activity pattern across
        // channels, not on how bright the scene happens to be overall, and
        // every entry arrives at O(1) scale so the MLP has room to spread
        // its output across scenes
        let dim = tape.shape(stats)[0] as f32;
        let unit = tape.l2_normalize(stats)?;
        let stats = tape.scale(unit, dim.sqrt());
        let w1 = store.bind(tape, g.fc1_w);
        let b1 = store.bind(tape, g.fc1_b);
        let h = tape.linear(stats, w1, Some(b1))?;
        let h = tape.silu(h);
        let w2 = store.bind(tape, g.fc2_w);
        let b2 = store.bind(tape, g.fc2_b);
        let logits = tape.linear(h, w2, Some(b2))?;
        let soft = tape.softmax(logits)?;
        let squeezed = tape.scale(soft, 1.0 - 2.0 * GATE_FLOOR);
        let floor = tape.constant(&[2], &[GATE_FLOOR, GATE_FLOOR]);
        tape.add(squeezed, floor)
    }

    /// Fuses one level's modality pair. Returns the activated reduced map and
    /// the `[w_rgb, w_ir]` gate node (a constant 0.5/0.5 when `gated` is off).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        f_rgb: NodeId,
        f_ir: NodeId,
        gated: bool,
    ) -> Result<(NodeId, NodeId)> {
        if tape.shape(f_rgb) != tape.shape(f_ir) {
            return Err(Error::shape(
                tape.shape(f_rgb),
                tape.shape(f_ir),
                format!("fusion level {level} modality maps"),
            ));
        }
        let g = &self.levels[level];
        let weights = if gated {
            self.gate(tape, store, level, f_rgb, f_ir)?
        } else {
            tape.constant(&[2], &[0.5, 0.5])
        };
        // the blend runs on unit-power maps so a branch cannot buy back
        // influence by inflating its feature scale: the modality balance
        // belongs to the gate alone (which reads the raw, unscaled stats)
        let root_n = (tape.shape(f_rgb).iter().product::<usize>() as f32).sqrt();
        let rn = tape.l2_normalize(f_rgb)?;
        let f_rgb = tape.scale(rn, root_n);
        let in_ = tape.l2_normalize(f_ir)?;
        let f_ir = tape.scale(in_, root_n);
        let w_rgb = tape.index(weights, 0)?;
        let w_ir = tape.index(weights, 1)?;
        let a = tape.scale_by(f_rgb, w_rgb)?;
        let b = tape.scale_by(f_ir, w_ir)?;
        let fused = match self.mode {
            FusionMode::WeightedSum => tape.add(a, b)?,
            FusionMode::ConcatReduce => tape.concat(&[a, b])?,
        };
        let rw = store.bind(tape, g.reduce_w);
        let rb = store.bind(tape, g.reduce_b);
        let reduced = tape.conv2d(fused, rw, Some(rb), 1, 0)?;
        Ok((tape.silu(reduced), weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        Config::default()
    }

    fn map(tape: &mut Tape, c: usize, s: usize, data: Vec<f32>) -> NodeId {
        tape.leaf(&Tensor::new(vec![c, s, s], data).unwrap())
    }

    #[test]
    fn zeroed_gate_head_blends_evenly() {
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        for e in store.entries_mut() {
            if e.name.contains(".fc") {
                e.tensor.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, (0..16 * 64).map(|i| i as f32 * 0.01).collect());
        let b = map(&mut tape, 16, 8, (0..16 * 64).map(|i| i as f32 * -0.02).collect());
        let (_, weights) = f
            .forward(&mut tape, &store, 0, a, b, true)
            .unwrap();
        let w = tape.data(weights);
        assert_eq!(w, &[0.5, 0.5]);
    }

    #[test]
    fn fresh_gate_leans_on_the_louder_band() {
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        // visible features near-silent, thermal loud: a night scene
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, vec![0.01; 1024]);
        let b = map(&mut tape, 16, 8, vec![1.0; 1024]);
        let (_, w) = f.forward(&mut tape, &store, 0, a, b, true).unwrap();
        let night = tape.data(w).to_vec();
        assert!(night[1] > 0.6, "night scene should favor heat: {night:?}");
        // mirrored energies must mirror the weights
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, vec![1.0; 1024]);
        let b = map(&mut tape, 16, 8, vec![0.01; 1024]);
        let (_, w) = f.forward(&mut tape, &store, 0, a, b, true).unwrap();
        let day = tape.data(w).to_vec();
        assert!((day[0] - night[1]).abs() < 1e-5, "{day:?} vs {night:?}");
    }

    #[test]
    fn gate_weights_stay_convex_under_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        for trial in 0..100 {
            for e in store.entries_mut() {
                if e.name.starts_with("fusion.l0.fc") {
                    for v in &mut e.tensor.data {
                        *v = rng.gen_range(-3.0..3.0);
                    }
                }
            }
            let mut tape = Tape::new();
            let a = map(&mut tape, 16, 8, (0..1024).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let b = map(&mut tape, 16, 8, (0..1024).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let (_, weights) = f
                .forward(&mut tape, &store, 0, a, b, true)
                .unwrap();
            let w = tape.data(weights);
            assert!(
                w[0] >= GATE_FLOOR - 1e-6 && w[1] >= GATE_FLOOR - 1e-6,
                "trial {trial}: weight under floor {w:?}"
            );
            assert!((w[0] + w[1] - 1.0).abs() < 1e-6, "trial {trial}: sum {w:?}");
        }
    }

    #[test]
    fn fused_map_is_between_the_modalities() {
        // check the blend itself (before reduction) stays elementwise convex:
        // constant maps normalize to unit power (+1 and -1 here), so the
        // blend must land between those, whatever the gate says
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        for e in store.entries_mut() {
            if e.name.starts_with("fusion.l0.fc") {
                for v in &mut e.tensor.data {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
            if e.name == "fusion.l0.reduce.w" {
                // identity-ish reduce: each output channel averages inputs
                for v in &mut e.tensor.data {
                    *v = 1.0 / 16.0;
                }
            }
        }
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, vec![2.0; 1024]);
        let b = map(&mut tape, 16, 8, vec![-1.0; 1024]);
        let (_, weights) = f
            .forward(&mut tape, &store, 0, a, b, true)
            .unwrap();
        let w = tape.data(weights).to_vec();
        let blend = w[0] * 1.0 + w[1] * -1.0;
        assert!((-1.0..=1.0).contains(&blend));
    }

    #[test]
    fn swapping_modalities_and_gate_halves_swaps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        let hidden = cfg().gate_hidden;
        // random gate so the weights are not trivially 0.5/0.5
        for e in store.entries_mut() {
            if e.name.starts_with("fusion.l0.fc") {
                for v in &mut e.tensor.data {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
        }
        let av: Vec<f32> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f32> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |store: &ParamStore, x: Vec<f32>, y: Vec<f32>| {
            let mut tape = Tape::new();
            let a = map(&mut tape, 16, 8, x);
            let b = map(&mut tape, 16, 8, y);
            let (_, weights) = f.forward(&mut tape, store, 0, a, b, true).unwrap();
            tape.data(weights).to_vec()
        };
        let w_fwd = run(&store, av.clone(), bv.clone());

        // swap the fc1 column blocks (so the gate reads the swapped concat
        // identically) and the fc2 rows (so the logits trade places)
        {
            let id = store.find("fusion.l0.fc1.w").unwrap();
            let t = store.tensor_mut(id);
            let c = 16;
            for row in 0..hidden {
                for j in 0..c {
                    t.data.swap(row * 2 * c + j, row * 2 * c + c + j);
                }
            }
            let id = store.find("fusion.l0.fc2.w").unwrap();
            let t = store.tensor_mut(id);
            for j in 0..hidden {
                t.data.swap(j, hidden + j);
            }
            let id = store.find("fusion.l0.fc2.b").unwrap();
            store.tensor_mut(id).data.swap(0, 1);
        }
        let w_swapped = run(&store, bv, av);
        assert!((w_fwd[0] - w_swapped[1]).abs() < 1e-5, "{w_fwd:?} vs {w_swapped:?}");
        assert!((w_fwd[1] - w_swapped[0]).abs() < 1e-5, "{w_fwd:?} vs {w_swapped:?}");
    }

    #[test]
    fn reduction_halves_channels() {
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        let mut tape = Tape::new();
        let a = map(&mut tape, 32, 4, vec![0.5; 32 * 16]);
        let b = map(&mut tape, 32, 4, vec![0.25; 32 * 16]);
        let (out, _) = f
            .forward(&mut tape, &store, 1, a, b, true)
            .unwrap();
        assert_eq!(tape.shape(out), &[16, 4, 4]);
    }

    #[test]
    fn stacking_mode_keeps_the_output_contract() {
        let mut store = ParamStore::new(3);
        let mut c = cfg();
        c.fusion_mode = FusionMode::ConcatReduce;
        let f = SpectralFusion::new(&mut store, &c).unwrap();
        // reduce conv must accept both stacked maps
        let id = store.find("fusion.l0.reduce.w").unwrap();
        assert_eq!(store.tensor(id).shape, vec![8, 32, 1, 1]);
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, (0..1024).map(|i| (i % 7) as f32).collect());
        let b = map(&mut tape, 16, 8, (0..1024).map(|i| (i % 5) as f32).collect());
        let (out, weights) = f.forward(&mut tape, &store, 0, a, b, true).unwrap();
        assert_eq!(tape.shape(out), &[8, 8, 8]);
        let w = tape.data(weights);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ungated_forward_blends_half_and_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        // random gate parameters must not matter when the gate is bypassed
        for e in store.entries_mut() {
            if e.name.starts_with("fusion.l0.fc") {
                for v in &mut e.tensor.data {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
        }
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = map(&mut tape, 16, 8, (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (_, weights) = f.forward(&mut tape, &store, 0, a, b, false).unwrap();
        assert_eq!(tape.data(weights), &[0.5, 0.5]);
    }

    #[test]
    fn mismatched_modalities_are_rejected() {
        let mut store = ParamStore::new(3);
        let f = SpectralFusion::new(&mut store, &cfg()).unwrap();
        let mut tape = Tape::new();
        let a = map(&mut tape, 16, 8, vec![0.0; 1024]);
        let b = map(&mut tape, 16, 4, vec![0.0; 256]);
        assert!(f.forward(&mut tape, &store, 0, a, b, true).is_err());
    }

    #[test]
    fn indivisible_reduce_ratio_is_rejected() {
        let mut store = ParamStore::new(3);
        let mut c = cfg();
        c.reduce_ratio = 3;
        assert!(SpectralFusion::new(&mut store, &c).is_err());
    }
}
