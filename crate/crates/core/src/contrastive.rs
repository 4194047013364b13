//! Triplet objectives over the decoupled embeddings.
//!
//! Two triplets per sample tie the modalities together: the person embedding
//! of one modality should sit near the person embedding of the other and far
//! from its own background, and symmetrically for backgrounds. Negatives come
//! either from the same sample or, in hard-mining mode, from the closest
//! wrong-role embedding anywhere in the batch (chosen on detached values, so
//! mining itself is not differentiated through).

use crate::config::TripletSource;
use crate::error::{Error, Result};
use crate::irfdm::EmbeddingSet;
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Copy)]
pub struct Triplet {
    pub anchor: NodeId,
    pub positive: NodeId,
    pub negative: NodeId,
}

/// Euclidean distance node between two same-shape embeddings. Identical
/// nodes give exactly zero with a zero subgradient.
pub fn euclidean(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.sqrt_guard(s))
}

fn euclidean_data(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Hinge loss of one triplet: `max(0, d(a,p) - d(a,n) + margin)`.
pub fn triplet_hinge(tape: &mut Tape, t: Triplet, margin: f32) -> Result<NodeId> {
    let d_ap = euclidean(tape, t.anchor, t.positive)?;
    let d_an = euclidean(tape, t.anchor, t.negative)?;
    let diff = tape.sub(d_ap, d_an)?;
    let m = tape.scalar(margin);
    let shifted = tape.add(diff, m)?;
    Ok(tape.relu(shifted))
}

/// Sum of hinge losses over a batch of triplets.
pub fn triplet_loss(tape: &mut Tape, triplets: &[Triplet], margin: f32) -> Result<NodeId> {
    if triplets.is_empty() {
        return Err(Error::Usage("triplet loss needs at least one triplet".into()));
    }
    let mut total: Option<NodeId> = None;
    for t in triplets {
        let h = triplet_hinge(tape, *t, margin)?;
        total = Some(match total {
            None => h,
            Some(acc) => tape.add(acc, h)?,
        });
    }
    Ok(total.unwrap())
}

/// Builds the person and background triplets for a batch of embedding sets.
///
/// Same-sample mode: person (anchor hv, positive hi, negative bv) and
/// background (anchor bv, positive bi, negative hv), per sample. Hard mode
/// keeps the anchors and positives but picks each negative as the nearest
/// wrong-role embedding across the whole batch, measured on current values.
pub fn build_triplets(
    tape: &Tape,
    sets: &[EmbeddingSet],
    source: TripletSource,
) -> Vec<Triplet> {
    let mut out = Vec::with_capacity(sets.len() * 2);
    match source {
        TripletSource::SameSample => {
            for s in sets {
                out.push(Triplet { anchor: s.hv, positive: s.hi, negative: s.bv });
                out.push(Triplet { anchor: s.bv, positive: s.bi, negative: s.hv });
            }
        }
        TripletSource::BatchHard => {
            let nearest = |anchor: NodeId, candidates: &dyn Fn(&EmbeddingSet) -> NodeId| {
                let av = tape.data(anchor);
                sets.iter()
                    .map(candidates)
                    .min_by(|x, y| {
                        let dx = euclidean_data(av, tape.data(*x));
                        let dy = euclidean_data(av, tape.data(*y));
                        dx.partial_cmp(&dy).unwrap().then(x.cmp(y))
                    })
                    .unwrap()
            };
            for s in sets {
                out.push(Triplet {
                    anchor: s.hv,
                    positive: s.hi,
                    negative: nearest(s.hv, &|o| o.bv),
                });
                out.push(Triplet {
                    anchor: s.bv,
                    positive: s.bi,
                    negative: nearest(s.bv, &|o| o.hv),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecn(tape: &mut Tape, v: &[f32]) -> NodeId {
        tape.leaf(&Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn hinge_value_is_exact_for_hand_case() {
        // d_ap = 1, d_an = 0.4, margin 0.2: hinge = 0.8
        let mut tape = Tape::new();
        let t = Triplet {
            anchor: vecn(&mut tape, &[0.0, 0.0]),
            positive: vecn(&mut tape, &[1.0, 0.0]),
            negative: vecn(&mut tape, &[0.4, 0.0]),
        };
        let h = triplet_hinge(&mut tape, t, 0.2).unwrap();
        assert!((tape.data(h)[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn equal_distances_leave_exactly_the_margin() {
        let mut tape = Tape::new();
        let t = Triplet {
            anchor: vecn(&mut tape, &[0.0, 0.0]),
            positive: vecn(&mut tape, &[0.0, 0.7]),
            negative: vecn(&mut tape, &[0.7, 0.0]),
        };
        let h = triplet_hinge(&mut tape, t, 0.2).unwrap();
        assert!((tape.data(h)[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn satisfied_triplet_is_exactly_zero() {
        let mut tape = Tape::new();
        let t = Triplet {
            anchor: vecn(&mut tape, &[0.0, 0.0]),
            positive: vecn(&mut tape, &[0.1, 0.0]),
            negative: vecn(&mut tape, &[2.0, 0.0]),
        };
        let h = triplet_hinge(&mut tape, t, 0.2).unwrap();
        assert_eq!(tape.data(h)[0], 0.0);
    }

    #[test]
    fn identical_anchor_and_positive_is_safe() {
        // same node as anchor and positive: distance is exactly zero and
        // backward must not blow up on the sqrt at zero
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2], vec![0.3, -0.4]).unwrap().with_grad());
        let n = vecn(&mut tape, &[0.35, -0.4]);
        let t = Triplet { anchor: a, positive: a, negative: n };
        let h = triplet_hinge(&mut tape, t, 0.2).unwrap();
        let v = tape.data(h)[0];
        assert!((v - 0.15).abs() < 1e-6, "got {v}");
        tape.backward(h).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn same_sample_triplets_have_the_documented_roles() {
        let mut tape = Tape::new();
        let s = EmbeddingSet {
            hv: vecn(&mut tape, &[1.0, 0.0]),
            bv: vecn(&mut tape, &[0.0, 1.0]),
            hi: vecn(&mut tape, &[0.9, 0.1]),
            bi: vecn(&mut tape, &[0.1, 0.9]),
        };
        let ts = build_triplets(&tape, &[s], TripletSource::SameSample);
        assert_eq!(ts.len(), 2);
        assert_eq!((ts[0].anchor, ts[0].positive, ts[0].negative), (s.hv, s.hi, s.bv));
        assert_eq!((ts[1].anchor, ts[1].positive, ts[1].negative), (s.bv, s.bi, s.hv));
    }

    #[test]
    fn batch_hard_picks_the_nearest_wrong_role_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut tape = Tape::new();
        let mut sets = Vec::new();
        for _ in 0..6 {
            let mut mk = |tape: &mut Tape| {
                let v: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tape.leaf(&Tensor::new(vec![4], v).unwrap())
            };
            sets.push(EmbeddingSet {
                hv: mk(&mut tape),
                bv: mk(&mut tape),
                hi: mk(&mut tape),
                bi: mk(&mut tape),
            });
        }
        let ts = build_triplets(&tape, &sets, TripletSource::BatchHard);
        assert_eq!(ts.len(), 12);
        // brute-force check every person triplet's negative
        for (i, s) in sets.iter().enumerate() {
            let t = ts[2 * i];
            let av = tape.data(s.hv);
            let best = sets
                .iter()
                .map(|o| {
                    let d = av
                        .iter()
                        .zip(tape.data(o.bv))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f32>()
                        .sqrt();
                    (d, o.bv)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            assert_eq!(t.negative, best, "sample {i} negative is not the hardest");
        }
    }

    #[test]
    fn batch_loss_sums_hinges() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, a: [f32; 2], p: [f32; 2], n: [f32; 2]| Triplet {
            anchor: vecn(tape, &a),
            positive: vecn(tape, &p),
            negative: vecn(tape, &n),
        };
        let t1 = mk(&mut tape, [0.0, 0.0], [1.0, 0.0], [0.4, 0.0]); // 0.8
        let t2 = mk(&mut tape, [0.0, 0.0], [0.1, 0.0], [5.0, 0.0]); // 0.0
        let loss = triplet_loss(&mut tape, &[t1, t2], 0.2).unwrap();
        assert!((tape.data(loss)[0] - 0.8).abs() < 1e-6);
        assert!(triplet_loss(&mut tape, &[], 0.2).is_err());
    }
}
