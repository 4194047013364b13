use specdet_core::config::Config;
use specdet_core::data;
use specdet_core::model::Ablation;
use specdet_core::tensor::Tape;
use specdet_core::train::{evaluate_detector, Trainer};
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    cfg.seed = 7;
    cfg.num_samples = 32;
    cfg.epochs = 300;
    let dir = std::path::PathBuf::from("/tmp/overfit_data");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    data::synth::generate(&dir, &cfg).unwrap();
    let all = data::load_dir(&dir).unwrap();
    let (samples, _val) = data::split(all.clone());
    println!("train {} / val {}", samples.len(), all.len() - samples.len());
    let t0 = Instant::now();
    let mut tr = Trainer::new(&cfg, Ablation::default(), samples.len()).unwrap();
    let gap_of = |tr: &Trainer, set: &[data::Sample]| -> (f32, f32) {
        let (mut d, mut b) = (Vec::new(), Vec::new());
        for s in set {
            let mut t = Tape::new();
            let fwd = tr.model.forward_sample(&mut t, &tr.store, s, Ablation::default()).unwrap();
            let w = specdet_core::model::Model::mean_ir_weight(&t, &fwd.gates);
            if s.illumination < 0.2 { d.push(w); }
            if s.illumination > 0.8 { b.push(w); }
        }
        let m = |v: &[f32]| v.iter().sum::<f32>() / v.len().max(1) as f32;
        (m(&d), m(&b))
    };
    for e in 0..cfg.epochs {
        let stats = tr.run_epoch(&samples).unwrap();
        if (e + 1) % 30 == 0 || e < 10 {
            let v = stats.last().unwrap().values;
            let (d, b) = gap_of(&tr, &all);
            println!("epoch {e} cls {:.4} box {:.4} conf {:.4} | w_ir dark {:.4} bright {:.4} gap {:+.4} ({:.0}s)",
                v.cls, v.box_, v.conf, d, b, d - b, t0.elapsed().as_secs_f64());
        }
    }
    // inspect sample 0 in depth
    let s = &samples[0];
    let mut tape = Tape::new();
    let fwd = tr.model.forward_sample(&mut tape, &tr.store, s, Ablation::default()).unwrap();
    let gt = s.boxes[0];
    println!("gt: cx {:.3} cy {:.3} w {:.3} h {:.3}", gt.cx, gt.cy, gt.w, gt.h);
    let asn = tr.model.head.assign_targets(&s.boxes, 64)[0];
    println!("assigned level {} anchor {} cell ({},{})", asn.level, asn.anchor, asn.cell_y, asn.cell_x);
    let g = 64 / [8,16,32][asn.level];
    let block = 6;
    let data_l = tape.data(fwd.preds[asn.level]);
    let at = |c: usize| data_l[(asn.anchor * block + c) * g * g + asn.cell_y * g + asn.cell_x];
    let sig = |z: f32| 1.0 / (1.0 + (-z).exp());
    println!("pos slot: tx {:.3} ty {:.3} tw {:.3} th {:.3} obj {:.3} (sig {:.4})", at(0), at(1), at(2), at(3), at(4), sig(at(4)));
    let dec = tr.model.head.decode_box(asn.level, asn.anchor, asn.cell_y, asn.cell_x, [at(0),at(1),at(2),at(3)], 64);
    println!("decoded: cx {:.3} cy {:.3} w {:.3} h {:.3}", dec.0, dec.1, dec.2, dec.3);
    let mut tape2 = Tape::new();
    let dets = tr.model.detect(&mut tape2, &tr.store, s, Ablation::default(), 0.05).unwrap();
    println!("{} dets; top:", dets.len());
    for d in dets.iter().take(5) { println!("  score {:.4} cx {:.3} cy {:.3} w {:.3} h {:.3}", d.score, d.cx, d.cy, d.w, d.h); }
    let ev = evaluate_detector(&tr.model, &tr.store, &samples, Ablation::default(), cfg.eval_conf_threshold, 1).unwrap();
    println!("train mAP@50 {:.4} in {:.0}s", ev.map50, t0.elapsed().as_secs_f64());

    // gate adaptivity: mean IR weight in dark vs bright scenes
    let (mut dark, mut bright): (Vec<f32>, Vec<f32>) = (Vec::new(), Vec::new());
    let mut coses: Vec<f32> = Vec::new();
    for s in &all {
        let mut t = Tape::new();
        let fwd = tr.model.forward_sample(&mut t, &tr.store, s, Ablation::default()).unwrap();
        let w_ir = specdet_core::model::Model::mean_ir_weight(&t, &fwd.gates);
        if s.illumination < 0.2 { dark.push(w_ir); }
        if s.illumination > 0.8 { bright.push(w_ir); }
        let emb = fwd.embeddings.as_ref().unwrap();
        let hv = t.data(emb.hv);
        let bv = t.data(emb.bv);
        let cos: f32 = hv.iter().zip(bv).map(|(a, b)| a * b).sum();
        coses.push(cos.abs());
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len().max(1) as f32;
    println!(
        "gate: dark n={} mean w_ir {:.4} | bright n={} mean w_ir {:.4} | gap {:.4}",
        dark.len(), mean(&dark), bright.len(), mean(&bright), mean(&dark) - mean(&bright)
    );
    println!("separability: mean |cos(h,b)| {:.4}", mean(&coses));
    // per-scene illumination vs gate weight
    let mut pairs: Vec<(f32, f32)> = all.iter().map(|s| {
        let mut t = Tape::new();
        let fwd = tr.model.forward_sample(&mut t, &tr.store, s, Ablation::default()).unwrap();
        (s.illumination, specdet_core::model::Model::mean_ir_weight(&t, &fwd.gates))
    }).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (i, w) in &pairs { println!("  illum {:.3} w_ir {:.4}", i, w); }
}
