use specdet_core::config::Config;
use specdet_core::data;
use specdet_core::model::{Ablation, Model};
use specdet_core::params::ParamStore;
use specdet_core::tensor::Tape;

fn main() {
    let mut cfg = Config::default();
    cfg.seed = 7;
    cfg.num_samples = 32;
    let dir = std::path::PathBuf::from("/tmp/overfit_data");
    let _ = std::fs::remove_dir_all(&dir);
    data::synth::generate(&dir, &cfg).unwrap();
    let samples = data::load_dir(&dir).unwrap();
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, &cfg).unwrap();
    let mut rows: Vec<(f32, [f32; 3])> = Vec::new();
    for s in &samples {
        let mut tape = Tape::new();
        let vis = tape.constant(&s.visible.shape, &s.visible.data);
        let ir = tape.constant(&s.infrared.shape, &s.infrared.data);
        let pv = model.extractor.visible.forward(&mut tape, &store, vis).unwrap();
        let pi = model.extractor.infrared.forward(&mut tape, &store, ir).unwrap();
        let mut ds = [0.0f32; 3];
        for l in 0..3 {
            let srgb = tape.global_avg_pool(pv[l]).unwrap();
            let sir = tape.global_avg_pool(pi[l]).unwrap();
            let cat = tape.concat(&[srgb, sir]).unwrap();
            let dim = tape.shape(cat)[0] as f32;
            let unit = tape.l2_normalize(cat).unwrap();
            let stats = tape.scale(unit, dim.sqrt());
            let d = tape.data(stats);
            let c = d.len() / 2;
            let mean_rgb: f32 = d[..c].iter().sum::<f32>() / c as f32;
            let mean_ir: f32 = d[c..].iter().sum::<f32>() / c as f32;
            ds[l] = mean_rgb - mean_ir;
        }
        rows.push((s.illumination, ds));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    println!("illum | d0 d1 d2");
    for (il, ds) in &rows {
        println!("{:.3} | {:+.4} {:+.4} {:+.4}", il, ds[0], ds[1], ds[2]);
    }
    for l in 0..3 {
        let night: Vec<f32> = rows.iter().filter(|r| r.0 < 0.5).map(|r| r.1[l]).collect();
        let day: Vec<f32> = rows.iter().filter(|r| r.0 >= 0.5).map(|r| r.1[l]).collect();
        let m = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        println!(
            "level {l}: night mean {:+.4} day mean {:+.4} delta {:+.4} midpoint {:+.4}",
            m(&night),
            m(&day),
            m(&night) - m(&day),
            0.5 * (m(&night) + m(&day))
        );
    }
}
