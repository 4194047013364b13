//! Paired visible/thermal scene synthesis.
//!
//! Each scene is a smooth textured background with 1-2 upright rectangular
//! "pedestrians". The visible image is scaled by a per-scene illumination
//! factor before sensor noise is added, so low-light scenes bury the target
//! under the noise floor. Pedestrians run body-hot in the thermal band at any
//! light level, but the thermal image has soft edges (heat diffusion plus a
//! wide sensor PSF), and sunny scenes also grow sun-heated ghost patches —
//! exactly body-hot in the thermal band yet near-black in the visible band.
//! So heat finds bodies in the dark, while daylight makes the sharp-edged,
//! ghost-free visible band the better localizer. The informative modality
//! flips between night and day, and that crossover is what a modality gate
//! has to learn to exploit.

use super::pnm;
use crate::config::{Config, IllumDist};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

const BG_VIS: f32 = 90.0;
const BG_VIS_AMP: f32 = 40.0;
const PED_VIS: f32 = 220.0;
const BG_IR: f32 = 70.0;
const BG_IR_AMP: f32 = 22.0;
const PED_IR: f32 = 205.0;
// sun-baked tar patches: near-black in the visible band at any hour
const GHOST_VIS: f32 = 14.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectNorm {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

fn rect_iou(a: &RectNorm, b: &RectNorm) -> f32 {
    let (ax0, ax1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0);
    let (ay0, ay1) = (a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx0, bx1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let (by0, by1) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

struct Scene {
    illum: f32,
    peds: Vec<RectNorm>,
    visible: Vec<u8>,
    infrared: Vec<u8>,
}

/// In-place 5-tap binomial blur along both axes (clamped at the borders).
fn blur_separable(img: &mut [f32], s: usize) {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for (k, w) in K.iter().enumerate() {
                let xi = (x as isize + k as isize - 2).clamp(0, s as isize - 1) as usize;
                acc += w * img[y * s + xi];
            }
            tmp[y * s + x] = acc;
        }
    }
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for (k, w) in K.iter().enumerate() {
                let yi = (y as isize + k as isize - 2).clamp(0, s as isize - 1) as usize;
                acc += w * tmp[yi * s + x];
            }
            img[y * s + x] = acc;
        }
    }
}

/// Draws a per-scene illumination factor. The bimodal mode is a day/night
/// mixture with nothing in between; either lobe collapses away when the
/// configured [illum_min, illum_max] window excludes it.
fn sample_illum(rng: &mut ChaCha8Rng, cfg: &Config) -> f32 {
    let uniform = |rng: &mut ChaCha8Rng| rng.gen_range(cfg.illum_min..cfg.illum_max);
    match cfg.illum_dist {
        IllumDist::Uniform => uniform(rng),
        IllumDist::Bimodal => {
            let night_hi = cfg.illum_max.min(0.25);
            let day_lo = cfg.illum_min.max(0.75);
            let night_ok = cfg.illum_min < night_hi;
            let day_ok = day_lo < cfg.illum_max;
            match (night_ok, day_ok) {
                (true, true) => {
                    if rng.gen_bool(0.5) {
                        rng.gen_range(day_lo..cfg.illum_max)
                    } else {
                        rng.gen_range(cfg.illum_min..night_hi)
                    }
                }
                (true, false) => rng.gen_range(cfg.illum_min..night_hi),
                (false, true) => rng.gen_range(day_lo..cfg.illum_max),
                (false, false) => uniform(rng),
            }
        }
    }
}

fn render_scene(rng: &mut ChaCha8Rng, cfg: &Config) -> Scene {
    let s = cfg.image_size;
    let illum = sample_illum(rng, cfg);

    let place = |rng: &mut ChaCha8Rng, taken: &[&[RectNorm]]| -> Option<RectNorm> {
        for _attempt in 0..20 {
            let w = rng.gen_range(cfg.ped_min..cfg.ped_max);
            let h = (2.0 * w).min(0.88);
            let cx = rng.gen_range(w / 2.0 + 0.02..1.0 - w / 2.0 - 0.02);
            let cy = rng.gen_range(h / 2.0 + 0.02..1.0 - h / 2.0 - 0.02);
            let cand = RectNorm { cx, cy, w, h };
            if taken.iter().flat_map(|g| g.iter()).all(|p| rect_iou(p, &cand) < 0.05) {
                return Some(cand);
            }
        }
        None
    };

    let n_peds = rng.gen_range(1..=2usize);
    let mut peds: Vec<RectNorm> = Vec::new();
    for _ in 0..n_peds {
        if let Some(p) = place(rng, &[&peds]) {
            peds.push(p);
        }
    }

    // sun-heated clutter: ped-sized patches that read warm in the thermal
    // band, showing up once there is enough sun to bake them
    let n_ghosts = if illum > 0.35 { rng.gen_range(1..=2usize) } else { 0 };
    let mut ghosts: Vec<RectNorm> = Vec::new();
    for _ in 0..n_ghosts {
        if let Some(g) = place(rng, &[&peds, &ghosts]) {
            ghosts.push(g);
        }
    }

    // per-scene texture phases/frequencies, one set per modality
    let fx = rng.gen_range(1.0f32..3.0);
    let fy = rng.gen_range(1.0f32..3.0);
    let p1 = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let p2 = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let gx = rng.gen_range(1.0f32..3.0);
    let gy = rng.gen_range(1.0f32..3.0);
    let q1 = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let q2 = rng.gen_range(0.0f32..std::f32::consts::TAU);

    let vis_noise = Normal::new(0.0f32, cfg.noise_level).unwrap();
    let ir_noise = Normal::new(0.0f32, cfg.ir_noise_level).unwrap();

    let inside = |rects: &[RectNorm], x: usize, y: usize| -> bool {
        let xf = (x as f32 + 0.5) / s as f32;
        let yf = (y as f32 + 0.5) / s as f32;
        rects.iter().any(|p| {
            (xf - p.cx).abs() <= p.w / 2.0 && (yf - p.cy).abs() <= p.h / 2.0
        })
    };

    let mut visible = vec![0u8; s * s * 3];
    let mut ir_base = vec![0f32; s * s];
    let tau = std::f32::consts::TAU;
    for y in 0..s {
        for x in 0..s {
            let xf = x as f32 / s as f32;
            let yf = y as f32 / s as f32;
            let ped = inside(&peds, x, y);
            let ghost = !ped && inside(&ghosts, x, y);

            let tex_v = BG_VIS + BG_VIS_AMP * (tau * fx * xf + p1).sin() * (tau * fy * yf + p2).cos();
            let base_v = if ped { PED_VIS } else { tex_v };
            // tar ghosts stay dark regardless of light, like a night scene
            let lit = if ghost { GHOST_VIS } else { illum * base_v };
            let v = (lit + vis_noise.sample(rng)).clamp(0.0, 255.0);
            // mild channel tint keeps the three visible channels distinct
            visible[(y * s + x) * 3] = v as u8;
            visible[(y * s + x) * 3 + 1] = (v * 0.96) as u8;
            visible[(y * s + x) * 3 + 2] = (v * 0.90) as u8;

            let tex_i = BG_IR + BG_IR_AMP * (tau * gx * xf + q1).cos() * (tau * gy * yf + q2).sin();
            // ghosts read exactly body-hot: within the thermal band alone
            // they are indistinguishable from a pedestrian
            ir_base[y * s + x] = if ped || ghost { PED_IR } else { tex_i };
        }
    }
    // heat diffusion + sensor PSF: the thermal image keeps its contrast but
    // loses edge sharpness, so it localizes worse than daylight visible
    blur_separable(&mut ir_base, s);
    let mut infrared = vec![0u8; s * s];
    for (dst, &b) in infrared.iter_mut().zip(ir_base.iter()) {
        *dst = (b + ir_noise.sample(rng)).clamp(0.0, 255.0) as u8;
    }

    Scene {
        illum,
        peds,
        visible,
        infrared,
    }
}

/// Writes `num_samples` paired scenes plus labels and an illumination
/// manifest into `dir`. Returns the scene ids in generation order.
pub fn generate(dir: &Path, cfg: &Config) -> Result<Vec<String>> {
    for sub in ["visible", "infrared", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let mut manifest = String::from("id,illumination\n");
    let mut ids = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let id = format!("scene_{i:05}");
        let scene = render_scene(&mut rng, cfg);
        pnm::write_ppm(&dir.join(format!("visible/{id}.ppm")), s, s, &scene.visible)?;
        pnm::write_pgm(&dir.join(format!("infrared/{id}.pgm")), s, s, &scene.infrared)?;
        let mut labels = String::new();
        for p in &scene.peds {
            writeln!(labels, "0 {:.6} {:.6} {:.6} {:.6}", p.cx, p.cy, p.w, p.h).unwrap();
        }
        let lpath = dir.join(format!("labels/{id}.txt"));
        std::fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))?;
        writeln!(manifest, "{id},{:.6}", scene.illum).unwrap();
        ids.push(id);
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seed_deterministic() {
        let mut cfg = Config::default();
        cfg.num_samples = 3;
        cfg.image_size = 32;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(d1.path(), &cfg).unwrap();
        generate(d2.path(), &cfg).unwrap();
        for name in [
            "visible/scene_00001.ppm",
            "infrared/scene_00001.pgm",
            "labels/scene_00001.txt",
            "manifest.csv",
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between same-seed runs");
        }
    }

    #[test]
    fn scenes_have_valid_boxes_and_illumination() {
        let mut cfg = Config::default();
        cfg.num_samples = 6;
        cfg.image_size = 32;
        let dir = tempfile::tempdir().unwrap();
        let ids = generate(dir.path(), &cfg).unwrap();
        assert_eq!(ids.len(), 6);
        for id in &ids {
            let labels =
                std::fs::read_to_string(dir.path().join(format!("labels/{id}.txt"))).unwrap();
            assert!(!labels.trim().is_empty(), "{id} has no boxes");
            for line in labels.lines() {
                let f: Vec<f32> = line
                    .split_whitespace()
                    .skip(1)
                    .map(|t| t.parse().unwrap())
                    .collect();
                let (cx, cy, w, h) = (f[0], f[1], f[2], f[3]);
                assert!(w > 0.0 && h > 0.0 && h <= 0.9);
                assert!(cx - w / 2.0 >= 0.0 && cx + w / 2.0 <= 1.0);
                assert!(cy - h / 2.0 >= 0.0 && cy + h / 2.0 <= 1.0);
            }
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        for line in manifest.lines().skip(1) {
            let illum: f32 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(illum >= cfg.illum_min && illum <= cfg.illum_max);
        }
    }

    #[test]
    fn pedestrian_brightens_ir_regardless_of_darkness() {
        let mut cfg = Config::default();
        cfg.num_samples = 1;
        cfg.image_size = 48;
        cfg.illum_min = 0.05;
        cfg.illum_max = 0.06; // force a dark scene
        cfg.ir_noise_level = 1.0;
        cfg.noise_level = 1.0;
        let dir = tempfile::tempdir().unwrap();
        let ids = generate(dir.path(), &cfg).unwrap();
        let ir = pnm::read_pnm(&dir.path().join(format!("infrared/{}.pgm", ids[0]))).unwrap();
        let labels =
            std::fs::read_to_string(dir.path().join(format!("labels/{}.txt", ids[0]))).unwrap();
        let f: Vec<f32> = labels
            .lines()
            .next()
            .unwrap()
            .split_whitespace()
            .skip(1)
            .map(|t| t.parse().unwrap())
            .collect();
        let s = cfg.image_size;
        let (cx, cy) = ((f[0] * s as f32) as usize, (f[1] * s as f32) as usize);
        let center = ir.data[cy * s + cx] as f32;
        let corner = ir.data[0] as f32;
        assert!(
            center > corner + 40.0,
            "thermal target should be hot: center {center}, corner {corner}"
        );
    }
}
