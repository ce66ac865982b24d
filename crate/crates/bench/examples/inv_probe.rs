//! Scratch probe: inversion concentration vs step size on the 100-scene suite.

use mgvt_bench::dataset::build_scene;
use mgvt_core::encoder::{Encoder, EncoderConfig};
use mgvt_core::inversion::{invert_mask, InversionConfig};

fn main() {
    let encoder = Encoder::new(EncoderConfig::desk(101)).unwrap();
    let scenes: Vec<_> = (0..100).map(|i| build_scene(616, i).unwrap()).collect();
    let features: Vec<_> = scenes
        .iter()
        .map(|s| encoder.encode(&s.pixels).unwrap())
        .collect();
    for step_size in [1.0, 4.0, 16.0, 64.0, 256.0, 1024.0] {
        let mut cfg = InversionConfig::default();
        cfg.step_size = step_size;
        let mut before = Vec::new();
        let mut after = Vec::new();
        let mut ious = Vec::new();
        let mut steps_used = 0usize;
        let start = std::time::Instant::now();
        for (scene, feats) in scenes.iter().zip(&features) {
            for mask in &scene.masks {
                let t = invert_mask(mask, feats, &cfg).unwrap();
                before.push(t.mass_before);
                after.push(t.mass_after);
                ious.push(t.map_iou_after);
                steps_used += t.steps_used;
            }
        }
        let n = ious.len();
        ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = ious[n / 2];
        let frac_ge: f64 = ious.iter().filter(|&&x| x >= 0.5).count() as f64 / n as f64;
        println!(
            "step_size {step_size:>6}: mass {:.3} -> {:.3}, median iou {med:.3}, frac>=0.5 {frac_ge:.2}, avg steps {:.1}, {:.2}s",
            before.iter().sum::<f64>() / n as f64,
            after.iter().sum::<f64>() / n as f64,
            steps_used as f64 / n as f64,
            start.elapsed().as_secs_f64()
        );
    }
}
