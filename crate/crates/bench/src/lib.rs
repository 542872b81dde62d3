//! Fixtures shared by the kernel benchmarks.

use camodet_core::alignment::BBox;
use camodet_core::eval::{DetectionRecord, GroundTruthRecord};
use camodet_core::synth::{generate_scene, scene_rng, SynthConfig, SynthScene};

/// One synthetic scene at the default benchmark size.
pub fn scene(seed: u64) -> SynthScene {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    generate_scene(&cfg, "bench", &mut scene_rng(seed, 0))
        .expect("default config places its objects")
}

/// `images × per_image` ground-truth boxes on a grid, with detections that
/// are jittered copies plus one false positive per image.
pub fn eval_dataset(
    images: usize,
    per_image: usize,
) -> (Vec<DetectionRecord>, Vec<GroundTruthRecord>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let step = 1.0 / per_image as f64;
    for i in 0..images {
        let id = format!("img{i:04}");
        for k in 0..per_image {
            let x1 = k as f64 * step;
            let gt = BBox::new(x1, 0.1, x1 + 0.8 * step, 0.6).unwrap();
            gts.push(GroundTruthRecord::new(&id, (k % 4) as u32, gt, Some(4096.0)).unwrap());
            let shift = 0.1 * step * ((i + k) % 5) as f64 / 5.0;
            let det = BBox::new(x1 + shift, 0.12, (x1 + 0.8 * step + shift).min(1.0), 0.6).unwrap();
            let conf = 0.5 + 0.5 * ((i * 7 + k * 13) % 97) as f64 / 97.0;
            dets.push(DetectionRecord::new(&id, (k % 4) as u32, det, conf).unwrap());
        }
        let fp = BBox::new(0.0, 0.7, 0.2, 0.9).unwrap();
        dets.push(DetectionRecord::new(&id, 0, fp, 0.55).unwrap());
    }
    (dets, gts)
}
