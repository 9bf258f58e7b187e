use refvsr::data::{generate_synth_clip, MotionKind, StepMagnitude, SynthClipConfig};
use refvsr::imaging::bicubic_resample;
use refvsr::metrics::{psnr, ssim};
use refvsr::synthesis::{super_resolve, ModelConfig, ModelParams};

#[test]
fn probe_baseline_and_timing() {
    let mut baselines = Vec::new();
    for seed in 0..8 {
        let cfg = SynthClipConfig {
            hr_height: 128,
            hr_width: 128,
            n: 4,
            motion: MotionKind::Translation,
            max_step_px: 0.75,
            step_magnitude: StepMagnitude::Uniform,
            texture_seed: seed,
            noise_sigma: 0.0,
            channels: 3,
        };
        let clip = generate_synth_clip(&cfg).unwrap();
        let gt = &clip.gt_hr_frames.as_ref().unwrap()[3];
        let up = bicubic_resample(&clip.lr_frames[3], 4.0).unwrap();
        let p = psnr(&up, gt, 1.0).unwrap();
        let s = ssim(&up, gt).unwrap();
        baselines.push(p);
        println!("seed {seed}: bicubic baseline {p:.2} dB ssim {s:.4}");
    }
    println!("mean baseline: {:.2}", baselines.iter().sum::<f64>() / 8.0);

    // timing: one super_resolve forward at criterion geometry
    let cfg = ModelConfig { channels: 3, n: 4, residual_refiner: true };
    let params = ModelParams::init(&cfg, 0);
    let clip = generate_synth_clip(&SynthClipConfig {
        hr_height: 128,
        hr_width: 128,
        n: 4,
        motion: MotionKind::Translation,
        max_step_px: 0.75,
        step_magnitude: StepMagnitude::Uniform,
        texture_seed: 99,
        noise_sigma: 0.0,
        channels: 3,
    })
    .unwrap();
    let t0 = std::time::Instant::now();
    let _ = super_resolve(&clip.reference_hr, &clip.lr_frames, &params).unwrap();
    println!("cold forward: {:?}", t0.elapsed());
    let t1 = std::time::Instant::now();
    for _ in 0..3 {
        let _ = super_resolve(&clip.reference_hr, &clip.lr_frames, &params).unwrap();
    }
    println!("warm forward avg: {:?}", t1.elapsed() / 3);
}
