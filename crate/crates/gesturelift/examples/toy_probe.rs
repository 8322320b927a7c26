// Temporary toy probe; deleted before finalizing.
use gesturelift::diffusion::{self, GeneratorConfig, ScheduleKind};
use gesturelift::skeleton::PoseSequence;
use gesturelift::synth::{GestureDataset, SpeechTrack, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let t_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    // constant target pose: 2 bones, dims 2, value (0.6, -0.3) per bone
    let frames = 34;
    let bones = 2;
    let mut pose = PoseSequence::zeros(frames, bones, 2, 15.0);
    for f in 0..frames {
        for b in 0..bones {
            pose.vector_mut(f, b).copy_from_slice(&[0.6, -0.3]);
        }
    }
    let feature_dim = 4;
    let speech = SpeechTrack::new(frames, feature_dim, vec![0.2; frames * feature_dim], vec![0.5], 15.0).unwrap();
    let dataset = GestureDataset {
        version: 1,
        fps: 15.0,
        seq_len: frames,
        bone_count: bones,
        dims: 2,
        pairs: vec![(pose, speech.clone()); 16],
        seed: 0,
        generator_config: SynthConfig::default(),
    };
    let config = GeneratorConfig {
        dims: 2,
        t_steps,
        schedule: ScheduleKind::LinearScaled,
        train_steps: steps,
        guidance_weight: 0.0,
        seed: 3,
        ..GeneratorConfig::default()
    };
    let gen = diffusion::train(&dataset, &config).unwrap();
    println!("heldout {:.5} -> {:.5}", gen.training_log.heldout_initial, gen.training_log.heldout_final);
    let samples = gen.generate(&speech, 200, 99).unwrap();
    let mut sums = [0.0f64; 2];
    let mut sqs = [0.0f64; 2];
    let mut n = 0.0;
    for s in &samples {
        for f in 0..frames {
            for b in 0..bones {
                let v = s.vector(f, b);
                sums[0] += v[0];
                sums[1] += v[1];
                sqs[0] += v[0] * v[0];
                sqs[1] += v[1] * v[1];
                n += 1.0;
            }
        }
    }
    for k in 0..2 {
        let mean = sums[k] / n;
        let std = (sqs[k] / n - mean * mean).sqrt();
        println!("coord {k}: mean {mean:.4} (target {}), std {std:.4}", if k == 0 { 0.6 } else { -0.3 });
    }
}
