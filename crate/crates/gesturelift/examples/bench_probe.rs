// Temporary diagnostic probe; deleted before finalizing.
use gesturelift::diffusion::{self, GeneratorConfig};
use gesturelift::metrics::{angle_velocity, fgd, gesture_stats, train_encoder_with, EncoderConfig, GestureStats};
use gesturelift::skeleton::{PoseSequence, SkeletonTopology};
use gesturelift::synth::{self, AmbiguityMode, SynthConfig};

fn stats_of(seqs: &[PoseSequence]) -> (f64, f64, f64) {
    // per-coordinate mean, std, and mean angle velocity
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut count = 0.0;
    let mut vel = 0.0;
    let mut vel_n = 0.0;
    for s in seqs {
        for v in s.data() {
            sum += v;
            sumsq += v * v;
            count += 1.0;
        }
        let av = angle_velocity(s).unwrap();
        vel += av.iter().sum::<f64>();
        vel_n += av.len() as f64;
    }
    let mean = sum / count;
    ((sumsq / count - mean * mean).sqrt(), mean, vel / vel_n)
}

fn fgd_parts(a: &GestureStats, b: &GestureStats) -> (f64, f64) {
    let mean_term: f64 = a.mu.iter().zip(b.mu.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let total = fgd(a, b).unwrap();
    (mean_term, total - mean_term)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gen_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2500);
    let w: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let t_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let model_dim: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let blocks: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2);

    let topo = SkeletonTopology::default_upper_body();
    let corpus = synth::generate(
        &SynthConfig { num_sequences: 650, ambiguity_mode: AmbiguityMode::Mirror, ..SynthConfig::default() },
        &topo,
        42,
    )
    .unwrap();
    let (train, test) = synth::split(&corpus, 0.8, 7).unwrap();

    let schedule = match args.get(7).map(String::as_str) {
        Some("q") => gesturelift::diffusion::ScheduleKind::QuadraticScaled,
        _ => gesturelift::diffusion::ScheduleKind::LinearScaled,
    };
    let config = GeneratorConfig {
        train_steps: gen_steps,
        guidance_weight: w,
        t_steps,
        lr,
        model_dim,
        attention_blocks: blocks,
        schedule,
        seed: 11,
        ..GeneratorConfig::default()
    };
    let t0 = std::time::Instant::now();
    let gen = diffusion::train(&train, &config).unwrap();
    println!(
        "train {:.0}s: loss {:.4}->{:.4}, heldout {:.4}->{:.4}",
        t0.elapsed().as_secs_f64(),
        gen.training_log.initial_loss,
        gen.training_log.final_loss,
        gen.training_log.heldout_initial,
        gen.training_log.heldout_final
    );

    let speech: Vec<_> = test.speech().collect();
    let mut samples = Vec::new();
    for i in 0..256 {
        samples.extend(gen.generate(speech[i % speech.len()], 1, 5000 + i as u64).unwrap());
    }

    let enc = train_encoder_with(&train, &EncoderConfig { train_steps: 2000, ..EncoderConfig::default() }, 5).unwrap();
    let gt: Vec<PoseSequence> = test.poses().cloned().collect();
    let ref_stats = gesture_stats(&enc, &gt).unwrap();
    let gen_stats = gesture_stats(&enc, &samples).unwrap();
    let (mean_t, trace_t) = fgd_parts(&ref_stats, &gen_stats);
    println!("FGD(gen3d) = {:.3} (mean term {:.3}, trace term {:.3})", mean_t + trace_t, mean_t, trace_t);

    let half = gt.len() / 2;
    let a = gesture_stats(&enc, &gt[..half]).unwrap();
    let b = gesture_stats(&enc, &gt[half..]).unwrap();
    println!("FGD floor (gt half vs half) = {:.3}", fgd(&a, &b).unwrap());

    let (gt_std, gt_mean, gt_vel) = stats_of(&gt);
    let (s_std, s_mean, s_vel) = stats_of(&samples);
    println!("GT:  coord mean {gt_mean:.4} std {gt_std:.4}, angle velocity {gt_vel:.4} rad/frame");
    println!("GEN: coord mean {s_mean:.4} std {s_std:.4}, angle velocity {s_vel:.4} rad/frame");
}
