use fasr_core::pipeline::{run_study, StudyConfig, SyntheticTaskSpec};

#[test]
#[ignore]
fn probe() {
    let mut cfg = StudyConfig::default();
    cfg.synth = SyntheticTaskSpec::default_with(0, 0, 0, 0, "");
    if let Ok(v) = std::env::var("TILT") {
        cfg.synth.speaker_tilt = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("SHIFT") {
        cfg.synth.env_shift = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("ENOISE") {
        cfg.synth.env_noise.1 = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("FNOISE") {
        cfg.synth.frame_noise = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TRSPK") {
        cfg.train_speakers = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TRENV") {
        cfg.train_envs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("EPOCHS") {
        cfg.train_epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("EST_LR") {
        cfg.estimation_initial_lr = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("EST_EPOCHS") {
        cfg.estimation_epochs = v.parse().unwrap();
    }
    let seed: u64 = std::env::var("SEED").map(|v| v.parse().unwrap()).unwrap_or(1);
    let t0 = std::time::Instant::now();
    let (out, diag) = run_study(&cfg, seed).unwrap();
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    println!("train losses: {:?}", diag.epoch_losses.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("{}", out.summary());
}
