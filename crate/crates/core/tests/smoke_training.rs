use maskdiff::nn::AdamConfig;
use maskdiff::shapesdata::{Dataset, DatasetSpec};
use maskdiff::trainer::{train_one, TrainConfig, TrainState};
use maskdiff::{DenoiserConfig, LadderConfig, ScheduleConfig, Vocabulary};

const STEPS: usize = 500;
const WINDOW: usize = 10;
/// Calibrated once on this configuration (seed 0): the trailing average fell
/// from 1.00 to 0.58. Pinned at the required 30% drop.
const MIN_DROP: f64 = 0.30;

#[test]
fn five_hundred_steps_cut_the_loss() {
    let data = Dataset::generate(&DatasetSpec {
        resolution: 16,
        size_min: 8,
        size_max: 12,
        count: 500,
        ..DatasetSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        optimizer: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        schedule: ScheduleConfig {
            steps: 50,
            ..ScheduleConfig::default()
        },
        ladder: LadderConfig::for_resolution(16),
        model: DenoiserConfig {
            resolution: 16,
            base_width: 8,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![8],
            head_dim: 8,
            embed_dim: 16,
            groups: 4,
            timesteps: 50,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg).unwrap();
    let sched = state.schedule().unwrap();
    let vocab = Vocabulary::default();
    let losses: Vec<f64> = (0..STEPS)
        .map(|_| {
            train_one(&mut state, &data.samples, &vocab, &sched)
                .unwrap()
                .loss
                .total
        })
        .collect();
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let early = avg(&losses[..WINDOW]);
    let late = avg(&losses[STEPS - WINDOW..]);
    println!("trailing loss average: step {WINDOW} {early:.4}, step {STEPS} {late:.4}");
    assert!(late <= (1.0 - MIN_DROP) * early, "{early} -> {late}");
}
