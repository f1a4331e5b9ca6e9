use proptest::prelude::*;

use unic_core::checkpoint;
use unic_core::model::{ArchOptions, ConditionBundle, ModelConfig, Stage, UnicModel};
use unic_core::numerics::rng::rng;
use unic_core::sampling::{euler_sample, GuidanceSpec};
use unic_core::synthdata::{generate_dataset, generate_pair, vocabulary, Dataset, MixtureSpec, TaskKind};
use unic_core::training::{
    flow_loss, gaussian_image, sample_timestep, train_loop, AdamWConfig, TrainConfig, TrainSample,
};

fn small(vocab: usize) -> ModelConfig {
    ModelConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        patch: 4,
        image_size: 32,
        channels: 3,
        vocab_size: vocab,
        max_text_len: 32,
        init_std: 0.02,
    }
}

fn samples(n: u64, only: Option<TaskKind>) -> Vec<TrainSample> {
    let vocab = vocabulary();
    (0..n)
        .map(|i| TrainSample::from_pair(&generate_pair(11, i, &MixtureSpec::default(), only).unwrap(), &vocab).unwrap())
        .collect()
}

fn mean_loss(m: &UnicModel, data: &[TrainSample]) -> f64 {
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let mut r = rng(1000 + i as u64);
        let t = sample_timestep(&mut r);
        let eps = gaussian_image(&mut r, &m.config.image_shape());
        total += flow_loss(m, s, t, &eps, &s.bundle()).unwrap();
    }
    total / data.len() as f64
}

#[test]
fn base_training_reduces_flow_loss() {
    let data = samples(8, Some(TaskKind::Edge));
    let mut m = UnicModel::new(small(vocabulary().len()), ArchOptions::default(), 3).unwrap();
    m.set_stage(Stage::Base);
    let before = mean_loss(&m, &data);
    let cfg = TrainConfig {
        steps: 200,
        batch: 4,
        seed: 2,
        log_every: 100,
        optim: AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let log = train_loop(&mut m, &data, &cfg, None, None).unwrap();
    assert_eq!(log.iter().map(|e| e.step).collect::<Vec<_>>(), [100, 200]);
    let after = mean_loss(&m, &data);
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn training_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(4, None);
    let mut m = UnicModel::new(small(vocabulary().len()), ArchOptions::default(), 4).unwrap();
    m.init_adapter_from_base().unwrap();
    let cfg = TrainConfig {
        steps: 5,
        batch: 2,
        seed: 8,
        log_every: 2,
        checkpoint_every: 2,
        ..Default::default()
    };
    let log = train_loop(&mut m, &data, &cfg, Some(dir.path()), None).unwrap();
    assert_eq!(log.iter().map(|e| e.step).collect::<Vec<_>>(), [2, 4, 5]);
    let text = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
    assert_eq!(text.lines().count(), 3);
    for name in [
        "checkpoint_step000002.unic",
        "checkpoint_step000004.unic",
        "checkpoint.unic",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let mut fresh = UnicModel::new(small(vocabulary().len()), ArchOptions::default(), 99).unwrap();
    checkpoint::load(&dir.path().join("checkpoint.unic"), fresh.store_mut(), true).unwrap();
    assert_eq!(fresh.store().checksum(), m.store().checksum());

    let b = ConditionBundle::new(
        data[0].prompt.clone(),
        data[0].instruction.clone(),
        data[0].condition.clone(),
    );
    let spec = GuidanceSpec::new(1.3, 3.0, 2, 5).unwrap();
    assert_eq!(
        euler_sample(&m, &b, &spec).unwrap(),
        euler_sample(&fresh, &b, &spec).unwrap()
    );
}

#[test]
fn dataset_on_disk_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let mix = MixtureSpec::default();
    generate_dataset(dir.path(), 5, &mix, None, 21).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.len(), 5);
    for i in 0..5 {
        let disk = ds.pair(i).unwrap();
        let mem = generate_pair(21, i as u64, &mix, None).unwrap();
        assert_eq!(disk.target, mem.target);
        assert_eq!(disk.condition, mem.condition);
        assert_eq!(disk.instruction, mem.instruction);
        assert_eq!(disk.task, mem.task);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairs_are_deterministic_and_well_formed(seed in any::<u64>(), index in 0u64..1000) {
        let mix = MixtureSpec::default();
        let a = generate_pair(seed, index, &mix, None).unwrap();
        let b = generate_pair(seed, index, &mix, None).unwrap();
        prop_assert_eq!(&a.target, &b.target);
        prop_assert_eq!(&a.condition, &b.condition);
        prop_assert_eq!((a.target.width, a.target.height), (32, 32));
        prop_assert_eq!((a.condition.width, a.condition.height), (32, 32));
        prop_assert!(a.task.templates().contains(&a.instruction.as_str()));
        let vocab = vocabulary();
        prop_assert!(TrainSample::from_pair(&a, &vocab).is_ok());
    }
}
