use speech_mamba_core::checkpoint::{average, Checkpoint};
use speech_mamba_core::model::{randomize, ModelConfig, SpeechMambaModel};
use speech_mamba_core::nn::{Init, Module};
use speech_mamba_core::train::{
    dynamic_batches, evaluate, select_top_k, Batch, NoamSchedule, ObjectiveConfig, Trainer, TrainerConfig,
};
use speech_mamba_core::Error;

fn utterances(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut init = Init::new(seed);
    let feats = vec![
        init.uniform(&[24, 8], 1.0).to_vec(),
        init.uniform(&[17, 8], 1.0).to_vec(),
        init.uniform(&[30, 8], 1.0).to_vec(),
    ];
    (feats, vec![vec![3, 4, 4], vec![5], vec![6, 3]])
}

fn batch(feats: &[Vec<f64>], targets: &[Vec<usize>], idx: &[usize]) -> Batch {
    Batch::new(
        idx.iter().map(|i| format!("u{i}")).collect(),
        &idx.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>(),
        8,
        idx.iter().map(|&i| targets[i].clone()).collect(),
    )
    .unwrap()
}

fn model(seed: u64) -> SpeechMambaModel {
    let m = SpeechMambaModel::new(ModelConfig::tiny(7), seed).unwrap();
    randomize(&m, seed, 0.3);
    m
}

fn grads(t: &Trainer<'_>) -> Vec<f64> {
    t.params().iter().flat_map(|p| p.grad()).collect()
}

#[test]
fn accumulation_matches_one_large_batch() {
    let (feats, targets) = utterances(1);
    let m = model(2);
    let trainer = Trainer::new(&m, TrainerConfig::default(), 0);
    let whole = trainer.accumulate(&[batch(&feats, &targets, &[0, 1, 2])]).unwrap();
    let g_whole = grads(&trainer);
    trainer.zero_grad();
    let split = trainer
        .accumulate(&[batch(&feats, &targets, &[0]), batch(&feats, &targets, &[1, 2])])
        .unwrap();
    let g_split = grads(&trainer);
    assert!((whole.combined - split.combined).abs() <= 1e-9);
    let max = g_whole.iter().zip(&g_split).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(max <= 1e-6, "max grad diff {max}");
}

#[test]
fn ctc_only_weight_leaves_decoder_untouched() {
    let (feats, targets) = utterances(3);
    let m = model(4);
    let cfg = TrainerConfig {
        objective: ObjectiveConfig {
            alpha: 1.0,
            label_smoothing: 0.1,
        },
        ..TrainerConfig::default()
    };
    let trainer = Trainer::new(&m, cfg, 0);
    let loss = trainer.accumulate(&[batch(&feats, &targets, &[0, 1])]).unwrap();
    assert_eq!(loss.s2s, 0.0);
    for (name, t) in m.parameters() {
        if name.starts_with("decoder") {
            assert!(t.grad().iter().all(|&g| g == 0.0), "{name}");
        }
    }
    assert!(m.ctc_head.weight.grad().iter().any(|&g| g != 0.0));
}

#[test]
fn loss_falls_and_training_is_reproducible() {
    let (feats, targets) = utterances(5);
    let group = [batch(&feats, &targets, &[0, 1, 2])];
    let cfg = TrainerConfig {
        schedule: NoamSchedule {
            peak_lr: 5e-3,
            warmup_steps: 5,
        },
        ..TrainerConfig::default()
    };
    let run = || {
        let m = SpeechMambaModel::new(
            ModelConfig {
                dropout_p: 0.1,
                ..ModelConfig::tiny(7)
            },
            6,
        )
        .unwrap();
        let mut t = Trainer::new(&m, cfg, 7);
        let log: Vec<(f64, f64)> = (0..30)
            .map(|_| {
                let r = t.step(&group).unwrap();
                (r.loss.combined, r.grad_norm)
            })
            .collect();
        (log, Checkpoint::from_module(&m).unwrap().encode())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert!(a[29].0 < a[0].0);
}

#[test]
fn impossible_alignment_is_an_error() {
    let feats = vec![Init::new(1).uniform(&[8, 8], 1.0).to_vec()];
    let b = Batch::new(vec!["short".into()], &feats, 8, vec![vec![3, 3, 4]]).unwrap();
    let m = model(8);
    let trainer = Trainer::new(&m, TrainerConfig::default(), 0);
    assert!(matches!(trainer.accumulate(&[b]), Err(Error::ImpossibleAlignment { .. })));
}

#[test]
fn checkpoint_round_trip_and_average() {
    let a = model(9);
    let b = model(10);
    let ca = Checkpoint::from_module(&a).unwrap();
    let bytes = ca.encode();
    let fresh = SpeechMambaModel::new(ModelConfig::tiny(7), 11).unwrap();
    Checkpoint::decode(&bytes).unwrap().load_into(&fresh).unwrap();
    assert_eq!(Checkpoint::from_module(&fresh).unwrap().encode(), bytes);

    let avg = average(&[ca.clone(), Checkpoint::from_module(&b).unwrap()]).unwrap();
    let pa = a.ctc_head.weight.to_vec();
    let pb = b.ctc_head.weight.to_vec();
    let got = &avg.entries["ctc_head.weight"].values;
    for i in 0..pa.len() {
        assert!((got[i] - 0.5 * (pa[i] + pb[i])).abs() < 1e-15);
    }
    let other = SpeechMambaModel::new(ModelConfig::tiny(9), 0).unwrap();
    assert!(ca.load_into(&other).is_err());
}

#[test]
fn evaluation_and_selection() {
    let (feats, targets) = utterances(12);
    let m = model(13);
    let obj = ObjectiveConfig::default();
    let one = evaluate(&m, &[batch(&feats, &targets, &[0, 1, 2])], &obj).unwrap();
    let two = evaluate(&m, &[batch(&feats, &targets, &[0]), batch(&feats, &targets, &[1, 2])], &obj).unwrap();
    assert!((one.combined - two.combined).abs() < 1e-9);

    let (best, short) = select_top_k(&[0.5, 0.2, 0.9, 0.2], 3).unwrap();
    assert_eq!((best, short), (vec![1, 3, 0], false));
    let (best, short) = select_top_k(&[0.3, 0.1], 10).unwrap();
    assert_eq!((best, short), (vec![1, 0], true));
    assert!(select_top_k(&[f64::NAN], 1).is_err());
}

#[test]
fn dynamic_batches_never_exceed_budget() {
    let durations: Vec<f64> = (0..40).map(|i| 1.0 + ((i * 37) % 11) as f64 * 0.7).collect();
    let (batches, dropped) = dynamic_batches(&durations, 12.0, 5);
    assert!(dropped.is_empty());
    let mut seen = vec![0; durations.len()];
    for b in &batches {
        assert!(b.iter().map(|&i| durations[i]).sum::<f64>() <= 12.0);
        assert!(b.len() <= 5);
        b.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&c| c == 1));
}
