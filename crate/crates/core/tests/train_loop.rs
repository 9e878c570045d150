use std::fs;

use fastmoco::config::RunConfig;
use fastmoco::data::synth_dataset;
use fastmoco::nn::{DualBranch, EncoderDef, HeadDef, ParamKind, ParamStore};
use fastmoco::train::{
    self, checkpoint_config, cosine_lr, embed, knn_checkpoint, linear_eval_checkpoint, load_encoder, pretrain,
    probe_config, Checkpoint, Sgd, SgdConfig, METRICS_HEADER,
};
use fastmoco::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "encoder_width=4",
        "batch=8",
        "epochs=2",
        "warmup_epochs=1",
        "synth_train=32",
        "synth_test=20",
        "log_every=1",
        "checkpoint_every=1",
        "probe_epochs=3",
        "probe_batch=8",
        "knn_k=3",
    ])
    .unwrap();
    c.output_dir = dir.to_string_lossy().into_owned();
    c
}

#[test]
fn pretrain_writes_artifacts_and_is_reproducible() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let train = synth_dataset(32, 1, true);
    let test = synth_dataset(20, 2, true);
    let mut seen = 0;
    let a = pretrain(&tiny(d1.path()), &train, &mut |_| seen += 1).unwrap();
    assert_eq!((a.steps, a.metrics.len(), seen), (8, 8, 8));
    assert!(a.final_loss.is_finite());
    for f in ["config.txt", "metrics.csv", "ckpt_epoch001.fmck", "ckpt_epoch002.fmck", "final.fmck"] {
        assert!(d1.path().join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
    let cfg = tiny(d1.path());
    assert_eq!(csv.lines().next().unwrap(), format!("# config_hash={}", cfg.hash()));
    assert_eq!(csv.lines().nth(1).unwrap(), METRICS_HEADER);
    let steps: Vec<usize> = a.metrics.iter().map(|m| m.step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    assert!(a.metrics.iter().all(|m| m.embedding_std >= 0.0 && m.lr >= 0.0));

    pretrain(&tiny(d2.path()), &train, &mut |_| {}).unwrap();
    assert_eq!(csv, fs::read_to_string(d2.path().join("metrics.csv")).unwrap());
    // the embedded config differs only in output_dir
    let weights = |d: &std::path::Path| {
        let mut c = Checkpoint::load(&d.join("final.fmck")).unwrap();
        c.entries.retain(|e| !e.name.starts_with("meta."));
        c
    };
    assert_eq!(weights(d1.path()), weights(d2.path()));

    let ckpt = Checkpoint::load(&d1.path().join("final.fmck")).unwrap();
    assert_eq!(ckpt.config_hash().unwrap(), cfg.hash());
    assert_eq!(checkpoint_config(&ckpt).unwrap().hash(), cfg.hash());
    let probe = probe_config(&cfg);
    let top1 = linear_eval_checkpoint(&ckpt, &train, &test, &probe).unwrap();
    assert_eq!(top1, linear_eval_checkpoint(&ckpt, &train, &test, &probe).unwrap());
    assert!((0.0..=100.0).contains(&top1));
    let knn = knn_checkpoint(&ckpt, &train, &test, 3).unwrap();
    assert!((0.0..=100.0).contains(&knn));
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.max_steps = 2;
    let train = synth_dataset(32, 1, true);
    let out = pretrain(&cfg, &train, &mut |_| {}).unwrap();
    let (encoder, mut store) = load_encoder::<f32>(&out.checkpoint).unwrap();
    let before: Vec<Vec<f32>> = store.entries().iter().map(|e| e.value.data().to_vec()).collect();
    embed(&encoder, &mut store, &train, &cfg.normalization(), 7).unwrap();
    let after: Vec<Vec<f32>> = store.entries().iter().map(|e| e.value.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn checkpoint_from_another_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.max_steps = 1;
    let train = synth_dataset(32, 1, true);
    let mut ckpt = pretrain(&cfg, &train, &mut |_| {}).unwrap().checkpoint;
    let wider = {
        let mut w = cfg.clone();
        w.encoder_width = 5;
        w
    };
    let idx = ckpt.entries.iter().position(|e| e.name == train::checkpoint::META_CONFIG).unwrap();
    ckpt.entries.remove(idx);
    ckpt.push_bytes(train::checkpoint::META_CONFIG, wider.to_text().as_bytes());
    let err = load_encoder::<f32>(&ckpt).unwrap_err();
    assert!(err.to_string().contains("dimension mismatch"), "{err}");
}

#[test]
fn oversized_batch_and_bad_config_fail_early() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.batch = 64;
    assert!(pretrain(&cfg, &synth_dataset(32, 1, true), &mut |_| {}).is_err());
    cfg.batch = 8;
    cfg.combine_n = 5;
    let err = pretrain(&cfg, &synth_dataset(32, 1, true), &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("combine_n"));
}

fn small_branch(alpha: f64) -> DualBranch<f32> {
    let enc = EncoderDef {
        in_channels: 3,
        stem_channels: 4,
        stage_channels: vec![4, 6],
        blocks_per_stage: 1,
    };
    let head = HeadDef {
        in_dim: 6,
        proj_hidden: 8,
        out_dim: 4,
        pred_hidden: 8,
    };
    DualBranch::new(&enc, &head, alpha, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn perturb_online(b: &mut DualBranch<f32>) {
    for (i, e) in b.online.entries_mut().iter_mut().enumerate() {
        if e.kind.trainable() {
            e.value = e.value.map(|v| v + 0.5 + i as f32 * 0.01);
        }
    }
}

#[test]
fn zero_lr_step_keeps_online_but_ema_moves_target() {
    let mut b = small_branch(0.9);
    perturb_online(&mut b);
    let online_before: Vec<Tensor<f32>> = b.online.entries().iter().map(|e| e.value.clone()).collect();
    for e in b.online.entries_mut() {
        e.grad = Some(Tensor::ones(e.value.shape()));
    }
    let mut sgd = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 1e-4, decay_norm_bias: false, clip_norm: Some(1.0) });
    sgd.step(&mut b.online, 0.0).unwrap();
    let online_after: Vec<Tensor<f32>> = b.online.entries().iter().map(|e| e.value.clone()).collect();
    assert_eq!(online_before, online_after);
    let target_before = b.target.clone();
    b.ema_update();
    let moved = b
        .target
        .entries()
        .iter()
        .zip(target_before.entries())
        .any(|(x, y)| x.value != y.value);
    assert!(moved);
}

fn trainable_values(s: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    s.entries()
        .iter()
        .filter(|e| e.kind != ParamKind::Buffer)
        .map(|e| (e.name.clone(), e.value.data().to_vec()))
        .collect()
}

#[test]
fn ema_matches_closed_form_over_100_steps() {
    for alpha in [0.9, 0.99] {
        let mut b = small_branch(alpha);
        let t0 = trainable_values(&b.target);
        perturb_online(&mut b);
        for _ in 0..100 {
            b.ema_update();
        }
        let ak = alpha.powi(100);
        for (name, t) in trainable_values(&b.target) {
            let init = &t0.iter().find(|(n, _)| *n == name).unwrap().1;
            let rest = name.strip_prefix("target.").unwrap();
            let o = b.online.get(b.online.find(&format!("online.{rest}")).unwrap()).data();
            for ((tv, iv), ov) in t.iter().zip(init).zip(o) {
                let expect = ak * f64::from(*iv) + (1.0 - ak) * f64::from(*ov);
                assert!((f64::from(*tv) - expect).abs() < 1e-6, "{name}: {tv} vs {expect}");
            }
        }
    }
}

#[test]
fn clipping_never_grows_norm_and_keeps_direction() {
    for scale in [0.01, 0.5, 1.0, 3.0, 100.0] {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[3]), ParamKind::Weight);
        let g = [scale * 1.0, -scale * 2.0, scale * 2.0];
        s.entries_mut()[id.index()].grad = Some(Tensor::from_f64(&[3], &g).unwrap());
        let mut sgd = Sgd::new(SgdConfig { momentum: 0.0, weight_decay: 0.0, decay_norm_bias: false, clip_norm: Some(1.0) });
        let stats = sgd.step(&mut s, 1.0).unwrap();
        let step: Vec<f64> = s.get(id).data().iter().map(|v| -v).collect();
        let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= stats.grad_norm.min(1.0) + 1e-12);
        for (a, b) in step.iter().zip(&g) {
            assert!((a * stats.grad_norm - b * norm).abs() < 1e-9);
        }
    }
    assert_eq!(cosine_lr(0, 10, 0.1, 2, 0.025).unwrap(), 0.025);
}
