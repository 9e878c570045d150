//! Pre-training loop, checkpoints and frozen-feature evaluation.

pub mod checkpoint;
mod eval;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{write_atomic, DatasetKind, RunConfig};
use crate::data::{build_views, epoch_permutation, load_cifar_split, synth_dataset, Dataset, ViewBatch};
use crate::error::{Error, Result};
use crate::nn::{DualBranch, Encoder, ParamStore};
use crate::pipeline;
use crate::tensor::{DType, Scalar, Tensor};

pub use checkpoint::{Checkpoint, Entry};
pub use eval::{accuracy, collapse_metric, embed, knn_probe, linear_eval, LinearProbe, ProbeConfig};
pub use optim::{cosine_lr, Sgd, SgdConfig, SgdStats};

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,embedding_std,grad_norm,wall_time_s";

/// Seeds of the bundled synthetic splits; fixed so every run sees the same
/// images whatever its training seed.
pub const SYNTH_TRAIN_SEED: u64 = 0x5EED_7A1A;
pub const SYNTH_TEST_SEED: u64 = 0x5EED_7E57;

/// Prefetched batches waiting for the optimizer.
const PREFETCH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub embedding_std: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
            self.epoch, self.step, self.lr, self.loss, self.embedding_std, self.grad_norm, self.wall_time_s
        )
    }
}

/// Training and held-out splits named by `cfg`.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synth => Ok((
            synth_dataset(cfg.synth_train, SYNTH_TRAIN_SEED, true),
            synth_dataset(cfg.synth_test, SYNTH_TEST_SEED, true),
        )),
        DatasetKind::Cifar => {
            let dir = cfg.resolve_data_dir()?;
            let mut train = load_cifar_split(&dir, true)?;
            if cfg.train_subset > 0 {
                train.records.truncate(cfg.train_subset);
            }
            Ok((train, load_cifar_split(&dir, false)?))
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Final weights plus the embedded config.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub steps: usize,
    pub final_loss: f64,
}

/// Snapshot of both branches tagged with the run config.
pub fn snapshot<T: Scalar>(cfg: &RunConfig, branch: &DualBranch<T>) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.push_bytes(checkpoint::META_CONFIG, cfg.to_text().as_bytes());
    let hash = cfg.hash();
    let raw: Vec<u8> = (0..hash.len() / 2)
        .map(|i| u8::from_str_radix(&hash[2 * i..2 * i + 2], 16).expect("hex digest"))
        .collect();
    c.push_bytes(checkpoint::META_HASH, &raw);
    c.push_store(&branch.online);
    c.push_store(&branch.target);
    c
}

/// Runs self-supervised pre-training on `train`, writing the config
/// snapshot, metrics CSV and checkpoints under `cfg.output_dir`.
/// `observer` sees every metrics row as it is logged.
pub fn pretrain(cfg: &RunConfig, train: &Dataset, observer: &mut dyn FnMut(&MetricsRecord)) -> Result<PretrainOutcome> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => pretrain_typed::<f32>(cfg, train, observer),
        DType::F64 => pretrain_typed::<f64>(cfg, train, observer),
    }
}

fn pretrain_typed<T: Scalar>(
    cfg: &RunConfig,
    train: &Dataset,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<PretrainOutcome> {
    if train.len() < cfg.batch {
        return Err(Error::Invalid(format!("{} training images cannot fill a batch of {}", train.len(), cfg.batch)));
    }
    let out = PathBuf::from(&cfg.output_dir);
    let hash = cfg.hash();
    write_atomic(&out.join("config.txt"), format!("# config_hash={hash}\n{}", cfg.to_text()).as_bytes())?;

    let spec = cfg.pipeline_spec()?;
    let needs = cfg.pipeline.view_needs(cfg.multicrop);
    let (aug, norm) = (cfg.augment(), cfg.normalization());
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(u64::MAX);
    let mut branch = DualBranch::<T>::new(&cfg.encoder_def(), &cfg.head_def(), cfg.alpha, &mut init_rng)?;
    let mut sgd = Sgd::<T>::new(SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        decay_norm_bias: cfg.wd_norm_bias,
        clip_norm: Some(cfg.clip_norm),
    });

    let steps_per_epoch = train.len() / cfg.batch;
    let mut total = cfg.epochs * steps_per_epoch;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let schedule: Vec<(usize, Vec<usize>)> = (0..cfg.epochs)
        .flat_map(|e| {
            let perm = epoch_permutation(cfg.seed, e as u64, train.len());
            (0..steps_per_epoch)
                .map(move |s| (e, perm[s * cfg.batch..(s + 1) * cfg.batch].to_vec()))
                .collect::<Vec<_>>()
        })
        .take(total)
        .collect();

    let mut csv = format!("# config_hash={hash}\n{METRICS_HEADER}\n");
    let mut metrics = Vec::new();
    let mut final_loss = f64::NAN;
    let started = Instant::now();

    std::thread::scope(|scope| -> Result<()> {
        // one producer builds views ahead; this thread is the only mutator
        let (tx, rx) = mpsc::sync_channel::<Result<ViewBatch<T>>>(PREFETCH);
        let schedule_ref = &schedule;
        let (aug_ref, norm_ref) = (&aug, &norm);
        scope.spawn(move || {
            for (epoch, idx) in schedule_ref {
                let batch = build_views::<T>(train, idx, cfg.seed, *epoch as u64, aug_ref, norm_ref, needs);
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });

        for (step, (epoch, idx)) in schedule.iter().enumerate() {
            let batch = rx.recv().map_err(|_| Error::Invalid("view producer stopped".into()))??;
            let lr = cosine_lr(step, total, cfg.lr0, warmup, cfg.lr_warmup_start)?;
            let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0057_E9_5EED);
            step_rng.set_stream(step as u64);
            let fwd = pipeline::forward(&spec, &mut branch, &batch, &mut step_rng)?;
            let loss = fwd.loss_value();
            if !loss.is_finite() {
                return Err(nan_abort(cfg, &branch, &out, step, idx, &format!("loss {loss}")));
            }
            let log_now = (step + 1) % cfg.log_every == 0 || step + 1 == total;
            let embedding_std = if log_now { collapse_metric(&fwd.online_a)? } else { 0.0 };
            let grads = fwd.tape.backward(fwd.loss)?;
            branch.online.zero_grad();
            branch.online.accumulate(&grads);
            let stats = match sgd.step(&mut branch.online, lr) {
                Ok(s) => s,
                Err(Error::NonFinite(what)) => return Err(nan_abort(cfg, &branch, &out, step, idx, &what)),
                Err(e) => return Err(e),
            };
            if !cfg.freeze_target {
                branch.ema_update();
            }
            final_loss = loss;

            if log_now {
                let rec = MetricsRecord {
                    epoch: *epoch,
                    step: step + 1,
                    lr,
                    loss,
                    embedding_std,
                    grad_norm: stats.grad_norm,
                    wall_time_s: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
                };
                let _ = writeln!(csv, "{}", rec.csv_row());
                write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
                observer(&rec);
                metrics.push(rec);
            }
            let epoch_done = (step + 1) % steps_per_epoch == 0;
            if epoch_done && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                snapshot(cfg, &branch).save(&out.join(format!("ckpt_epoch{:03}.fmck", epoch + 1)))?;
            }
        }
        drop(rx);
        Ok(())
    })?;

    let checkpoint = snapshot(cfg, &branch);
    checkpoint.save(&out.join("final.fmck"))?;
    Ok(PretrainOutcome {
        checkpoint,
        metrics,
        steps: total,
        final_loss,
    })
}

/// Dumps the last good weights and the offending batch, then builds the
/// error to abort with.
fn nan_abort<T: Scalar>(cfg: &RunConfig, branch: &DualBranch<T>, out: &Path, step: usize, idx: &[usize], what: &str) -> Error {
    let ckpt = out.join("nan_last_good.fmck");
    let listing = out.join("nan_batch.txt");
    let indices: Vec<String> = idx.iter().map(usize::to_string).collect();
    let dumped = snapshot(cfg, branch)
        .save(&ckpt)
        .and_then(|_| write_atomic(&listing, format!("step {}\n{}\n", step + 1, indices.join(",")).as_bytes()));
    let note = match dumped {
        Ok(()) => format!("dumped {} and {}", ckpt.display(), listing.display()),
        Err(e) => format!("dump failed: {e}"),
    };
    Error::NonFinite(format!("{what} at step {}; {note}", step + 1))
}

/// Config embedded in a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let text = ckpt
        .config_text()
        .ok_or_else(|| Error::Invalid("checkpoint has no embedded config".into()))?;
    RunConfig::parse(&text)
}

/// The online encoder of a checkpoint, every tensor checked against the
/// architecture its config describes.
pub fn load_encoder<T: Scalar>(ckpt: &Checkpoint) -> Result<(Encoder, ParamStore<T>)> {
    let cfg = checkpoint_config(ckpt)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::build(&cfg.encoder_def(), &mut store, "online.encoder", &mut rng);
    let tensors = ckpt.tensors::<T>("online.encoder.")?;
    let loaded = store.load_named(&tensors)?;
    if loaded != store.len() || tensors.len() != store.len() {
        return Err(Error::shape(
            "load_encoder",
            format!("checkpoint has {} encoder tensors, model expects {}", tensors.len(), store.len()),
        ));
    }
    Ok((encoder, store))
}

const EMBED_CHUNK: usize = 250;

/// Frozen encoder embeddings of each dataset, computed in the checkpoint's
/// dtype.
pub fn checkpoint_embeddings(ckpt: &Checkpoint, sets: &[&Dataset]) -> Result<Vec<Tensor<f64>>> {
    let cfg = checkpoint_config(ckpt)?;
    fn run<T: Scalar>(ckpt: &Checkpoint, sets: &[&Dataset], cfg: &RunConfig) -> Result<Vec<Tensor<f64>>> {
        let (encoder, mut store) = load_encoder::<T>(ckpt)?;
        sets.iter()
            .map(|d| embed(&encoder, &mut store, d, &cfg.normalization(), EMBED_CHUNK))
            .collect()
    }
    match cfg.dtype {
        DType::F32 => run::<f32>(ckpt, sets, &cfg),
        DType::F64 => run::<f64>(ckpt, sets, &cfg),
    }
}

pub fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        batch: cfg.probe_batch,
        momentum: 0.9,
        seed: cfg.seed,
    }
}

/// Linear-probe top-1 (percent) of a checkpoint's frozen encoder.
pub fn linear_eval_checkpoint(ckpt: &Checkpoint, train: &Dataset, test: &Dataset, probe: &ProbeConfig) -> Result<f64> {
    let e = checkpoint_embeddings(ckpt, &[train, test])?;
    let classes = train.labels().into_iter().chain(test.labels()).max().unwrap_or(0) + 1;
    linear_eval(&e[0], &train.labels(), &e[1], &test.labels(), classes, probe)
}

/// k-NN top-1 (percent) with the training split as gallery.
pub fn knn_checkpoint(ckpt: &Checkpoint, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    let e = checkpoint_embeddings(ckpt, &[train, test])?;
    knn_probe(&e[0], &train.labels(), &e[1], &test.labels(), k)
}
