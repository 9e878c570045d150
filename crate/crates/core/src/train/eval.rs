use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::cosine_lr;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::nn::{BnPhase, Ctx, Encoder, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor};

/// Pooled encoder embeddings of every image in `data`, batch norms in eval
/// mode. Parameters are only read.
pub fn embed<T: Scalar>(
    encoder: &Encoder,
    store: &mut ParamStore<T>,
    data: &Dataset,
    norm: &Normalization,
    chunk: usize,
) -> Result<Tensor<f64>> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot embed an empty dataset".into()));
    }
    let dim = encoder.def().embedding_dim();
    let mut rows = Vec::with_capacity(data.len() * dim);
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, store, BnPhase::Eval);
        let x = ctx.tape.constant(data.tensor::<T>(part, norm)?);
        let e = encoder.encode(&mut ctx, x)?;
        rows.extend(tape.value(e).to_f64_vec());
    }
    Tensor::new(&[data.len(), dim], rows)
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// l2-normalised rows. Around `1/sqrt(d)` for spread-out embeddings and 0
/// for collapsed ones.
pub fn collapse_metric<T: Scalar>(emb: &Tensor<T>) -> Result<f64> {
    let (n, d) = (emb.rows(), emb.row_len());
    if emb.rank() != 2 || n < 2 {
        return Err(Error::Invalid(format!("collapse metric needs N >= 2 rows, got {:?}", emb.shape())));
    }
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for r in 0..n {
        let row: Vec<f64> = emb.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, v) in row.iter().enumerate() {
            let u = v / norm;
            sum[j] += u;
            sq[j] += u * u;
        }
    }
    let nf = n as f64;
    Ok(sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| (q / nf - (s / nf) * (s / nf)).max(0.0).sqrt())
        .sum::<f64>()
        / d as f64)
}

/// Cosine-similarity k-nearest-neighbour accuracy in percent. Votes are
/// counted per class; ties go to the larger summed similarity, then the
/// smaller label.
pub fn knn_probe(
    gallery: &Tensor<f64>,
    gallery_labels: &[usize],
    query: &Tensor<f64>,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if gallery.rows() == 0 || gallery_labels.is_empty() {
        return Err(Error::Invalid("empty k-NN gallery".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if gallery.rows() != gallery_labels.len() || query.rows() != query_labels.len() || gallery.row_len() != query.row_len() {
        return Err(Error::shape("knn_probe", "embeddings and labels disagree"));
    }
    let unit = |t: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let (g, q) = (unit(gallery), unit(query));
    let classes = gallery_labels.iter().max().copied().unwrap_or(0) + 1;
    let k = k.min(g.len());
    let mut correct = 0;
    for (qi, qv) in q.iter().enumerate() {
        let mut sims: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .map(|(gi, gv)| (qv.iter().zip(gv).map(|(a, b)| a * b).sum(), gi))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &(s, gi) in &sims[..k] {
            let v = &mut votes[gallery_labels[gi]];
            v.0 += 1;
            v.1 += s;
        }
        let best = (0..classes)
            .max_by(|&a, &b| {
                votes[a].0.cmp(&votes[b].0).then(votes[a].1.total_cmp(&votes[b].1)).then(b.cmp(&a))
            })
            .expect("at least one class");
        if best == query_labels[qi] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / q.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub seed: u64,
}

/// Linear classifier over standardised frozen features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
}

fn standardize(x: &Tensor<f64>, mean: &[f64], inv_std: &[f64]) -> Tensor<f64> {
    let d = mean.len();
    Tensor::from_fn(x.shape(), |i| (x.data()[i] - mean[i % d]) * inv_std[i % d])
}

impl LinearProbe {
    /// Trains with softmax cross-entropy, SGD with momentum, cosine decay
    /// and no weight decay.
    pub fn train(x: &Tensor<f64>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = (x.rows(), x.row_len());
        if n == 0 || n != labels.len() || labels.iter().any(|&l| l >= classes) {
            return Err(Error::shape("linear_probe", format!("{n} rows, {} labels", labels.len())));
        }
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (j, v) in x.row(r).iter().enumerate() {
                mean[j] += v / n as f64;
            }
        }
        for r in 0..n {
            for (j, v) in x.row(r).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
        let xs = standardize(x, &mean, &inv_std);
        let mut w = Tensor::<f64>::zeros(&[d, classes]);
        let mut b = Tensor::<f64>::zeros(&[classes]);
        let (mut mw, mut mb) = (Tensor::<f64>::zeros(&[d, classes]), Tensor::<f64>::zeros(&[classes]));
        let batch = cfg.batch.min(n).max(1);
        let steps_per_epoch = n.div_ceil(batch);
        let total = cfg.epochs * steps_per_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for part in order.chunks(batch) {
                let lr = cosine_lr(step, total, cfg.lr, 0, cfg.lr)?;
                let mut tape = Tape::new();
                let xb = tape.constant(xs.select_rows(part)?);
                let wv = tape.param(w.clone(), 0);
                let bv = tape.param(b.clone(), 1);
                let logits = tape.matmul(xb, wv)?;
                let logits = tape.add_bias(logits, bv)?;
                let yb: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
                let loss = tape.softmax_cross_entropy(logits, &yb)?;
                let grads = tape.backward(loss)?;
                for (key, g) in grads.params() {
                    let (p, m) = if key == 0 { (&mut w, &mut mw) } else { (&mut b, &mut mb) };
                    for ((pv, mv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *mv = cfg.momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
                step += 1;
            }
        }
        Ok(Self { mean, inv_std, w, b })
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        let logits = standardize(x, &self.mean, &self.inv_std).matmul(&self.w)?;
        let c = self.b.len();
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..c)
                    .max_by(|&i, &j| (row[i] + self.b.data()[i]).total_cmp(&(row[j] + self.b.data()[j])).then(j.cmp(&i)))
                    .expect("classes")
            })
            .collect())
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

/// Top-1 (percent) of a linear probe trained on `train` and scored on
/// `test` embeddings.
pub fn linear_eval(
    train: &Tensor<f64>,
    train_labels: &[usize],
    test: &Tensor<f64>,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.row_len() != test.row_len() {
        return Err(Error::shape("linear_eval", "train and test embedding dims differ"));
    }
    let probe = LinearProbe::train(train, train_labels, classes, cfg)?;
    Ok(accuracy(&probe.predict(test)?, test_labels))
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn collapse_metric_oracles() {
        assert_eq!(collapse_metric(&Tensor::<f64>::ones(&[5, 4])).unwrap(), 0.0);
        let g = gaussian(4000, 128, 1);
        let v = collapse_metric(&g).unwrap();
        let target = 1.0 / 128f64.sqrt();
        assert!((v - target).abs() < 0.15 * target, "{v}");
        let scaled = Tensor::from_fn(g.shape(), |i| g.data()[i] * (1.0 + (i / 128) as f64));
        assert!((collapse_metric(&scaled).unwrap() - v).abs() < 1e-12);
        assert!(collapse_metric(&Tensor::<f64>::ones(&[1, 4])).is_err());
    }

    #[test]
    fn knn_oracles() {
        let onehot = Tensor::from_fn(&[30, 10], |i| if i / 10 % 10 == i % 10 { 1.0 } else { 0.0 });
        let labels: Vec<usize> = (0..30).map(|r| r % 10).collect();
        assert_eq!(knn_probe(&onehot, &labels, &onehot, &labels, 1).unwrap(), 100.0);
        assert_eq!(knn_probe(&onehot, &labels, &onehot, &labels, 3).unwrap(), 100.0);
        let g = gaussian(1000, 32, 2);
        let q = gaussian(1000, 32, 3);
        let gl: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let acc = knn_probe(&g, &gl, &q, &gl, 10).unwrap();
        assert!((acc - 10.0).abs() <= 3.0, "{acc}");
        assert!(knn_probe(&Tensor::<f64>::zeros(&[1, 2]), &[], &q, &gl, 1).is_err());
        assert!(knn_probe(&g, &gl, &q, &gl, 0).is_err());
    }

    #[test]
    fn probe_recovers_smuggled_labels() {
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 10).collect();
        let mut noise = gaussian(n, 16, 4);
        for (r, &l) in labels.iter().enumerate() {
            noise.data_mut()[r * 16 + l] += 5.0;
        }
        let cfg = ProbeConfig { epochs: 20, lr: 0.1, batch: 32, momentum: 0.9, seed: 0 };
        assert_eq!(linear_eval(&noise, &labels, &noise, &labels, 10, &cfg).unwrap(), 100.0);
    }
}
