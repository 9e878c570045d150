//! Central finite-difference checks of every differentiable op at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::ViewBatch;
use crate::error::Result;
use crate::loss;
use crate::nn::{DualBranch, EncoderDef, HeadDef};
use crate::patch::{self, CombinationPlan, CombineOp, MontagePlacement};
use crate::pipeline::{self, PipelineSpec};
use crate::tensor::{BnMode, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;
pub const TOL_ELEMENTWISE: f64 = 1e-5;
pub const TOL_COMPOSITE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Scalar inputs that were perturbed.
    pub checked: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.ops.is_empty() && self.ops.iter().all(OpReport::passed)
    }

    /// Op with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&OpReport> {
        self.ops
            .iter()
            .max_by(|a, b| (a.max_rel_err / a.tol).total_cmp(&(b.max_rel_err / b.tol)))
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Reduces a tensor output to a scalar with fixed random weights, so every
/// output element contributes.
fn probe_scalar(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD);
    let w = Tensor::from_fn(tape.shape(out), |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let s = probe_scalar(&mut tape, out)?;
    Ok(tape.value(s).item())
}

/// Compares the tape gradient of `build` with central differences in every
/// input element.
pub fn check_op(name: &str, tol: f64, inputs: Vec<Tensor<f64>>, build: &Build<'_>) -> Result<OpReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let s = probe_scalar(&mut tape, out)?;
    let grads = tape.backward(s)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs;
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = evaluate(&work, build)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = evaluate(&work, build)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
            checked += 1;
        }
    }
    Ok(OpReport { name: name.to_string(), max_rel_err: worst, tol, checked })
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Values at least `gap` away from zero, for ops with a kink there.
fn off_kink(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Every tape op on small random inputs.
pub fn op_suite() -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = &mut rng;
    let (te, tc) = (TOL_ELEMENTWISE, TOL_COMPOSITE);
    let mut out = Vec::new();
    let mut push = |rep: OpReport| out.push(rep);

    push(check_op("add", te, vec![normal(&[3, 4], r), normal(&[3, 4], r)], &|t, v| t.add(v[0], v[1]))?);
    push(check_op("sub", te, vec![normal(&[3, 4], r), normal(&[3, 4], r)], &|t, v| t.sub(v[0], v[1]))?);
    push(check_op("mul", te, vec![normal(&[3, 4], r), normal(&[3, 4], r)], &|t, v| t.mul(v[0], v[1]))?);
    push(check_op("mul_scalar", te, vec![normal(&[5], r)], &|t, v| Ok(t.mul_scalar(v[0], -1.7)))?);
    push(check_op("relu", te, vec![off_kink(&[4, 5], 0.05, r)], &|t, v| Ok(t.relu(v[0])))?);
    push(check_op("exp", te, vec![normal(&[6], r)], &|t, v| Ok(t.exp(v[0])))?);
    let pos = normal(&[6], r).map(|v| v.abs() + 0.3);
    push(check_op("log", te, vec![pos], &|t, v| t.log(v[0]))?);
    let a = normal(&[10], r);
    let b = Tensor::from_fn(&[10], |i| a.data()[i] + if i % 2 == 0 { 0.2 } else { -0.2 });
    push(check_op("max_elementwise", te, vec![a, b], &|t, v| t.max_elementwise(v[0], v[1]))?);
    push(check_op("add_bias", te, vec![normal(&[3, 4], r), normal(&[4], r)], &|t, v| t.add_bias(v[0], v[1]))?);

    push(check_op("sum", tc, vec![normal(&[3, 4], r)], &|t, v| Ok(t.sum(v[0])))?);
    push(check_op("mean", tc, vec![normal(&[3, 4], r)], &|t, v| Ok(t.mean(v[0])))?);
    push(check_op("matmul", tc, vec![normal(&[3, 4], r), normal(&[4, 5], r)], &|t, v| t.matmul(v[0], v[1]))?);
    push(check_op("matmul_nt", tc, vec![normal(&[3, 4], r), normal(&[5, 4], r)], &|t, v| t.matmul_nt(v[0], v[1]))?);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        push(check_op(
            &format!("conv2d(s{stride},p{pad})"),
            tc,
            vec![normal(&[2, 3, 5, 5], r), normal(&[4, 3, 3, 3], r)],
            &move |t, v| t.conv2d(v[0], v[1], stride, pad),
        )?);
    }
    push(check_op("conv2d(1x1,s2)", tc, vec![normal(&[2, 3, 4, 4], r), normal(&[2, 3, 1, 1], r)], &|t, v| {
        t.conv2d(v[0], v[1], 2, 0)
    })?);
    let bn_in = vec![normal(&[4, 3, 2, 2], r), normal(&[3], r), normal(&[3], r)];
    push(check_op("batch_norm(train)", tc, bn_in, &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0))?);
    push(check_op("batch_norm(train,2d)", tc, vec![normal(&[5, 3], r), normal(&[3], r), normal(&[3], r)], &|t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)
    })?);
    let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.9]);
    push(check_op("batch_norm(infer)", tc, vec![normal(&[2, 3, 2, 2], r), normal(&[3], r), normal(&[3], r)], &|t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Infer { mean: &rm, var: &rv })?.0)
    })?);
    push(check_op("global_avg_pool", tc, vec![normal(&[2, 3, 3, 3], r)], &|t, v| t.global_avg_pool(v[0]))?);
    push(check_op("l2_normalize", tc, vec![normal(&[4, 5], r)], &|t, v| t.l2_normalize(v[0]))?);
    push(check_op("softmax_cross_entropy", tc, vec![normal(&[4, 5], r)], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
    })?);
    push(check_op("row_combine", tc, vec![normal(&[4, 3], r)], &|t, v| {
        t.row_combine(v[0], vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 0.7), (3, 0.3)], vec![(2, 1.0)]])
    })?);
    push(check_op("gather_rows", tc, vec![normal(&[4, 3], r)], &|t, v| t.gather_rows(v[0], &[3, 0, 0, 2]))?);
    push(check_op("concat(axis0)", tc, vec![normal(&[2, 3], r), normal(&[1, 3], r)], &|t, v| t.concat(&[v[0], v[1]], 0))?);
    push(check_op("concat(axis3)", tc, vec![normal(&[2, 1, 2, 2], r), normal(&[2, 1, 2, 3], r)], &|t, v| {
        t.concat(&[v[0], v[1]], 3)
    })?);
    push(check_op("slice", tc, vec![normal(&[2, 3, 4], r)], &|t, v| t.slice(v[0], 2, 1, 2))?);
    push(check_op("reshape", tc, vec![normal(&[2, 6], r)], &|t, v| t.reshape(v[0], &[3, 4]))?);

    push(check_op("stitch_pair", tc, vec![normal(&[2, 2, 3, 3], r), normal(&[2, 2, 3, 3], r)], &|t, v| {
        patch::stitch_pair(t, v[0], v[1], 2, 0, 1)
    })?);
    let placement = MontagePlacement::random(8, &mut ChaCha8Rng::seed_from_u64(1))?;
    push(check_op("montage_disassemble", tc, vec![normal(&[2, 2, 4, 4], r)], &|t, v| {
        patch::montage_disassemble(t, v[0], &placement)
    })?);
    for op in [CombineOp::Mean, CombineOp::Weighted(0.7), CombineOp::Max] {
        let subsets = patch::combinations(4, 2)?;
        push(check_op(&format!("combine({})", op.name()), tc, vec![off_kink(&[8, 3], 0.05, r)], &move |t, v| {
            patch::combine_subsets(t, v[0], 2, 4, &subsets, op, &mut ChaCha8Rng::seed_from_u64(0))
        })?);
    }
    push(check_op("info_nce", tc, vec![normal(&[4, 6], r), normal(&[4, 6], r)], &|t, v| {
        loss::info_nce(t, v[0], v[1], &[0, 1, 2, 3], 0.5)
    })?);
    push(check_op(
        "symmetrized_pair_loss",
        tc,
        vec![normal(&[3, 5], r), normal(&[3, 5], r), normal(&[3, 5], r), normal(&[3, 5], r)],
        &|t, v| loss::symmetrized_pair_loss(t, v[0], v[1], v[2], v[3], 1.0),
    )?);
    push(check_op(
        "fastmoco_loss(flat)",
        tc,
        vec![normal(&[6, 4], r), normal(&[6, 4], r), normal(&[2, 4], r), normal(&[2, 4], r)],
        &|t, v| loss::fastmoco_loss(t, v[0], v[1], v[2], v[3], 1.0, false),
    )?);
    Ok(out)
}

/// Toy network used by [`network_check`]: 4 images of 8x8 through a
/// two-stage encoder.
pub fn toy_branch(seed: u64) -> Result<DualBranch<f64>> {
    let enc = EncoderDef {
        in_channels: 3,
        stem_channels: 4,
        stage_channels: vec![4, 6],
        blocks_per_stage: 1,
    };
    let head = HeadDef {
        in_dim: 6,
        proj_hidden: 24,
        out_dim: 8,
        pred_hidden: 16,
    };
    DualBranch::new(&enc, &head, 0.99, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Full Fast-MoCo loss (m=2, n=2, mean) on the toy network, differentiated
/// with respect to every online parameter.
pub fn network_check(seed: u64) -> Result<OpReport> {
    let mut branch = toy_branch(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let batch = ViewBatch {
        view_a: normal(&[4, 3, 8, 8], &mut rng),
        view_b: normal(&[4, 3, 8, 8], &mut rng),
        extra: None,
        patches: None,
        indices: (0..4).collect(),
        epoch: 0,
    };
    let spec = PipelineSpec::fastmoco(CombinationPlan::standard(2, 2)?);
    let loss_at = |branch: &mut DualBranch<f64>| -> Result<f64> {
        Ok(pipeline::forward(&spec, branch, &batch, &mut ChaCha8Rng::seed_from_u64(0))?.loss_value())
    };

    let fwd = pipeline::forward(&spec, &mut branch, &batch, &mut ChaCha8Rng::seed_from_u64(0))?;
    let grads = fwd.tape.backward(fwd.loss)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; branch.online.len()];
    for (key, g) in grads.params() {
        analytic[key] = Some(g.clone());
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in 0..branch.online.len() {
        let e = &branch.online.entries()[p];
        if !e.kind.trainable() {
            continue;
        }
        let zeros = Tensor::zeros(e.value.shape());
        let a = analytic[p].clone().unwrap_or(zeros);
        for i in 0..a.len() {
            let orig = branch.online.entries()[p].value.data()[i];
            branch.online.entries_mut()[p].value.data_mut()[i] = orig + FD_STEP;
            let up = loss_at(&mut branch)?;
            branch.online.entries_mut()[p].value.data_mut()[i] = orig - FD_STEP;
            let down = loss_at(&mut branch)?;
            branch.online.entries_mut()[p].value.data_mut()[i] = orig;
            worst = worst.max(rel_err(a.data()[i], (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    Ok(OpReport {
        name: "fastmoco_loss(toy net)".into(),
        max_rel_err: worst,
        tol: TOL_COMPOSITE,
        checked,
    })
}

/// Per-op suite plus the whole-network check.
pub fn run_suite() -> Result<GradcheckReport> {
    let mut ops = op_suite()?;
    ops.push(network_check(11)?);
    Ok(GradcheckReport { ops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::set_relu_backward_fault;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-6) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn sign_flipped_relu_is_caught() {
        set_relu_backward_fault(true);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let rep = check_op("relu", TOL_ELEMENTWISE, vec![off_kink(&[3, 3], 0.05, &mut r)], &|t, v| Ok(t.relu(v[0])));
        set_relu_backward_fault(false);
        let rep = rep.unwrap();
        assert!(!rep.passed(), "{rep:?}");
        assert!(rep.max_rel_err > 1.0);
    }

    #[test]
    fn full_suite_passes() {
        let report = run_suite().unwrap();
        for op in &report.ops {
            eprintln!("{:<28} {:.2e} / {:.0e} ({} inputs)", op.name, op.max_rel_err, op.tol, op.checked);
            assert!(op.passed(), "{op:?}");
        }
    }
}
