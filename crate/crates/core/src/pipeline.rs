//! One training forward pass for each patch-encoding pipeline.
//!
//! Online rows are always combination-major, so row `r` of a combined batch
//! belongs to image `r % N`. Target embeddings are computed on their own tape
//! and enter the online tape as constants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::{ViewBatch, ViewNeeds, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::loss::{self, ContrastGroup};
use crate::nn::{BnPhase, Ctx, DualBranch, EncoderStage, Network};
use crate::patch::{self, CombinationPlan, CombineOp, CombineStage, MontagePlacement};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Patches sampled per image by sample-encode-combine and montage.
pub const SEC_PATCHES: usize = 8;
/// Side of independently sampled half-view patches.
pub const HALF_PATCH: usize = IMAGE_SIZE / 2;
/// Side of encode-only patches: 158/224 of the view, rounded to even.
pub const ENCODE_ONLY_PATCH: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pipeline {
    /// Divide, encode, combine embeddings.
    FastMoco,
    /// Independently sampled patches, encode, combine.
    Sec,
    /// Independently sampled larger patches, no combine.
    EncodeOnly,
    /// Divide, stitch adjacent patches, encode.
    DivideCombineEncode,
    /// Independently sampled patches, stitch, encode.
    SampleCombineEncode,
    /// Montages of sampled patches, encode, split, combine.
    Montage,
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] = [
        Pipeline::FastMoco,
        Pipeline::Sec,
        Pipeline::EncodeOnly,
        Pipeline::DivideCombineEncode,
        Pipeline::SampleCombineEncode,
        Pipeline::Montage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::FastMoco => "fastmoco",
            Pipeline::Sec => "sec",
            Pipeline::EncodeOnly => "encode_only",
            Pipeline::DivideCombineEncode => "divide_combine_encode",
            Pipeline::SampleCombineEncode => "sample_combine_encode",
            Pipeline::Montage => "montage",
        }
    }

    /// Extra online samples the data loader must produce.
    pub fn view_needs(self, multicrop: bool) -> ViewNeeds {
        let patches = match self {
            Pipeline::FastMoco | Pipeline::DivideCombineEncode => None,
            Pipeline::Sec | Pipeline::Montage => Some((SEC_PATCHES, HALF_PATCH)),
            Pipeline::EncodeOnly => Some((loss::ENCODE_ONLY_PATCHES, ENCODE_ONLY_PATCH)),
            Pipeline::SampleCombineEncode => Some((4, HALF_PATCH)),
        };
        ViewNeeds { patches, extra_crop: multicrop }
    }

    /// Whether the divide/combine settings of the run config apply.
    pub fn uses_plan(self) -> bool {
        matches!(self, Pipeline::FastMoco | Pipeline::DivideCombineEncode)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown pipeline `{s}`")))
    }
}

/// Everything that shapes the loss of one step.
#[derive(Clone, Debug)]
pub struct PipelineSpec {
    pub pipeline: Pipeline,
    pub plan: CombinationPlan,
    pub same_view: bool,
    pub multicrop: bool,
    pub tau: f64,
    pub target_bn: BnPhase,
}

impl PipelineSpec {
    /// Checks the plan against the pipeline and pins divide-combine-encode
    /// to stitching raw patches.
    pub fn new(
        pipeline: Pipeline,
        mut plan: CombinationPlan,
        same_view: bool,
        multicrop: bool,
        tau: f64,
        target_bn: BnPhase,
    ) -> Result<Self> {
        if pipeline == Pipeline::DivideCombineEncode {
            plan = CombinationPlan::new(plan.m, plan.n, plan.op, CombineStage::Encoder(EncoderStage::Input), plan.pairs_used)?;
        }
        if same_view && !pipeline.uses_plan() {
            return Err(Error::Invalid(format!("same-view positives need a divided view, not {pipeline}")));
        }
        Ok(Self {
            pipeline,
            plan,
            same_view,
            multicrop,
            tau,
            target_bn,
        })
    }

    /// Fast-MoCo with the given grid and subset count, defaults elsewhere.
    pub fn fastmoco(plan: CombinationPlan) -> Self {
        Self::new(Pipeline::FastMoco, plan, false, false, loss::DEFAULT_TAU, BnPhase::Train).expect("fastmoco accepts any plan")
    }
}

/// Result of one forward pass; backpropagate `loss` through `tape`.
pub struct Forward<T> {
    pub tape: Tape<T>,
    pub loss: Var,
    pub positive_pairs: usize,
    /// Target projections of view a.
    pub target_a: Tensor<T>,
    /// First block of online outputs (view a), for health metrics.
    pub online_a: Tensor<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).item().to_f64().unwrap_or(f64::NAN)
    }
}

/// Target-branch projection of one full view.
pub fn target_project<T: Scalar>(branch: &mut DualBranch<T>, view: &Tensor<T>, phase: BnPhase) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::frozen(&mut tape, &mut branch.target, phase);
    let x = ctx.tape.constant(view.clone());
    let v = branch.target_net.encoder.encode(&mut ctx, x)?;
    let z = branch.target_net.project(&mut ctx, v)?;
    Ok(tape.value(z).clone())
}

fn predicted<T: Scalar>(net: &Network, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
    Ok(net.project_predict(ctx, v)?.1)
}

/// Encodes stitched batches (one per orientation) from `stage` onward and
/// stacks the embeddings.
fn encode_stitched<T: Scalar>(
    net: &Network,
    ctx: &mut Ctx<'_, T>,
    maps: Var,
    images: usize,
    subsets: &[Vec<usize>],
    stage: EncoderStage,
) -> Result<Var> {
    let parts = patch::stitch_subsets(ctx.tape, maps, images, 2, subsets)?;
    let mut embeddings = Vec::with_capacity(parts.len());
    for (batch, _) in parts {
        embeddings.push(if stage == EncoderStage::Input {
            net.encoder.encode(ctx, batch)?
        } else {
            net.encoder.resume_encode(ctx, batch, stage)?
        });
    }
    ctx.tape.concat(&embeddings, 0)
}

/// Divides one view and runs the plan, returning predictor outputs for
/// `k * N` combined samples.
fn divided_view<T: Scalar, R: Rng>(
    net: &Network,
    ctx: &mut Ctx<'_, T>,
    view: &Tensor<T>,
    plan: &CombinationPlan,
    rng: &mut R,
) -> Result<Var> {
    let n = view.shape()[0];
    let x = ctx.tape.constant(patch::divide(&patch::crop_to_grid(view, plan.m)?, plan.m)?);
    match plan.stage {
        CombineStage::Encoder(EncoderStage::Final) => {
            let e = net.encoder.encode(ctx, x)?;
            let c = plan.combine(ctx.tape, e, n, rng)?;
            predicted(net, ctx, c)
        }
        CombineStage::Encoder(stage) => {
            let maps = net.encoder.encode_staged(ctx, x, stage)?;
            let e = encode_stitched(net, ctx, maps, n, &plan.subsets, stage)?;
            predicted(net, ctx, e)
        }
        CombineStage::Proj => {
            let e = net.encoder.encode(ctx, x)?;
            let z = net.project(ctx, e)?;
            let c = plan.combine(ctx.tape, z, n, rng)?;
            net.predict(ctx, c)
        }
        CombineStage::Pred => {
            let e = net.encoder.encode(ctx, x)?;
            let p = predicted(net, ctx, e)?;
            plan.combine(ctx.tape, p, n, rng)
        }
    }
}

fn patches<T: Scalar>(batch: &ViewBatch<T>, pipeline: Pipeline) -> Result<&Tensor<T>> {
    batch
        .patches
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("{pipeline} needs sampled patches in the view batch")))
}

/// Online predictions and the loss groups for one batch.
fn online_groups<T: Scalar, R: Rng>(
    spec: &PipelineSpec,
    net: &Network,
    ctx: &mut Ctx<'_, T>,
    batch: &ViewBatch<T>,
    ta: Var,
    tb: Var,
    rng: &mut R,
) -> Result<(Vec<ContrastGroup>, Option<Var>)> {
    let n = batch.len();
    let tau = spec.tau;
    // a plain loss value when no extra samples are mixed in
    let mut base: Option<Var> = None;
    let no_extra = !spec.multicrop;
    let mut groups = Vec::new();
    match spec.pipeline {
        Pipeline::FastMoco | Pipeline::DivideCombineEncode => {
            let pa = divided_view(net, ctx, &batch.view_a, &spec.plan, rng)?;
            let pb = divided_view(net, ctx, &batch.view_b, &spec.plan, rng)?;
            if no_extra {
                base = Some(loss::fastmoco_loss(ctx.tape, pa, pb, ta, tb, tau, spec.same_view)?);
            }
            groups.extend(loss::fastmoco_groups(pa, pb, ta, tb, spec.same_view));
        }
        Pipeline::Sec | Pipeline::Montage => {
            let x = patches(batch, spec.pipeline)?;
            let e = if spec.pipeline == Pipeline::Sec {
                let xv = ctx.tape.constant(x.clone());
                net.encoder.encode(ctx, xv)?
            } else {
                let placement = MontagePlacement::random(x.rows(), rng)?;
                let montages = ctx.tape.constant(patch::montage_from_placement(x, &placement)?);
                let last = EncoderStage::Stage(net.encoder.def().num_stages());
                let maps = net.encoder.encode_staged(ctx, montages, last)?;
                patch::montage_disassemble(ctx.tape, maps, &placement)?
            };
            let subsets = patch::combinations(SEC_PATCHES, 2)?;
            let c = patch::combine_subsets(ctx.tape, e, n, SEC_PATCHES, &subsets, CombineOp::Mean, rng)?;
            let p = predicted(net, ctx, c)?;
            if no_extra {
                base = Some(loss::sec_loss(ctx.tape, p, ta, tb, tau)?);
            }
            groups.extend(loss::both_target_groups(p, ta, tb));
        }
        Pipeline::EncodeOnly => {
            let xv = ctx.tape.constant(patches(batch, spec.pipeline)?.clone());
            let e = net.encoder.encode(ctx, xv)?;
            // patches are image-major; regroup patch-major like combined rows
            let order: Vec<usize> = (0..loss::ENCODE_ONLY_PATCHES)
                .flat_map(|p| (0..n).map(move |i| i * loss::ENCODE_ONLY_PATCHES + p))
                .collect();
            let e = ctx.tape.gather_rows(e, &order)?;
            let p = predicted(net, ctx, e)?;
            if no_extra {
                base = Some(loss::encode_only_loss(ctx.tape, p, ta, tb, tau)?);
            }
            groups.extend(loss::both_target_groups(p, ta, tb));
        }
        Pipeline::SampleCombineEncode => {
            let xv = ctx.tape.constant(patches(batch, spec.pipeline)?.clone());
            let pairs: Vec<Vec<usize>> = patch::PAIRS_2X2.iter().map(|p| p.to_vec()).collect();
            let e = encode_stitched(net, ctx, xv, n, &pairs, EncoderStage::Input)?;
            let p = predicted(net, ctx, e)?;
            if no_extra {
                base = Some(loss::both_targets(ctx.tape, p, ta, tb, pairs.len(), "sample_combine_encode", tau)?);
            }
            groups.extend(loss::both_target_groups(p, ta, tb));
        }
    }
    if let Some(extra) = &batch.extra {
        if spec.multicrop {
            let xv = ctx.tape.constant(extra.clone());
            let e = net.encoder.encode(ctx, xv)?;
            let p = predicted(net, ctx, e)?;
            groups.extend(loss::both_target_groups(p, ta, tb));
        }
    } else if spec.multicrop {
        return Err(Error::Invalid("multi-crop enabled but the batch has no extra crops".into()));
    }
    Ok((groups, base))
}

/// Full forward pass of one training step: target projections of both
/// views, then the online branch and the pipeline's loss.
pub fn forward<T: Scalar, R: Rng>(
    spec: &PipelineSpec,
    branch: &mut DualBranch<T>,
    batch: &ViewBatch<T>,
    rng: &mut R,
) -> Result<Forward<T>> {
    let target_a = target_project(branch, &batch.view_a, spec.target_bn)?;
    let target_b = target_project(branch, &batch.view_b, spec.target_bn)?;
    let mut tape = Tape::new();
    let ta = tape.constant(target_a.clone());
    let tb = tape.constant(target_b);
    let mut ctx = Ctx::trainable(&mut tape, &mut branch.online, BnPhase::Train);
    let (groups, base) = online_groups(spec, &branch.online_net, &mut ctx, batch, ta, tb, rng)?;
    drop(ctx);
    let positive_pairs = loss::positive_pairs(&tape, &groups);
    let online_a = tape.value(groups[0].online).clone();
    let loss = match base {
        Some(l) => l,
        None => loss::contrast_groups(&mut tape, &groups, spec.tau)?,
    };
    Ok(Forward {
        tape,
        loss,
        positive_pairs,
        target_a,
        online_a,
    })
}

/// Two-view baseline: each full view through the online branch, contrasted
/// with the other view's target.
pub fn baseline_forward<T: Scalar>(branch: &mut DualBranch<T>, batch: &ViewBatch<T>, tau: f64) -> Result<Forward<T>> {
    let target_a = target_project(branch, &batch.view_a, BnPhase::Train)?;
    let target_b = target_project(branch, &batch.view_b, BnPhase::Train)?;
    let mut tape = Tape::new();
    let ta = tape.constant(target_a.clone());
    let tb = tape.constant(target_b);
    let mut ctx = Ctx::trainable(&mut tape, &mut branch.online, BnPhase::Train);
    let net = &branch.online_net;
    let mut online = |view: &Tensor<T>| -> Result<Var> {
        let x = ctx.tape.constant(view.clone());
        let e = net.encoder.encode(&mut ctx, x)?;
        predicted(net, &mut ctx, e)
    };
    let pa = online(&batch.view_a)?;
    let pb = online(&batch.view_b)?;
    drop(ctx);
    let online_a = tape.value(pa).clone();
    let loss = loss::symmetrized_pair_loss(&mut tape, pa, pb, ta, tb, tau)?;
    Ok(Forward {
        tape,
        loss,
        positive_pairs: 2 * batch.len(),
        target_a,
        online_a,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{build_views, synth_dataset, AugmentConfig, Normalization};
    use crate::nn::{EncoderDef, HeadDef};

    fn tiny() -> (EncoderDef, HeadDef) {
        let enc = EncoderDef {
            in_channels: 3,
            stem_channels: 4,
            stage_channels: vec![4, 6, 8],
            blocks_per_stage: 1,
        };
        let head = HeadDef {
            in_dim: 8,
            proj_hidden: 24,
            out_dim: 8,
            pred_hidden: 16,
        };
        (enc, head)
    }

    fn batch(pipeline: Pipeline, multicrop: bool) -> ViewBatch<f64> {
        let ds = synth_dataset(3, 5, true);
        build_views(&ds, &[0, 1, 2], 9, 0, &AugmentConfig::default(), &Normalization::SYNTH, pipeline.view_needs(multicrop)).unwrap()
    }

    #[test]
    fn pair_counts_per_pipeline() {
        let (enc, head) = tiny();
        let expect = [
            (Pipeline::FastMoco, 2 * 3 * 6),
            (Pipeline::Sec, 2 * 3 * 28),
            (Pipeline::EncodeOnly, 2 * 3 * 4),
            (Pipeline::DivideCombineEncode, 2 * 3 * 4),
            (Pipeline::SampleCombineEncode, 2 * 3 * 4),
            (Pipeline::Montage, 2 * 3 * 28),
        ];
        for (pipeline, pairs) in expect {
            let mut branch = DualBranch::<f64>::new(&enc, &head, 0.99, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let spec = PipelineSpec::new(pipeline, CombinationPlan::standard(2, 2).unwrap(), false, false, 1.0, BnPhase::Train).unwrap();
            let fwd = forward(&spec, &mut branch, &batch(pipeline, false), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(fwd.positive_pairs, pairs, "{pipeline}");
            assert!(fwd.loss_value().is_finite());
        }
    }

    #[test]
    fn multicrop_adds_one_sample_per_direction() {
        let (enc, head) = tiny();
        let mut branch = DualBranch::<f64>::new(&enc, &head, 0.99, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let spec = PipelineSpec::new(Pipeline::FastMoco, CombinationPlan::standard(2, 2).unwrap(), false, true, 1.0, BnPhase::Train).unwrap();
        let fwd = forward(&spec, &mut branch, &batch(Pipeline::FastMoco, true), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(fwd.positive_pairs, 2 * 3 * 6 + 2 * 3);
        assert!(forward(&spec, &mut branch, &batch(Pipeline::FastMoco, false), &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn unit_plan_matches_baseline_bitwise() {
        let (enc, head) = tiny();
        let b = batch(Pipeline::FastMoco, false);
        let mut branch = DualBranch::<f64>::new(&enc, &head, 0.99, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut twin = branch.clone();
        let spec = PipelineSpec::fastmoco(CombinationPlan::standard(1, 1).unwrap());
        let fwd = forward(&spec, &mut branch, &b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let base = baseline_forward(&mut twin, &b, 1.0).unwrap();
        assert_eq!(fwd.loss_value().to_bits(), base.loss_value().to_bits());
        assert_eq!(fwd.positive_pairs, base.positive_pairs);
    }

    #[test]
    fn combine_stages_all_run() {
        let (enc, head) = tiny();
        let b = batch(Pipeline::FastMoco, false);
        for stage in ["input", "stage1", "stage2", "stage3", "final", "proj", "pred"] {
            let mut branch = DualBranch::<f64>::new(&enc, &head, 0.99, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let plan = CombinationPlan::new(2, 2, CombineOp::Mean, stage.parse().unwrap(), 6).unwrap();
            let k = plan.num_combined();
            let fwd = forward(&PipelineSpec::fastmoco(plan), &mut branch, &b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(fwd.positive_pairs, 2 * 3 * k, "{stage}");
            let grads = fwd.tape.backward(fwd.loss).unwrap();
            assert!(grads.params().count() > 0);
        }
    }

    #[test]
    fn same_view_changes_only_positives() {
        let (enc, head) = tiny();
        let b = batch(Pipeline::FastMoco, false);
        let mut branch = DualBranch::<f64>::new(&enc, &head, 0.99, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut twin = branch.clone();
        let plan = CombinationPlan::standard(2, 2).unwrap();
        let cross = PipelineSpec::fastmoco(plan.clone());
        let same = PipelineSpec::new(Pipeline::FastMoco, plan, true, false, 1.0, BnPhase::Train).unwrap();
        let f1 = forward(&cross, &mut branch, &b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f2 = forward(&same, &mut twin, &b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f1.positive_pairs, f2.positive_pairs);
        assert_ne!(f1.loss_value(), f2.loss_value());
        assert!(PipelineSpec::new(Pipeline::Sec, CombinationPlan::standard(2, 2).unwrap(), true, false, 1.0, BnPhase::Train).is_err());
    }
}
