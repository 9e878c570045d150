use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{he_normal, BatchNorm, Ctx, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Residual conv encoder layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderDef {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of each stage; every stage halves the resolution.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderDef {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256],
            blocks_per_stage: 2,
        }
    }
}

impl EncoderDef {
    pub fn embedding_dim(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Channels of the tensor produced at `stage`.
    pub fn channels_at(&self, stage: EncoderStage) -> Result<usize> {
        match stage {
            EncoderStage::Input => Ok(self.in_channels),
            EncoderStage::Stage(k) if (1..=self.num_stages()).contains(&k) => Ok(self.stage_channels[k - 1]),
            EncoderStage::Final => Ok(self.embedding_dim()),
            EncoderStage::Stage(k) => Err(Error::Invalid(format!(
                "unknown stage id stage{k} (encoder has {} stages)",
                self.num_stages()
            ))),
        }
    }
}

/// A point in the encoder where computation can stop and later resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncoderStage {
    /// The raw image.
    Input,
    /// Output of residual stage `k` (1-based).
    Stage(usize),
    /// Pooled embedding.
    Final,
}

impl fmt::Display for EncoderStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderStage::Input => f.write_str("input"),
            EncoderStage::Stage(k) => write!(f, "stage{k}"),
            EncoderStage::Final => f.write_str("final"),
        }
    }
}

impl FromStr for EncoderStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Self::Input),
            "final" => Ok(Self::Final),
            _ => s
                .strip_prefix("stage")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Self::Stage)
                .ok_or_else(|| Error::Invalid(format!("unknown stage id `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    bn: BatchNorm,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{conv_name}.w"),
            he_normal(&[cout, cin, k, k], cin * k * k, rng),
            ParamKind::Weight,
        );
        Self {
            w,
            bn: BatchNorm::build(store, bn_name, cout),
            stride,
            pad: k / 2,
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(self.w);
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(ctx, x)?,
            None => x,
        };
        let y = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Stem, residual stages, and global average pooling.
#[derive(Clone, Debug)]
pub struct Encoder {
    def: EncoderDef,
    stem: ConvBn,
    stages: Vec<Vec<ResBlock>>,
}

impl Encoder {
    /// Registers parameters as `{prefix}.stem.conv.w`,
    /// `{prefix}.stage2.block1.conv1.w`, and so on.
    pub fn build<T: Scalar, R: Rng>(def: &EncoderDef, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        let stem = ConvBn::build(
            store,
            &format!("{prefix}.stem.conv"),
            &format!("{prefix}.stem.bn"),
            def.in_channels,
            def.stem_channels,
            3,
            1,
            rng,
        );
        let mut cin = def.stem_channels;
        let mut stages = Vec::with_capacity(def.num_stages());
        for (s, &cout) in def.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(def.blocks_per_stage);
            for b in 0..def.blocks_per_stage {
                let p = format!("{prefix}.stage{}.block{}", s + 1, b + 1);
                let stride = if b == 0 { 2 } else { 1 };
                let block_in = if b == 0 { cin } else { cout };
                let conv1 = ConvBn::build(store, &format!("{p}.conv1"), &format!("{p}.bn1"), block_in, cout, 3, stride, rng);
                let conv2 = ConvBn::build(store, &format!("{p}.conv2"), &format!("{p}.bn2"), cout, cout, 3, 1, rng);
                let shortcut = (stride != 1 || block_in != cout).then(|| {
                    ConvBn::build(store, &format!("{p}.shortcut.conv"), &format!("{p}.shortcut.bn"), block_in, cout, 1, stride, rng)
                });
                blocks.push(ResBlock { conv1, conv2, shortcut });
            }
            stages.push(blocks);
            cin = cout;
        }
        Self {
            def: def.clone(),
            stem,
            stages,
        }
    }

    pub fn def(&self) -> &EncoderDef {
        &self.def
    }

    /// Runs the encoder on NCHW input and stops after `stop`.
    pub fn encode_staged<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, stop: EncoderStage) -> Result<Var> {
        self.check_input(ctx, x, EncoderStage::Input)?;
        self.run(ctx, x, EncoderStage::Input, stop)
    }

    /// Continues encoding a feature map produced at `from` through to the
    /// pooled embedding.
    pub fn resume_encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, feat: Var, from: EncoderStage) -> Result<Var> {
        self.check_input(ctx, feat, from)?;
        self.run(ctx, feat, from, EncoderStage::Final)
    }

    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.encode_staged(ctx, x, EncoderStage::Final)
    }

    fn check_input<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, at: EncoderStage) -> Result<()> {
        let want = self.def.channels_at(at)?;
        if at == EncoderStage::Final {
            return Err(Error::Invalid("cannot resume from the pooled embedding".into()));
        }
        match ctx.tape.shape(x) {
            &[_, c, _, _] if c == want => Ok(()),
            s => Err(Error::shape(
                "encoder",
                format!("{at} expects N x {want} x H x W, got {s:?}"),
            )),
        }
    }

    fn run<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut x: Var, from: EncoderStage, stop: EncoderStage) -> Result<Var> {
        self.def.channels_at(stop)?;
        if stop < from {
            return Err(Error::Invalid(format!("cannot run from {from} back to {stop}")));
        }
        if stop == from {
            return Ok(x);
        }
        let first = match from {
            EncoderStage::Input => {
                x = self.stem.forward(ctx, x)?;
                x = ctx.tape.relu(x);
                0
            }
            EncoderStage::Stage(k) => k,
            EncoderStage::Final => unreachable!("checked above"),
        };
        for (s, blocks) in self.stages.iter().enumerate().skip(first) {
            for block in blocks {
                x = block.forward(ctx, x)?;
            }
            if stop == EncoderStage::Stage(s + 1) {
                return Ok(x);
            }
        }
        ctx.tape.global_avg_pool(x)
    }
}
