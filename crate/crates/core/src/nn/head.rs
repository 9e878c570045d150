use rand::Rng;

use super::{he_normal, BatchNorm, Ctx, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor, Var};

/// Projector and predictor sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadDef {
    pub in_dim: usize,
    pub proj_hidden: usize,
    /// Contrast dimension: projector output, predictor input and output.
    pub out_dim: usize,
    pub pred_hidden: usize,
}

impl Default for HeadDef {
    fn default() -> Self {
        Self {
            in_dim: 256,
            proj_hidden: 512,
            out_dim: 128,
            pred_hidden: 64,
        }
    }
}

/// `linear -> batch norm -> relu -> linear (+ bias)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: ParamId,
    bn1: BatchNorm,
    fc2: ParamId,
    fc2_bias: ParamId,
}

impl Mlp {
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: store.add(format!("{prefix}.fc1.w"), he_normal(&[input, hidden], input, rng), ParamKind::Weight),
            bn1: BatchNorm::build(store, &format!("{prefix}.bn1"), hidden),
            fc2: store.add(format!("{prefix}.fc2.w"), he_normal(&[hidden, output], hidden, rng), ParamKind::Weight),
            fc2_bias: store.add(format!("{prefix}.fc2.b"), Tensor::zeros(&[output]), ParamKind::NormOrBias),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w1 = ctx.bind(self.fc1);
        let h = ctx.tape.matmul(x, w1)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let w2 = ctx.bind(self.fc2);
        let b2 = ctx.bind(self.fc2_bias);
        let y = ctx.tape.matmul(h, w2)?;
        ctx.tape.add_bias(y, b2)
    }
}
