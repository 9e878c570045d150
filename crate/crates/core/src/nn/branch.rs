use rand::Rng;

use super::{Ctx, Encoder, EncoderDef, HeadDef, Mlp, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Encoder, projector and (online only) predictor, with parameter ids into
/// one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
    head: HeadDef,
}

impl Network {
    /// Registers encoder, projector, then predictor, so a target built
    /// without the predictor shares every id with its online twin.
    pub fn build<T: Scalar, R: Rng>(
        enc: &EncoderDef,
        head: &HeadDef,
        store: &mut ParamStore<T>,
        prefix: &str,
        with_predictor: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if head.in_dim != enc.embedding_dim() {
            return Err(Error::shape(
                "network",
                format!("head input {} vs embedding {}", head.in_dim, enc.embedding_dim()),
            ));
        }
        let encoder = Encoder::build(enc, store, &format!("{prefix}.encoder"), rng);
        let projector = Mlp::build(store, &format!("{prefix}.projector"), head.in_dim, head.proj_hidden, head.out_dim, rng);
        let predictor = with_predictor
            .then(|| Mlp::build(store, &format!("{prefix}.predictor"), head.out_dim, head.pred_hidden, head.out_dim, rng));
        Ok(Self {
            encoder,
            projector,
            predictor,
            head: head.clone(),
        })
    }

    pub fn head_def(&self) -> &HeadDef {
        &self.head
    }

    pub fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
        match ctx.tape.shape(v) {
            &[_, d] if d == self.head.in_dim => self.projector.forward(ctx, v),
            s => Err(Error::shape("project", format!("expected N x {}, got {s:?}", self.head.in_dim))),
        }
    }

    pub fn predict<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        let pred = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Invalid("target branch has no predictor".into()))?;
        match ctx.tape.shape(z) {
            &[_, d] if d == self.head.out_dim => pred.forward(ctx, z),
            s => Err(Error::shape("predict", format!("expected N x {}, got {s:?}", self.head.out_dim))),
        }
    }

    /// `(projector output, predictor output)` for N x embedding input.
    pub fn project_predict<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<(Var, Var)> {
        let z = self.project(ctx, v)?;
        let p = self.predict(ctx, z)?;
        Ok((z, p))
    }
}

/// Gradient-trained online branch plus its moving-average target.
#[derive(Clone, Debug)]
pub struct DualBranch<T> {
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
    pub online_net: Network,
    pub target_net: Network,
    pub alpha: f64,
    /// `(target id, online id)` for every trainable target parameter.
    ema_pairs: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> DualBranch<T> {
    /// Builds the online branch from `rng` and initialises the target as an
    /// exact copy of its encoder and projector.
    pub fn new<R: Rng>(enc: &EncoderDef, head: &HeadDef, alpha: f64, rng: &mut R) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Invalid(format!("ema momentum {alpha} outside (0, 1)")));
        }
        let mut online = ParamStore::new();
        let online_net = Network::build(enc, head, &mut online, "online", true, rng)?;
        let mut target = ParamStore::new();
        // values are overwritten by the copy below
        let mut scratch = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let target_net = Network::build(enc, head, &mut target, "target", false, &mut scratch)?;
        target.copy_matching(&online, "online.", "target.");
        let mut ema_pairs = Vec::new();
        for id in target.ids() {
            let e = target.entry(id);
            if !e.kind.trainable() {
                continue;
            }
            let rest = e.name.strip_prefix("target.").expect("prefixed");
            let oid = online
                .find(&format!("online.{rest}"))
                .ok_or_else(|| Error::Invalid(format!("no online twin for {}", e.name)))?;
            ema_pairs.push((id, oid));
        }
        Ok(Self {
            online,
            target,
            online_net,
            target_net,
            alpha,
            ema_pairs,
        })
    }

    /// `target <- alpha * target + (1 - alpha) * online` for every trainable
    /// target parameter. Online parameters are only read.
    pub fn ema_update(&mut self) {
        // lerp form: `a` and `1 - a` need not sum to one once rounded
        let b = T::lit(1.0 - self.alpha);
        for &(tid, oid) in &self.ema_pairs {
            let src = self.online.get(oid).data();
            let dst = self.target.get_mut(tid).data_mut();
            for (t, &o) in dst.iter_mut().zip(src) {
                *t = *t + b * (o - *t);
            }
        }
    }

    pub fn ema_pairs(&self) -> &[(ParamId, ParamId)] {
        &self.ema_pairs
    }
}
