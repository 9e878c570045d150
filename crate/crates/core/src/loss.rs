//! InfoNCE and the two-view / multi-pair losses built on it.
//!
//! Online rows are always laid out combination-major (`c * N + i`), so the
//! positive of row `r` is target row `r % N`. Negatives are the other
//! in-batch targets; the positive stays in the denominator.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Default temperature.
pub const DEFAULT_TAU: f64 = 1.0;

/// Number of combined samples per image in the sample-encode-combine
/// pipeline: all pairs of eight patches.
pub const SEC_COMBINATIONS: usize = 28;
/// Patches per image in the encode-only pipeline.
pub const ENCODE_ONLY_PATCHES: usize = 4;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("temperature {tau} must be positive")))
    }
}

/// Mean over rows of `-log(exp(z.z+/tau) / sum_b exp(z.z_b/tau))` for
/// unit-norm rows `z` against unit-norm `targets`.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, z: Var, targets: Var, positives: &[usize], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let logits = tape.matmul_nt(z, targets)?;
    let scaled = tape.mul_scalar(logits, T::lit(1.0 / tau));
    tape.softmax_cross_entropy(scaled, positives)
}

/// InfoNCE where row `r` of `online` is positive with target `r % N`.
pub fn contrast_rows<T: Scalar>(tape: &mut Tape<T>, online: Var, targets: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(targets)[0];
    let rows = tape.shape(online)[0];
    if rows == 0 || !rows.is_multiple_of(n) {
        return Err(Error::shape(
            "contrast",
            format!("{rows} online rows for a batch of {n} targets"),
        ));
    }
    let labels: Vec<usize> = (0..rows).map(|r| r % n).collect();
    info_nce(tape, online, targets, &labels, tau)
}

/// One set of online rows contrasted against one target set. Both are
/// normalised inside [`contrast_groups`].
#[derive(Clone, Copy, Debug)]
pub struct ContrastGroup {
    pub online: Var,
    pub targets: Var,
}

/// Mean over groups of each group's mean InfoNCE.
pub fn contrast_groups<T: Scalar>(tape: &mut Tape<T>, groups: &[ContrastGroup], tau: f64) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::Invalid("no contrast groups".into()));
    }
    let mut total: Option<Var> = None;
    for g in groups {
        let z = tape.l2_normalize(g.online)?;
        let t = tape.l2_normalize(g.targets)?;
        let l = contrast_rows(tape, z, t, tau)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(tape.mul_scalar(total.expect("non-empty"), T::lit(1.0 / groups.len() as f64)))
}

/// Total positive pairs a set of groups contributes.
pub fn positive_pairs<T: Scalar>(tape: &Tape<T>, groups: &[ContrastGroup]) -> usize {
    groups.iter().map(|g| tape.shape(g.online)[0]).sum()
}

fn same_batch<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Result<usize> {
    let n = tape.shape(vars[0])[0];
    if vars.iter().any(|&v| tape.shape(v)[0] != n) {
        return Err(Error::shape("loss", "view batch sizes differ"));
    }
    Ok(n)
}

/// `1/2 (L(z_o^a, z_t^b) + L(z_o^b, z_t^a))` on raw (unnormalised) outputs.
pub fn symmetrized_pair_loss<T: Scalar>(
    tape: &mut Tape<T>,
    online_a: Var,
    online_b: Var,
    target_a: Var,
    target_b: Var,
    tau: f64,
) -> Result<Var> {
    same_batch(tape, &[online_a, online_b, target_a, target_b])?;
    contrast_groups(
        tape,
        &[
            ContrastGroup { online: online_a, targets: target_b },
            ContrastGroup { online: online_b, targets: target_a },
        ],
        tau,
    )
}

/// Groups for the combined samples of both views. With `same_view` the
/// combined samples of a view are paired with that view's own targets.
pub fn fastmoco_groups(
    combined_a: Var,
    combined_b: Var,
    target_a: Var,
    target_b: Var,
    same_view: bool,
) -> [ContrastGroup; 2] {
    let (ta, tb) = if same_view { (target_a, target_b) } else { (target_b, target_a) };
    [
        ContrastGroup { online: combined_a, targets: ta },
        ContrastGroup { online: combined_b, targets: tb },
    ]
}

/// Mean over the `k` combined samples per view, then over the two
/// directions. `combined_*` hold `k * N` rows, combination-major.
pub fn fastmoco_loss<T: Scalar>(
    tape: &mut Tape<T>,
    combined_a: Var,
    combined_b: Var,
    target_a: Var,
    target_b: Var,
    tau: f64,
    same_view: bool,
) -> Result<Var> {
    let n = same_batch(tape, &[target_a, target_b])?;
    let (ra, rb) = (tape.shape(combined_a)[0], tape.shape(combined_b)[0]);
    if ra != rb || ra % n != 0 || ra == 0 {
        return Err(Error::shape(
            "fastmoco_loss",
            format!("{ra} and {rb} combined rows for {n} images"),
        ));
    }
    contrast_groups(tape, &fastmoco_groups(combined_a, combined_b, target_a, target_b, same_view), tau)
}

/// Groups contrasting the same online rows against both target views.
pub fn both_target_groups(online: Var, target_a: Var, target_b: Var) -> [ContrastGroup; 2] {
    [
        ContrastGroup { online, targets: target_a },
        ContrastGroup { online, targets: target_b },
    ]
}

/// Every online row (`per_image` per image) against both target views,
/// averaged.
pub fn both_targets<T: Scalar>(
    tape: &mut Tape<T>,
    online: Var,
    target_a: Var,
    target_b: Var,
    per_image: usize,
    op: &'static str,
    tau: f64,
) -> Result<Var> {
    let n = same_batch(tape, &[target_a, target_b])?;
    let rows = tape.shape(online)[0];
    if rows != per_image * n {
        return Err(Error::shape(op, format!("expected {per_image} x {n} rows, got {rows}")));
    }
    contrast_groups(tape, &both_target_groups(online, target_a, target_b), tau)
}

/// `1/(2*28) sum_c [L(z_c, z_t^a) + L(z_c, z_t^b)]` over the 28 pair
/// combinations of 8 independently sampled patches.
pub fn sec_loss<T: Scalar>(tape: &mut Tape<T>, combined: Var, target_a: Var, target_b: Var, tau: f64) -> Result<Var> {
    both_targets(tape, combined, target_a, target_b, SEC_COMBINATIONS, "sec_loss", tau)
}

/// `1/8 sum_p [L(z_p, z_t^a) + L(z_p, z_t^b)]` over 4 separately encoded
/// patches per image.
pub fn encode_only_loss<T: Scalar>(tape: &mut Tape<T>, patches: Var, target_a: Var, target_b: Var, tau: f64) -> Result<Var> {
    both_targets(tape, patches, target_a, target_b, ENCODE_ONLY_PATCHES, "encode_only_loss", tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_similarity_gives_ln_b() {
        for b in [2usize, 8, 64] {
            let mut tape = Tape::<f64>::new();
            // orthogonal targets, query orthogonal to all of them
            let t = tape.constant(Tensor::from_fn(&[b, b + 1], |i| if i / (b + 1) == i % (b + 1) { 1.0 } else { 0.0 }));
            let z = tape.constant(Tensor::from_fn(&[1, b + 1], |i| if i == b { 1.0 } else { 0.0 }));
            let l = info_nce(&mut tape, z, t, &[0], 0.3).unwrap();
            assert!((tape.value(l).item() - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_target_direct_value() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = info_nce(&mut tape, z, t, &[0], 1.0).unwrap();
        assert!((tape.value(l).item() - 0.313262).abs() < 1e-6);
        assert!(info_nce(&mut tape, z, t, &[0], 0.0).is_err());
        let l = info_nce(&mut tape, z, t, &[0], 0.01).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn count_checks() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::ones(&[2, 3]));
        let bad = tape.constant(Tensor::ones(&[10, 3]));
        assert!(sec_loss(&mut tape, bad, t, t, 1.0).is_err());
        assert!(encode_only_loss(&mut tape, bad, t, t, 1.0).is_err());
        let odd = tape.constant(Tensor::ones(&[3, 3]));
        assert!(fastmoco_loss(&mut tape, odd, odd, t, t, 1.0, false).is_err());
    }
}
