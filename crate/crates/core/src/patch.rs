//! Divide / Combine machinery: grids of patches, `n`-subsets of patch
//! indices, the combine operators, and the geometry-preserving variants
//! (pair stitching and montages).
//!
//! Patch indices are 0-based and row-major inside the grid. Batched patch
//! tensors are image-major: row `i * m^2 + p` is patch `p` of image `i`.
//! Combined outputs are combination-major: row `c * N + i` is combination
//! `c` of image `i`, so every block of `N` rows lines up with the targets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::nn::EncoderStage;
use crate::tensor::{dims4, Scalar, Tape, Tensor, Var};

/// An `m x m` grid over a square view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DividePlan {
    pub m: usize,
    pub view_size: usize,
    pub patch_size: usize,
}

impl DividePlan {
    pub fn new(view_size: usize, m: usize) -> Result<Self> {
        if m == 0 || !view_size.is_multiple_of(m) {
            return Err(Error::Invalid(format!(
                "view size {view_size} is not divisible into a {m}x{m} grid"
            )));
        }
        Ok(Self {
            m,
            view_size,
            patch_size: view_size / m,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.m * self.m
    }

    /// `(row, col)` of patch `p`.
    pub fn cell(&self, p: usize) -> (usize, usize) {
        (p / self.m, p % self.m)
    }
}

/// Splits NCHW views into `N * m^2` patches, image-major, row-major.
pub fn divide<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "divide")?;
    if h != w {
        return Err(Error::shape("divide", format!("non-square view {h}x{w}")));
    }
    let plan = DividePlan::new(h, m)?;
    let ps = plan.patch_size;
    let mut out = Vec::with_capacity(x.len());
    let data = x.data();
    for i in 0..n {
        for p in 0..plan.num_patches() {
            let (gr, gc) = plan.cell(p);
            for ch in 0..c {
                for y in 0..ps {
                    let row = ((i * c + ch) * h + gr * ps + y) * w + gc * ps;
                    out.extend_from_slice(&data[row..row + ps]);
                }
            }
        }
    }
    Tensor::new(&[n * m * m, c, ps, ps], out)
}

/// Centre-crops square views to the largest size divisible by `m`; views
/// that already divide are returned unchanged.
pub fn crop_to_grid<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "crop_to_grid")?;
    if m == 0 || h != w || h < m {
        return Err(Error::shape("crop_to_grid", format!("{h}x{w} view for a {m}x{m} grid")));
    }
    let size = h - h % m;
    if size == h {
        return Ok(x.clone());
    }
    let off = (h - size) / 2;
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in x.data().chunks(h * w) {
        for y in off..off + size {
            out.extend_from_slice(&plane[y * w + off..y * w + off + size]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

/// Inverse of [`divide`].
pub fn reassemble<T: Scalar>(patches: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [np, c, ps, ps2] = dims4(patches, "reassemble")?;
    if m == 0 || np % (m * m) != 0 || ps != ps2 {
        return Err(Error::shape("reassemble", format!("{np} patches for a {m}x{m} grid")));
    }
    let n = np / (m * m);
    let size = ps * m;
    let mut out = vec![T::zero(); n * c * size * size];
    for i in 0..n {
        for p in 0..m * m {
            let (gr, gc) = (p / m, p % m);
            let src = patches.row(i * m * m + p);
            for ch in 0..c {
                for y in 0..ps {
                    let dst = ((i * c + ch) * size + gr * ps + y) * size + gc * ps;
                    out[dst..dst + ps].copy_from_slice(&src[(ch * ps + y) * ps..(ch * ps + y + 1) * ps]);
                }
            }
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All `n`-subsets of `0..total` in lexicographic order.
pub fn combinations(total: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > total {
        return Err(Error::Invalid(format!("subset size {n} outside 1..={total}")));
    }
    let mut out = Vec::with_capacity(binomial(total, n));
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        out.push(idx.clone());
        // rightmost position that can still advance
        let Some(pos) = (0..n).rev().find(|&i| idx[i] != i + total - n) else {
            return Ok(out);
        };
        idx[pos] += 1;
        for j in pos + 1..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All `n`-combinations of the `m^2` patch indices of an `m x m` grid.
pub fn enumerate_combinations(m: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::Invalid("grid side must be positive".into()));
    }
    combinations(m * m, n)
}

/// Fixed equal-use selections for the 2x2 grid with pairs, in use order.
pub const PAIRS_2X2: [[usize; 2]; 4] = [[0, 1], [2, 3], [0, 2], [1, 3]];

/// `k` of the `C(m^2, n)` subsets such that every patch index is used
/// equally often.
pub fn equal_use_subsets(m: usize, n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let all = enumerate_combinations(m, n)?;
    if k == 0 || k > all.len() {
        return Err(Error::Invalid(format!("pairs_used {k} outside 1..={}", all.len())));
    }
    if k == all.len() {
        return Ok(all);
    }
    let cells = m * m;
    if !(k * n).is_multiple_of(cells) {
        return Err(Error::Invalid(format!(
            "{k} subsets of size {n} cannot use each of {cells} patches equally"
        )));
    }
    if m == 2 && n == 2 {
        return Ok(PAIRS_2X2[..k].iter().map(|p| p.to_vec()).collect());
    }
    match equal_use_indices(&all, cells, k) {
        Some(idx) => Ok(idx.into_iter().map(|i| all[i].clone()).collect()),
        None => Err(Error::Invalid(format!("no equal-use selection of {k} subsets found for m={m}, n={n}"))),
    }
}

/// Indices into `all` (every `n`-subset of `0..cells`, sorted) of `k`
/// subsets using each cell equally often.
///
/// The full set is equal-use, so large `k` is solved through its complement.
/// Otherwise whole orbits under the cyclic shift `p -> p + 1 (mod cells)`
/// supply the bulk, since each full orbit is equal-use on its own, and a
/// bounded search fills the remaining fewer-than-`cells` subsets.
fn equal_use_indices(all: &[Vec<usize>], cells: usize, k: usize) -> Option<Vec<usize>> {
    if 2 * k > all.len() {
        let skip: HashSet<usize> = equal_use_indices(all, cells, all.len() - k)?.into_iter().collect();
        return Some((0..all.len()).filter(|i| !skip.contains(i)).collect());
    }
    let position: HashMap<&[usize], usize> = all.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();
    let mut seen = vec![false; all.len()];
    let mut orbits = Vec::new();
    for start in 0..all.len() {
        if seen[start] {
            continue;
        }
        let mut orbit = Vec::new();
        let mut cur = all[start].clone();
        loop {
            let i = position[cur.as_slice()];
            if seen[i] {
                break;
            }
            seen[i] = true;
            orbit.push(i);
            cur = cur.iter().map(|&p| (p + 1) % cells).collect();
            cur.sort_unstable();
        }
        if orbit.len() == cells {
            orbits.push(orbit);
        }
    }
    let n = all[0].len();
    for whole in (0..=(k / cells).min(orbits.len())).rev() {
        let mut chosen: Vec<usize> = orbits[..whole].concat();
        let taken: HashSet<usize> = chosen.iter().copied().collect();
        let pool: Vec<usize> = (0..all.len()).filter(|i| !taken.contains(i)).collect();
        let rest = k - chosen.len();
        let mut counts = vec![0usize; cells];
        let mut picked = Vec::with_capacity(rest);
        let mut budget = 200_000usize;
        if search_equal_use(all, &pool, 0, rest, rest * n / cells, &mut counts, &mut picked, &mut budget) {
            chosen.extend(picked);
            chosen.sort_unstable();
            return Some(chosen);
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn search_equal_use(
    all: &[Vec<usize>],
    pool: &[usize],
    start: usize,
    k: usize,
    cap: usize,
    counts: &mut [usize],
    chosen: &mut Vec<usize>,
    budget: &mut usize,
) -> bool {
    if chosen.len() == k {
        return counts.iter().all(|&c| c == cap);
    }
    if pool.len() - start < k - chosen.len() || *budget == 0 {
        return false;
    }
    *budget -= 1;
    for j in start..pool.len() {
        let set = &all[pool[j]];
        if set.iter().any(|&p| counts[p] == cap) {
            continue;
        }
        set.iter().for_each(|&p| counts[p] += 1);
        chosen.push(pool[j]);
        if search_equal_use(all, pool, j + 1, k, cap, counts, chosen, budget) {
            return true;
        }
        chosen.pop();
        set.iter().for_each(|&p| counts[p] -= 1);
    }
    false
}

/// Orients pairs so every index is first (the `gamma` side) exactly as often
/// as it is second. Needs every index to appear an even number of times.
pub fn balance_pair_orientation(pairs: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    if pairs.iter().any(|p| p.len() != 2) {
        return Err(Error::Invalid("orientation needs pairs".into()));
    }
    let nodes = pairs.iter().flatten().max().map_or(0, |&v| v + 1);
    let mut degree = vec![0usize; nodes];
    pairs.iter().flatten().for_each(|&v| degree[v] += 1);
    if degree.iter().any(|d| d % 2 != 0) {
        return Err(Error::Invalid(
            "weighted combine needs every patch to appear an even number of times".into(),
        ));
    }
    let mut used = vec![false; pairs.len()];
    let mut oriented = pairs.to_vec();
    // greedy walks on an even-degree multigraph close on their start vertex,
    // so each walk is a balanced circuit
    for start in 0..pairs.len() {
        if used[start] {
            continue;
        }
        let mut at = pairs[start][0];
        while let Some(e) = (0..pairs.len()).find(|&e| !used[e] && pairs[e].contains(&at)) {
            used[e] = true;
            let other = if pairs[e][0] == at { pairs[e][1] } else { pairs[e][0] };
            oriented[e] = vec![at, other];
            at = other;
        }
    }
    Ok(oriented)
}

/// How member embeddings are merged into one combined embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CombineOp {
    Mean,
    /// `gamma * first + (1 - gamma) * second`, `gamma` in `[0.5, 1)`.
    Weighted(f64),
    /// As `Weighted` with `gamma ~ Beta(a, a)` drawn per combination per step.
    Beta(f64),
    Max,
}

impl CombineOp {
    pub fn name(&self) -> &'static str {
        match self {
            CombineOp::Mean => "mean",
            CombineOp::Weighted(_) => "weighted",
            CombineOp::Beta(_) => "beta",
            CombineOp::Max => "max",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CombineOp::Weighted(g) if !(0.5..1.0).contains(&g) => {
                Err(Error::Invalid(format!("weighted gamma {g} outside [0.5, 1)")))
            }
            CombineOp::Beta(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::Invalid(format!("beta alpha {a} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Where in the online branch the Combine step runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CombineStage {
    /// Inside (or before) the encoder. Anything before `Final` stitches
    /// feature maps instead of averaging vectors.
    Encoder(EncoderStage),
    /// After the projector.
    Proj,
    /// After the predictor.
    Pred,
}

impl CombineStage {
    pub const FINAL: Self = CombineStage::Encoder(EncoderStage::Final);

    /// True when the combine acts on spatial maps (by stitching).
    pub fn is_spatial(&self) -> bool {
        matches!(self, CombineStage::Encoder(s) if *s != EncoderStage::Final)
    }
}

impl fmt::Display for CombineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombineStage::Encoder(s) => s.fmt(f),
            CombineStage::Proj => f.write_str("proj"),
            CombineStage::Pred => f.write_str("pred"),
        }
    }
}

impl FromStr for CombineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proj" => Ok(Self::Proj),
            "pred" => Ok(Self::Pred),
            other => other.parse().map(Self::Encoder),
        }
    }
}

/// Which stitched pairs go along which axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Side by side: concatenated along W.
    Horizontal,
    /// Stacked: concatenated along H.
    Vertical,
}

/// Orientation of the grid-adjacent pair `(p, q)` with `p < q`, or `None`
/// when the cells do not share an edge.
pub fn adjacency(m: usize, p: usize, q: usize) -> Option<Orientation> {
    let (p, q) = (p.min(q), p.max(q));
    let (pr, pc) = (p / m, p % m);
    let (qr, qc) = (q / m, q % m);
    if pr == qr && qc == pc + 1 {
        Some(Orientation::Horizontal)
    } else if pc == qc && qr == pr + 1 {
        Some(Orientation::Vertical)
    } else {
        None
    }
}

/// A grid size, the selected subsets, the operator and the stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationPlan {
    pub m: usize,
    pub n: usize,
    pub subsets: Vec<Vec<usize>>,
    pub op: CombineOp,
    pub stage: CombineStage,
    pub pairs_used: usize,
}

impl CombinationPlan {
    pub fn new(m: usize, n: usize, op: CombineOp, stage: CombineStage, pairs_used: usize) -> Result<Self> {
        op.validate()?;
        if m == 0 || n == 0 || n > m * m {
            return Err(Error::Invalid(format!("need 1 <= n <= m^2, got m={m}, n={n}")));
        }
        let mut subsets = equal_use_subsets(m, n, pairs_used)?;
        match op {
            CombineOp::Weighted(_) | CombineOp::Beta(_) if n != 2 => {
                return Err(Error::Invalid(format!("{} combine is defined for pairs only (n=2)", op.name())));
            }
            CombineOp::Weighted(g) if g != 0.5 => subsets = balance_pair_orientation(&subsets)?,
            _ => {}
        }
        if stage.is_spatial() {
            if m != 2 || n != 2 {
                return Err(Error::Invalid(format!("stitching at {stage} needs m=2, n=2")));
            }
            if op != CombineOp::Mean {
                return Err(Error::Invalid(format!("stitching at {stage} only supports the mean operator")));
            }
            // only edge-sharing pairs can be stitched
            subsets.retain(|s| adjacency(m, s[0], s[1]).is_some());
        }
        Ok(Self {
            m,
            n,
            subsets,
            op,
            stage,
            pairs_used,
        })
    }

    /// All combinations with the mean operator at the pooled embedding.
    pub fn standard(m: usize, n: usize) -> Result<Self> {
        Self::new(m, n, CombineOp::Mean, CombineStage::FINAL, binomial(m * m, n))
    }

    pub fn num_combined(&self) -> usize {
        self.subsets.len()
    }

    /// Member weights for each subset, drawing Beta weights from `rng`.
    pub fn weights<R: Rng>(&self, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        draw_weights(self.op, self.subsets.len(), self.n, rng)
    }

    /// Combines image-major patch rows into combination-major rows.
    pub fn combine<T: Scalar, R: Rng>(&self, tape: &mut Tape<T>, patches: Var, images: usize, rng: &mut R) -> Result<Var> {
        let per_image = self.m * self.m;
        combine_subsets(tape, patches, images, per_image, &self.subsets, self.op, rng)
    }
}

/// Shared body of every vector-level combine: rows of `x` are image-major
/// groups of `per_image` members; output row `c * images + i` merges the
/// members `subsets[c]` of image `i`.
pub fn combine_subsets<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    images: usize,
    per_image: usize,
    subsets: &[Vec<usize>],
    op: CombineOp,
    rng: &mut R,
) -> Result<Var> {
    if tape.shape(x)[0] != images * per_image {
        return Err(Error::shape(
            "combine",
            format!("{} rows for {images} images of {per_image} members", tape.shape(x)[0]),
        ));
    }
    if subsets.is_empty() || subsets.iter().any(|s| s.is_empty() || s.iter().any(|&p| p >= per_image)) {
        return Err(Error::Invalid("combine needs non-empty subsets of valid members".into()));
    }
    if op == CombineOp::Max {
        let n = subsets[0].len();
        let mut acc = tape.gather_rows(x, &member_rows(subsets, images, per_image, 0))?;
        for j in 1..n {
            let next = tape.gather_rows(x, &member_rows(subsets, images, per_image, j))?;
            acc = tape.max_elementwise(acc, next)?;
        }
        return Ok(acc);
    }
    let weights = draw_weights(op, subsets.len(), subsets[0].len(), rng)?;
    let mut groups = Vec::with_capacity(subsets.len() * images);
    for (subset, w) in subsets.iter().zip(&weights) {
        for i in 0..images {
            groups.push(
                subset
                    .iter()
                    .zip(w)
                    .map(|(&p, &wt)| (i * per_image + p, T::lit(wt)))
                    .collect(),
            );
        }
    }
    tape.row_combine(x, groups)
}

fn draw_weights<R: Rng>(op: CombineOp, count: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    match op {
        CombineOp::Mean | CombineOp::Max => Ok(vec![vec![1.0 / n as f64; n]; count]),
        CombineOp::Weighted(g) => Ok(vec![vec![g, 1.0 - g]; count]),
        CombineOp::Beta(a) => {
            let beta = Beta::new(a, a).map_err(|e| Error::Invalid(format!("beta({a}, {a}): {e}")))?;
            Ok((0..count)
                .map(|_| {
                    let g = beta.sample(rng);
                    vec![g, 1.0 - g]
                })
                .collect())
        }
    }
}

fn member_rows(subsets: &[Vec<usize>], images: usize, per_image: usize, j: usize) -> Vec<usize> {
    subsets
        .iter()
        .flat_map(|s| (0..images).map(move |i| i * per_image + s[j]))
        .collect()
}

/// `c = (1/n) sum v`.
pub fn combine_mean<T: Scalar>(members: &[&[T]]) -> Result<Vec<T>> {
    let first = members.first().ok_or_else(|| Error::Invalid("combine of an empty set".into()))?;
    check_dims(members)?;
    let inv = T::lit(1.0 / members.len() as f64);
    Ok((0..first.len())
        .map(|d| members.iter().map(|v| v[d]).sum::<T>() * inv)
        .collect())
}

/// `c = gamma * a + (1 - gamma) * b` with `gamma` in `[0.5, 1)`.
pub fn combine_weighted<T: Scalar>(a: &[T], b: &[T], gamma: f64) -> Result<Vec<T>> {
    CombineOp::Weighted(gamma).validate()?;
    convex(a, b, gamma)
}

/// Weighted combine with `gamma ~ Beta(alpha, alpha)`; returns the draw too.
pub fn combine_beta<T: Scalar, R: Rng>(a: &[T], b: &[T], alpha: f64, rng: &mut R) -> Result<(Vec<T>, f64)> {
    CombineOp::Beta(alpha).validate()?;
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Invalid(e.to_string()))?;
    let g = beta.sample(rng);
    Ok((convex(a, b, g)?, g))
}

pub fn combine_max<T: Scalar>(members: &[&[T]]) -> Result<Vec<T>> {
    let first = members.first().ok_or_else(|| Error::Invalid("combine of an empty set".into()))?;
    check_dims(members)?;
    Ok((0..first.len())
        .map(|d| members.iter().map(|v| v[d]).fold(T::neg_infinity(), T::max))
        .collect())
}

fn convex<T: Scalar>(a: &[T], b: &[T], g: f64) -> Result<Vec<T>> {
    check_dims(&[a, b])?;
    let (g, h) = (T::lit(g), T::lit(1.0 - g));
    Ok(a.iter().zip(b).map(|(&x, &y)| g * x + h * y).collect())
}

fn check_dims<T>(members: &[&[T]]) -> Result<()> {
    let d = members[0].len();
    if members.iter().any(|v| v.len() != d) {
        return Err(Error::shape("combine", "member dimensions differ"));
    }
    Ok(())
}

/// Stitches two equal-shape NCHW maps that sit at grid cells `pa` and `pb`
/// of an `m x m` grid, keeping their original relative placement.
pub fn stitch_pair<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, m: usize, pa: usize, pb: usize) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 4 {
        return Err(Error::shape(
            "stitch_pair",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let orient = adjacency(m, pa, pb)
        .ok_or_else(|| Error::Invalid(format!("patches {pa} and {pb} are not edge-adjacent in a {m}x{m} grid")))?;
    let (first, second) = if pa < pb { (a, b) } else { (b, a) };
    let axis = match orient {
        Orientation::Horizontal => 3,
        Orientation::Vertical => 2,
    };
    tape.concat(&[first, second], axis)
}

/// Stitches, for every image, each adjacent pair in `subsets`. Returns one
/// batch per orientation (they differ in shape) with the subset positions
/// each batch covers, rows ordered `pair-major, image-minor`.
pub fn stitch_subsets<T: Scalar>(
    tape: &mut Tape<T>,
    maps: Var,
    images: usize,
    m: usize,
    subsets: &[Vec<usize>],
) -> Result<Vec<(Var, Vec<usize>)>> {
    let per_image = m * m;
    let mut out = Vec::new();
    for orient in [Orientation::Horizontal, Orientation::Vertical] {
        let members: Vec<usize> = (0..subsets.len())
            .filter(|&c| adjacency(m, subsets[c][0], subsets[c][1]) == Some(orient))
            .collect();
        if members.is_empty() {
            continue;
        }
        let rows = |j: usize| -> Vec<usize> {
            members
                .iter()
                .flat_map(|&c| {
                    let lo = subsets[c][0].min(subsets[c][1]);
                    let hi = subsets[c][0].max(subsets[c][1]);
                    let p = if j == 0 { lo } else { hi };
                    (0..images).map(move |i| i * per_image + p)
                })
                .collect()
        };
        let first = tape.gather_rows(maps, &rows(0))?;
        let second = tape.gather_rows(maps, &rows(1))?;
        let axis = if orient == Orientation::Horizontal { 3 } else { 2 };
        out.push((tape.concat(&[first, second], axis)?, members));
    }
    if out.is_empty() {
        return Err(Error::Invalid("no stitchable (edge-adjacent) pairs selected".into()));
    }
    Ok(out)
}

/// Which patch sits in which montage slot. Slot `s` is quadrant `s % 4`
/// (row-major) of montage `s / 4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MontagePlacement {
    slots: Vec<usize>,
}

impl MontagePlacement {
    pub fn random<R: Rng>(patches: usize, rng: &mut R) -> Result<Self> {
        if patches == 0 || !patches.is_multiple_of(4) {
            return Err(Error::Invalid(format!("{patches} patches do not fill 2x2 montages")));
        }
        let mut slots: Vec<usize> = (0..patches).collect();
        slots.shuffle(rng);
        Ok(Self { slots })
    }

    pub fn from_slots(slots: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; slots.len()];
        for &s in &slots {
            if s >= slots.len() || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Invalid("montage placement is not a permutation".into()));
            }
        }
        if slots.is_empty() || !slots.len().is_multiple_of(4) {
            return Err(Error::Invalid("montage placement must fill whole montages".into()));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn montages(&self) -> usize {
        self.slots.len() / 4
    }

    /// Slot holding each patch.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.slots.len()];
        for (s, &p) in self.slots.iter().enumerate() {
            inv[p] = s;
        }
        inv
    }
}

/// Places `4K` equal-size patches into `K` 2x2 montages.
pub fn montage_assemble<T: Scalar, R: Rng>(patches: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, MontagePlacement)> {
    let placement = MontagePlacement::random(patches.rows(), rng)?;
    let montages = montage_from_placement(patches, &placement)?;
    Ok((montages, placement))
}

pub fn montage_from_placement<T: Scalar>(patches: &Tensor<T>, placement: &MontagePlacement) -> Result<Tensor<T>> {
    if patches.rows() != placement.slots.len() {
        return Err(Error::shape(
            "montage",
            format!("{} patches for {} slots", patches.rows(), placement.slots.len()),
        ));
    }
    let ordered = patches.select_rows(&placement.slots)?;
    reassemble(&ordered, 2)
}

/// Splits K montage feature maps into quadrants, pools each, and returns
/// one embedding per original patch, in patch order.
pub fn montage_disassemble<T: Scalar>(tape: &mut Tape<T>, feat: Var, placement: &MontagePlacement) -> Result<Var> {
    let [k, _, h, w] = dims4(tape.value(feat), "montage_disassemble")?;
    if k != placement.montages() || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "montage_disassemble",
            format!("{k} maps of {h}x{w} for {} montages", placement.montages()),
        ));
    }
    let mut quads = Vec::with_capacity(4);
    for q in 0..4 {
        let rows = tape.slice(feat, 2, (q / 2) * h / 2, h / 2)?;
        quads.push(tape.slice(rows, 3, (q % 2) * w / 2, w / 2)?);
    }
    // row q * K + montage
    let stacked = tape.concat(&quads, 0)?;
    let pooled = tape.global_avg_pool(stacked)?;
    let order: Vec<usize> = placement
        .inverse()
        .into_iter()
        .map(|slot| (slot % 4) * k + slot / 4)
        .collect();
    tape.gather_rows(pooled, &order)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn img(n: usize, c: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, c, s, s], |i| i as f64)
    }

    #[test]
    fn divide_tiles_exactly() {
        let x = img(2, 3, 32);
        let p = divide(&x, 2).unwrap();
        assert_eq!(p.shape(), &[8, 3, 16, 16]);
        assert_eq!(reassemble(&p, 2).unwrap(), x);
        // top-left pixel of patch 1 (top-right cell) of image 0
        assert_eq!(p.row(1)[0], x.data()[16]);
        assert_eq!(divide(&x, 1).unwrap(), x);
        let y = img(1, 3, 30);
        assert_eq!(divide(&y, 3).unwrap().shape(), &[9, 3, 10, 10]);
        assert!(divide(&y, 4).is_err());
    }

    #[test]
    fn crop_to_grid_centres() {
        let x = img(2, 3, 32);
        assert_eq!(crop_to_grid(&x, 2).unwrap(), x);
        let c = crop_to_grid(&x, 3).unwrap();
        assert_eq!(c.shape(), &[2, 3, 30, 30]);
        assert_eq!(c.data()[0], x.data()[33]);
        assert_eq!(divide(&c, 3).unwrap().shape(), &[18, 3, 10, 10]);
    }

    #[test]
    fn combination_counts() {
        assert_eq!(enumerate_combinations(2, 2).unwrap().len(), 6);
        assert_eq!(enumerate_combinations(2, 4).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert_eq!(enumerate_combinations(3, 3).unwrap().len(), 84);
        assert_eq!(combinations(8, 2).unwrap().len(), 28);
        assert!(enumerate_combinations(2, 5).is_err());
        assert!(enumerate_combinations(2, 0).is_err());
    }

    #[test]
    fn equal_use_patterns() {
        for (k, want) in [(2, 1), (4, 2), (6, 3)] {
            let s = equal_use_subsets(2, 2, k).unwrap();
            assert_eq!(s.len(), k);
            for p in 0..4 {
                assert_eq!(s.iter().filter(|x| x.contains(&p)).count(), want);
            }
        }
        assert_eq!(equal_use_subsets(2, 2, 2).unwrap(), vec![vec![0, 1], vec![2, 3]]);
        assert!(equal_use_subsets(2, 2, 3).is_err());
        let s = equal_use_subsets(3, 3, 6).unwrap();
        for p in 0..9 {
            assert_eq!(s.iter().filter(|x| x.contains(&p)).count(), 2);
        }
    }

    #[test]
    fn weighted_orientation_is_balanced() {
        let pairs = equal_use_subsets(2, 2, 4).unwrap();
        let o = balance_pair_orientation(&pairs).unwrap();
        for p in 0..4 {
            assert_eq!(o.iter().filter(|x| x[0] == p).count(), 1);
            assert_eq!(o.iter().filter(|x| x[1] == p).count(), 1);
        }
        assert!(balance_pair_orientation(&enumerate_combinations(2, 2).unwrap()).is_err());
    }

    #[test]
    fn combine_operators() {
        let (a, b) = ([1.0, 3.0], [3.0, 1.0]);
        assert_eq!(combine_mean::<f64>(&[&a, &b]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(combine_mean::<f64>(&[&a]).unwrap(), a.to_vec());
        assert_eq!(combine_mean::<f64>(&[&b, &a]).unwrap(), combine_mean::<f64>(&[&a, &b]).unwrap());
        assert!(combine_mean::<f64>(&[]).is_err());
        assert_eq!(combine_max::<f64>(&[&a, &b]).unwrap(), vec![3.0, 3.0]);
        assert_eq!(combine_max::<f64>(&[&a, &a]).unwrap(), a.to_vec());
        let w = combine_weighted::<f64>(&[1.0, 0.0], &[0.0, 1.0], 0.7).unwrap();
        assert!((w[0] - 0.7).abs() < 1e-15 && (w[1] - 0.3).abs() < 1e-15);
        assert_eq!(combine_weighted::<f64>(&a, &b, 0.5).unwrap(), combine_mean::<f64>(&[&a, &b]).unwrap());
        let near = combine_weighted::<f64>(&a, &b, 1.0 - 1e-12).unwrap();
        assert!((near[0] - 1.0).abs() < 1e-9 && (near[1] - 3.0).abs() < 1e-9);
        assert!(combine_weighted::<f64>(&a, &b, 1.0).is_err());
        assert!(combine_weighted::<f64>(&a, &b, 0.4).is_err());
        assert!(combine_beta::<f64, _>(&a, &b, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let r1 = combine_beta::<f64, _>(&a, &b, 4.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r2 = combine_beta::<f64, _>(&a, &b, 4.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn plan_validation() {
        assert!(CombinationPlan::new(2, 5, CombineOp::Mean, CombineStage::FINAL, 1).is_err());
        assert!(CombinationPlan::new(2, 3, CombineOp::Weighted(0.7), CombineStage::FINAL, 4).is_err());
        let w = CombinationPlan::new(2, 2, CombineOp::Weighted(0.7), CombineStage::FINAL, 4).unwrap();
        assert_eq!(w.num_combined(), 4);
        let s: CombineStage = "stage2".parse().unwrap();
        let st = CombinationPlan::new(2, 2, CombineOp::Mean, s, 6).unwrap();
        assert_eq!(st.subsets, vec![vec![0, 1], vec![0, 2], vec![1, 3], vec![2, 3]]);
        assert!(CombinationPlan::new(3, 2, CombineOp::Mean, s, 36).is_err());
        assert_eq!(CombinationPlan::standard(1, 1).unwrap().subsets, vec![vec![0]]);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in ["input", "stage1", "stage2", "stage3", "final", "proj", "pred"] {
            assert_eq!(s.parse::<CombineStage>().unwrap().to_string(), s);
        }
        assert!("stage0".parse::<CombineStage>().is_err());
        assert!("middle".parse::<CombineStage>().is_err());
    }

    #[test]
    fn stitch_reassembles_halves() {
        let x = img(1, 3, 32);
        let p = divide(&x, 2).unwrap();
        let mut tape = Tape::new();
        let q: Vec<Var> = (0..4).map(|i| tape.constant(p.select_rows(&[i]).unwrap())).collect();
        let top = stitch_pair(&mut tape, q[0], q[1], 2, 0, 1).unwrap();
        assert_eq!(tape.shape(top), &[1, 3, 16, 32]);
        let bottom = stitch_pair(&mut tape, q[3], q[2], 2, 3, 2).unwrap();
        let whole = tape.concat(&[top, bottom], 2).unwrap();
        assert_eq!(tape.value(whole), &x);
        assert!(stitch_pair(&mut tape, q[0], q[3], 2, 0, 3).is_err());
        assert!(stitch_pair(&mut tape, q[1], q[2], 2, 1, 2).is_err());
        let left = stitch_pair(&mut tape, q[0], q[2], 2, 0, 2).unwrap();
        assert_eq!(tape.shape(left), &[1, 3, 32, 16]);

        let f = tape.constant(Tensor::<f64>::zeros(&[1, 128, 8, 8]));
        let g = tape.constant(Tensor::<f64>::ones(&[1, 128, 8, 8]));
        let s = stitch_pair(&mut tape, f, g, 2, 0, 1).unwrap();
        assert_eq!(tape.shape(s), &[1, 128, 8, 16]);
    }

    #[test]
    fn montage_routing_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches = Tensor::<f64>::from_fn(&[8, 2, 4, 4], |i| (i / 32) as f64);
        let (mont, placement) = montage_assemble(&patches, &mut rng).unwrap();
        assert_eq!(mont.shape(), &[2, 2, 8, 8]);
        let mut tape = Tape::new();
        let f = tape.constant(mont);
        let emb = montage_disassemble(&mut tape, f, &placement).unwrap();
        // every patch is constant-valued with its own index
        for p in 0..8 {
            assert_eq!(tape.value(emb).row(p), &[p as f64, p as f64]);
        }
        assert!(MontagePlacement::from_slots(vec![0, 1, 2, 2]).is_err());
        assert!(MontagePlacement::random(6, &mut rng).is_err());
    }
}
