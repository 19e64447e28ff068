//! Pyramidal scanning over 2D feature maps.
//!
//! A map is scanned whole, then split into 2x2 quadrants that are scanned
//! recursively; each recursion level contributes half the remaining weight,
//! so for P = 2 the levels carry (1/2, 1/4, 1/4). The recursion is generic
//! over the per-level operator, which gives tests a seam to replace the
//! directional scan with simple maps.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Scope};
use crate::ssm::{scan4, Scan4Weights};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Quadrants in row-major order: top-left, top-right, bottom-left,
/// bottom-right. Requires even spatial extents.
pub fn split(g: &mut Graph, x: Var) -> Result<[Var; 4]> {
    let (_, _, h, w) = g.value(x).dims4("split")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("split", format!("spatial extent {h}x{w} must be even")));
    }
    let top = g.narrow(x, 2, 0, h / 2)?;
    let bot = g.narrow(x, 2, h / 2, h / 2)?;
    let tl = g.narrow(top, 3, 0, w / 2)?;
    let tr = g.narrow(top, 3, w / 2, w / 2)?;
    let bl = g.narrow(bot, 3, 0, w / 2)?;
    let br = g.narrow(bot, 3, w / 2, w / 2)?;
    Ok([tl, tr, bl, br])
}

/// Inverse of [`split`].
pub fn cat(g: &mut Graph, q: &[Var; 4]) -> Result<Var> {
    let top = g.concat(&[q[0], q[1]], 3)?;
    let bot = g.concat(&[q[2], q[3]], 3)?;
    g.concat(&[top, bot], 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidSpec {
    /// Number of subdivision levels P. Zero means a single whole-map scan.
    pub levels: usize,
    /// Share one parameter set across levels instead of one per level.
    pub shared: bool,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec { levels: 2, shared: false }
    }
}

/// Recursion core, generic over the per-level map operator.
/// At the deepest level the operator's output is returned as-is; above it,
/// the operator result and the re-assembled recursed quadrants are averaged.
pub fn ps_recursive_with<F>(
    g: &mut Graph,
    x: Var,
    level: usize,
    max_level: usize,
    op: &mut F,
) -> Result<Var>
where
    F: FnMut(&mut Graph, Var, usize) -> Result<Var>,
{
    let scanned = op(g, x, level)?;
    if level == max_level {
        return Ok(scanned);
    }
    let q = split(g, x)?;
    let r0 = ps_recursive_with(g, q[0], level + 1, max_level, op)?;
    let r1 = ps_recursive_with(g, q[1], level + 1, max_level, op)?;
    let r2 = ps_recursive_with(g, q[2], level + 1, max_level, op)?;
    let r3 = ps_recursive_with(g, q[3], level + 1, max_level, op)?;
    let merged = cat(g, &[r0, r1, r2, r3])?;
    let half_scan = g.scale(scanned, 0.5);
    let half_rec = g.scale(merged, 0.5);
    g.add(half_scan, half_rec)
}

/// Directional-scan weights for each pyramid level (or one shared set).
pub struct PsWeights {
    pub shared: bool,
    pub per_level: Vec<Scan4Weights>,
}

impl PsWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        scope: &Scope,
        channels: usize,
        state_dim: usize,
        dt_rank: usize,
        spec: PyramidSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if spec.shared { 1 } else { spec.levels + 1 };
        let mut per_level = Vec::with_capacity(count);
        for p in 0..count {
            per_level.push(Scan4Weights::create(
                store,
                &scope.sub(&format!("level{p}")),
                channels,
                state_dim,
                dt_rank,
                rng,
            )?);
        }
        Ok(PsWeights { shared: spec.shared, per_level })
    }

    pub fn level(&self, p: usize) -> &Scan4Weights {
        if self.shared {
            &self.per_level[0]
        } else {
            &self.per_level[p]
        }
    }
}

/// Pyramidal scan with directional-scan operators at every level.
pub fn ps_recursive(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    spec: PyramidSpec,
    w: &PsWeights,
) -> Result<Var> {
    if !w.shared && w.per_level.len() != spec.levels + 1 {
        return Err(invalid(
            "pyramid weights",
            format!("{} level sets for P = {}", w.per_level.len(), spec.levels),
        ));
    }
    ps_recursive_with(g, x, 0, spec.levels, &mut |g, x, p| scan4(g, store, x, w.level(p)))
}

/// One pyramidal scanning block: pre-norm over channels, pyramidal scan,
/// residual add.
pub struct PssWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub pyramid: PsWeights,
}

impl PssWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        scope: &Scope,
        channels: usize,
        state_dim: usize,
        dt_rank: usize,
        spec: PyramidSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PssWeights {
            gamma: store.add(scope.name("norm_gamma"), Tensor::full(&[channels], 1.0), true)?,
            beta: store.add(scope.name("norm_beta"), Tensor::zeros(&[channels]), true)?,
            pyramid: PsWeights::create(
                store,
                &scope.sub("ps"),
                channels,
                state_dim,
                dt_rank,
                spec,
                rng,
            )?,
        })
    }
}

pub fn pss_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: &PssWeights,
    spec: PyramidSpec,
) -> Result<Var> {
    let gamma = g.param(store, w.gamma);
    let beta = g.param(store, w.beta);
    let normed = g.layer_norm(x, 1, gamma, beta, LAYER_NORM_EPS)?;
    let scanned = ps_recursive(g, store, normed, spec, &w.pyramid)?;
    g.add(x, scanned)
}

/// M pyramidal scanning blocks applied in sequence.
pub fn pss_chain(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    blocks: &[PssWeights],
    spec: PyramidSpec,
) -> Result<Var> {
    let mut cur = x;
    for w in blocks {
        cur = pss_block(g, store, cur, w, spec)?;
    }
    Ok(cur)
}

/// Zeroes the merge projections of every level's directional scan, making
/// the pyramidal branch contribute exactly zero (residual path only).
#[doc(hidden)]
pub fn zero_merge_projections(store: &mut ParamStore, w: &PsWeights) {
    for level in &w.per_level {
        store.value_mut(level.merge_w).data_mut().fill(0.0);
        store.value_mut(level.merge_b).data_mut().fill(0.0);
    }
}
