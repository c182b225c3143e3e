//! Low-rank layers and the rank-adaptive KLS training step.
//!
//! A low-rank weight is `W = U S Vᵀ` with `U ∈ ℝ^{n_out×r}`, `V ∈ ℝ^{n_in×r}` orthonormal
//! and `S ∈ ℝ^{r×r}`. One [`dlrt_step`] runs, for every low-rank layer at once:
//!
//! 1. K-step and L-step: integrate `K = U S` and `L = V Sᵀ` along `−∂K L = −(∂W L) V` and
//!    `−∂L L = −(∂W L)ᵀ U`, both evaluated on the same parameter snapshot.
//! 2. Basis update: new orthonormal bases for `range(K)` and `range(L)`, augmented with
//!    the old `U`, `V` in adaptive mode so the old weight stays representable.
//! 3. S-step: project `S` onto the new bases (`M S Nᵀ`), then integrate along
//!    `−∂S L = −Uᵀ (∂W L) V`.
//! 4. Adaptive truncation of the core's spectrum at `ϑ = τ ‖Σ‖_F`.
//! 5. Bias update with the gradient taken at the new factors.
//!
//! Factor gradients never form `∂W L`: with `δ` the backprop signal at a layer's
//! pre-activation and `x` its input, `∂K = δ (Vᵀx)ᵀ`, `∂L = x (Uᵀδ)ᵀ`, `∂S = (Uᵀδ)(Vᵀx)ᵀ`.

use serde::{Deserialize, Serialize};

use crate::linalg::{orthonormal_basis, qr_reduced, svd_small};
use crate::netcore::{
    accuracy, backward, cross_entropy_loss, dense_gradient, forward, Batch, DenseGradient, Network, NetworkSpec,
    Weight,
};
use crate::optim::{one_step_integrate, one_step_integrate_vec, IntegratorKind, OptimizerStates, ParamId, ParamTag};
use crate::rng::{gaussian_matrix_from, stream};
use crate::{Error, Matrix, Result};

/// Smallest rank a layer is truncated to.
pub const DEFAULT_MIN_RANK: usize = 2;

/// Factors `U S Vᵀ` of one low-rank weight, with its admissible rank range.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub u: Matrix,
    pub s: Matrix,
    pub v: Matrix,
    pub r_min: usize,
    pub r_max: usize,
}

impl LowRankFactors {
    /// Checks shapes, rank bounds and orthonormality (to 1e-8) before accepting the parts.
    pub fn from_parts(u: Matrix, s: Matrix, v: Matrix, r_min: usize, r_max: usize) -> Result<Self> {
        let r = s.rows();
        if s.cols() != r || u.cols() != r || v.cols() != r {
            return Err(Error::invalid(format!(
                "factor shapes u {:?}, s {:?}, v {:?} are not conformable",
                u.shape(),
                s.shape(),
                v.shape()
            )));
        }
        if r_min == 0 || r_max > u.rows().min(v.rows()) || !(r_min..=r_max).contains(&r) {
            return Err(Error::invalid(format!("rank {r} outside [{r_min}, {r_max}]")));
        }
        for (name, m) in [("u", &u), ("v", &v)] {
            if orthonormality_defect(m) > 1e-8 {
                return Err(Error::invalid(format!("{name} does not have orthonormal columns")));
            }
        }
        Ok(LowRankFactors { u, s, v, r_min, r_max })
    }

    /// Seeded initialization: `U`, `V` are Q factors of Gaussian matrices and `S` is
    /// Gaussian scaled by `sqrt(2 / n_in)`. Default rank is `⌈min(n_in, n_out) / 2⌉`; the
    /// truncation floor is two, or the initial rank when that is smaller.
    pub fn random(n_out: usize, n_in: usize, rank: Option<usize>, seed: u64) -> Result<Self> {
        let r_max = n_out.min(n_in);
        let r = rank.unwrap_or(r_max.div_ceil(2));
        if r == 0 || r > r_max {
            return Err(Error::invalid(format!("initial rank {r} outside [1, {r_max}]")));
        }
        let r_min = DEFAULT_MIN_RANK.min(r);
        let mut rng = stream(seed);
        let (u, _) = qr_reduced(&gaussian_matrix_from(n_out, r, &mut rng))?;
        let (v, _) = qr_reduced(&gaussian_matrix_from(n_in, r, &mut rng))?;
        let s = gaussian_matrix_from(r, r, &mut rng).scaled((2.0 / n_in as f64).sqrt());
        Ok(LowRankFactors { u, s, v, r_min, r_max })
    }

    /// Best rank-`rank` approximation of a dense weight (truncated SVD).
    pub fn from_dense(w: &Matrix, rank: usize) -> Result<Self> {
        let r_max = w.rows().min(w.cols());
        if rank == 0 || rank > r_max {
            return Err(Error::invalid(format!("rank {rank} exceeds min dimension {r_max}")));
        }
        let svd = svd_small(w);
        Ok(LowRankFactors {
            u: svd.p.leading_columns(rank),
            s: Matrix::from_diag(&svd.sigma[..rank]),
            v: svd.q.leading_columns(rank),
            r_min: DEFAULT_MIN_RANK.min(rank),
            r_max,
        })
    }

    pub fn rank(&self) -> usize {
        self.s.rows()
    }

    pub fn n_out(&self) -> usize {
        self.u.rows()
    }

    pub fn n_in(&self) -> usize {
        self.v.rows()
    }

    pub fn effective_weight(&self) -> Matrix {
        effective_weight(self)
    }

    /// `U S`, the factor the network is evaluated with during inference.
    pub fn deploy_factor(&self) -> Matrix {
        self.u.matmul(&self.s).expect("conformable")
    }
}

/// `U S Vᵀ`.
pub fn effective_weight(f: &LowRankFactors) -> Matrix {
    f.u.matmul(&f.s).expect("conformable").matmul_t(&f.v).expect("conformable")
}

pub(crate) fn orthonormality_defect(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).expect("square gram");
    g.sub(&Matrix::identity(q.cols())).expect("same shape").frobenius_norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TruncationPolicy {
    /// Augment bases each step and truncate the core at `ϑ = τ ‖Σ‖_F`.
    Adaptive { tau: f64 },
    /// Keep every layer at its current rank; no augmentation, no truncation.
    Fixed,
}

impl TruncationPolicy {
    pub fn is_adaptive(&self) -> bool {
        matches!(self, TruncationPolicy::Adaptive { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationPolicy::Adaptive { tau } if !(tau > 0.0 && tau < 1.0) => {
                Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorPhase {
    K,
    L,
    S,
}

/// Gradient of the loss with respect to one factor of a low-rank weight, from the
/// pre-activation signal `delta` (`n_out × m`) and the layer input `input` (`n_in × m`).
pub fn phase_gradient(f: &LowRankFactors, delta: &Matrix, input: &Matrix, phase: FactorPhase) -> Matrix {
    match phase {
        FactorPhase::K => delta.matmul_t(&f.v.t_matmul(input).expect("conformable")).expect("conformable"),
        FactorPhase::L => input.matmul_t(&f.u.t_matmul(delta).expect("conformable")).expect("conformable"),
        FactorPhase::S => {
            let ud = f.u.t_matmul(delta).expect("conformable");
            ud.matmul_t(&f.v.t_matmul(input).expect("conformable")).expect("conformable")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub factor: Matrix,
    pub bias: Vec<f64>,
}

/// Factor gradients of every low-rank layer from one taped pass.
#[derive(Debug, Clone)]
pub struct FactorGradients {
    pub phase: FactorPhase,
    pub loss: f64,
    /// Indexed by layer; `None` for layers without low-rank weights.
    pub layers: Vec<Option<LayerGradient>>,
}

fn check_factors(net: &Network) -> Result<()> {
    for (k, layer) in net.layers.iter().enumerate() {
        if let Some(f) = layer.affine().and_then(|a| a.weight.as_low_rank()) {
            let conformable = f.u.cols() == f.s.rows() && f.v.cols() == f.s.cols();
            if !conformable {
                return Err(Error::invalid(format!("layer {k}: non-conformable factors")));
            }
        }
    }
    Ok(())
}

fn factor_gradients(net: &Network, batch: &Batch, phase: FactorPhase) -> Result<FactorGradients> {
    check_factors(net)?;
    let (logits, tape) = forward(net, &batch.inputs, true)?;
    let tape = tape.expect("recorded");
    let loss = cross_entropy_loss(&logits, &batch.labels)?;
    let adj = backward(net, &tape, &batch.labels, false)?;
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let f = layer.affine()?.weight.as_low_rank()?;
            let delta = adj.deltas[k].as_ref()?;
            Some(LayerGradient {
                factor: phase_gradient(f, delta, tape.affine_input(k), phase),
                bias: delta.row_sums(),
            })
        })
        .collect();
    Ok(FactorGradients { phase, loss, layers })
}

/// ∂L/∂K for all low-rank layers, with `W = K Vᵀ`, `K = U S`.
pub fn k_gradients(net: &Network, batch: &Batch) -> Result<FactorGradients> {
    factor_gradients(net, batch, FactorPhase::K)
}

/// ∂L/∂L for all low-rank layers, with `W = U Lᵀ`, `L = V Sᵀ`.
pub fn l_gradients(net: &Network, batch: &Batch) -> Result<FactorGradients> {
    factor_gradients(net, batch, FactorPhase::L)
}

/// ∂L/∂S for all low-rank layers at their current bases.
pub fn s_gradients(net: &Network, batch: &Batch) -> Result<FactorGradients> {
    factor_gradients(net, batch, FactorPhase::S)
}

/// New bases after the K- and L-steps, with projections `M = Ũᵀ U`, `N = Ṽᵀ V`.
#[derive(Debug, Clone)]
pub struct BasisUpdate {
    pub u: Matrix,
    pub v: Matrix,
    pub m: Matrix,
    pub n: Matrix,
}

pub fn basis_update(layer: &LowRankFactors, k_new: &Matrix, l_new: &Matrix, adaptive: bool) -> Result<BasisUpdate> {
    let r = layer.rank();
    if k_new.shape() != (layer.n_out(), r) || l_new.shape() != (layer.n_in(), r) {
        return Err(Error::invalid(format!(
            "K {:?} / L {:?} do not match rank-{r} layer {}x{}",
            k_new.shape(),
            l_new.shape(),
            layer.n_out(),
            layer.n_in()
        )));
    }
    let (u, v) = if adaptive {
        (
            orthonormal_basis(&k_new.hstack(&layer.u)?),
            orthonormal_basis(&l_new.hstack(&layer.v)?),
        )
    } else {
        (qr_reduced(k_new)?.0, qr_reduced(l_new)?.0)
    };
    let m = u.t_matmul(&layer.u)?;
    let n = v.t_matmul(&layer.v)?;
    Ok(BasisUpdate { u, v, m, n })
}

/// Initial core of the S-step, `M S Nᵀ`.
pub fn s_init(s: &Matrix, m: &Matrix, n: &Matrix) -> Result<Matrix> {
    if m.cols() != s.rows() || n.cols() != s.cols() {
        return Err(Error::invalid(format!(
            "s_init: m {:?}, s {:?}, n {:?}",
            m.shape(),
            s.shape(),
            n.shape()
        )));
    }
    m.matmul(s)?.matmul_t(n)
}

/// How [`truncate`] picks the new rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankSelection {
    /// Smallest rank whose discarded tail has 2-norm ≤ `τ ‖Σ‖_F`, clamped to bounds.
    Threshold { tau: f64, r_min: usize, r_max: usize },
    Exact(usize),
}

#[derive(Debug, Clone)]
pub struct Truncation {
    pub u: Matrix,
    pub s: Matrix,
    pub v: Matrix,
    /// Singular values of the untruncated core.
    pub sigma: Vec<f64>,
    pub threshold: f64,
}

impl Truncation {
    pub fn rank(&self) -> usize {
        self.s.rows()
    }
}

/// Smallest `r` with `(Σ_{i≥r} σᵢ²)^{1/2} ≤ threshold` for descending `sigma`.
pub fn rank_for_threshold(sigma: &[f64], threshold: f64) -> usize {
    let mut tail_sq = 0.0;
    let mut r = sigma.len();
    // Walk from the smallest singular value up while the tail still fits.
    for (i, &s) in sigma.iter().enumerate().rev() {
        let next = tail_sq + s * s;
        if next.sqrt() > threshold {
            break;
        }
        tail_sq = next;
        r = i;
    }
    r
}

/// SVD of the new core, then keep the leading singular triplets.
pub fn truncate(s_new: &Matrix, u: &Matrix, v: &Matrix, selection: RankSelection) -> Result<Truncation> {
    if u.cols() != s_new.rows() || v.cols() != s_new.cols() {
        return Err(Error::invalid(format!(
            "truncate: u {:?}, s {:?}, v {:?}",
            u.shape(),
            s_new.shape(),
            v.shape()
        )));
    }
    let svd = svd_small(s_new);
    let k = svd.sigma.len();
    let (r, threshold) = match selection {
        RankSelection::Threshold { tau, r_min, r_max } => {
            let norm = svd.sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
            let theta = tau * norm;
            let r = rank_for_threshold(&svd.sigma, theta).clamp(r_min, r_max).min(k);
            (r, theta)
        }
        RankSelection::Exact(r) => {
            if r == 0 || r > k {
                return Err(Error::invalid(format!("cannot keep rank {r} of a core with {k} values")));
            }
            (r, 0.0)
        }
    };
    Ok(Truncation {
        u: u.matmul(&svd.p.leading_columns(r))?,
        s: Matrix::from_diag(&svd.sigma[..r]),
        v: v.matmul(&svd.q.leading_columns(r))?,
        sigma: svd.sigma,
        threshold,
    })
}

/// Loss and accuracy on the step's batch, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

fn factors_mut(net: &mut Network, k: usize) -> &mut LowRankFactors {
    net.layers[k]
        .affine_mut()
        .and_then(|a| a.weight.as_low_rank_mut())
        .expect("low-rank layer")
}

/// One DLRT iteration on `batch`.
///
/// Dense layers in the same network take a plain integrator step with the gradient from
/// the K/L pass. Adam moments of a layer's K, L and S are reset whenever its rank changes.
pub fn dlrt_step(
    net: &mut Network,
    batch: &Batch,
    policy: &TruncationPolicy,
    integrator: &IntegratorKind,
    states: &mut OptimizerStates,
) -> Result<StepStats> {
    policy.validate()?;
    check_factors(net)?;
    let low_rank = net.low_rank_layers();
    let adaptive = policy.is_adaptive();

    // K/L pass: both gradients come from one forward/backward on the current snapshot.
    let (logits, tape) = forward(net, &batch.inputs, true)?;
    let tape = tape.expect("recorded");
    let stats = StepStats {
        loss: cross_entropy_loss(&logits, &batch.labels)?,
        accuracy: accuracy(&logits, &batch.labels),
    };
    let adj = backward(net, &tape, &batch.labels, false)?;
    let mut dense_grads: Vec<(usize, DenseGradient)> = Vec::new();
    let mut kl_grads: Vec<(usize, Matrix, Matrix)> = Vec::new();
    for (k, layer) in net.layers.iter().enumerate() {
        let (Some(a), Some(delta)) = (layer.affine(), adj.deltas[k].as_ref()) else { continue };
        let input = tape.affine_input(k);
        match &a.weight {
            Weight::Dense(_) => dense_grads.push((k, dense_gradient(delta, input))),
            Weight::LowRank(f) => kl_grads.push((
                k,
                phase_gradient(f, delta, input, FactorPhase::K),
                phase_gradient(f, delta, input, FactorPhase::L),
            )),
            Weight::Deploy { .. } => {
                return Err(Error::invalid(format!("layer {k} is in deploy form and cannot be trained")))
            }
        }
    }
    drop(tape);
    drop(adj);

    // K- and L-steps, basis update and the projected S initial value.
    let mut old_ranks = Vec::with_capacity(low_rank.len());
    for (k, grad_k, grad_l) in kl_grads {
        let f = factors_mut(net, k);
        old_ranks.push(f.rank());
        let mut k_mat = f.u.matmul(&f.s)?;
        let mut l_mat = f.v.matmul_t(&f.s)?;
        one_step_integrate(&mut k_mat, &grad_k, integrator, states, ParamId::new(k, ParamTag::K))?;
        one_step_integrate(&mut l_mat, &grad_l, integrator, states, ParamId::new(k, ParamTag::L))?;
        let basis = basis_update(f, &k_mat, &l_mat, adaptive)?;
        f.s = s_init(&f.s, &basis.m, &basis.n)?;
        f.u = basis.u;
        f.v = basis.v;
    }

    if !low_rank.is_empty() {
        // S pass on the updated (possibly augmented) bases.
        let s_grads = s_gradients(net, batch)?;
        for (i, &k) in low_rank.iter().enumerate() {
            let grad = &s_grads.layers[k].as_ref().expect("low-rank layer").factor;
            let f = factors_mut(net, k);
            one_step_integrate(&mut f.s, grad, integrator, states, ParamId::new(k, ParamTag::S))?;
            if let TruncationPolicy::Adaptive { tau } = *policy {
                let t = truncate(
                    &f.s,
                    &f.u,
                    &f.v,
                    RankSelection::Threshold { tau, r_min: f.r_min, r_max: f.r_max },
                )?;
                f.u = t.u;
                f.s = t.s;
                f.v = t.v;
            }
            if f.rank() != old_ranks[i] {
                for tag in [ParamTag::K, ParamTag::L, ParamTag::S] {
                    states.reset_state(ParamId::new(k, tag));
                }
            }
        }

        // Bias pass at the new factors.
        let (_, tape) = forward(net, &batch.inputs, true)?;
        let tape = tape.expect("recorded");
        let adj = backward(net, &tape, &batch.labels, false)?;
        for &k in &low_rank {
            let grad = adj.deltas[k].as_ref().expect("affine layer").row_sums();
            let a = net.layers[k].affine_mut().expect("affine layer");
            one_step_integrate_vec(&mut a.bias, &grad, integrator, states, ParamId::new(k, ParamTag::Bias))?;
        }
    }

    for (k, g) in dense_grads {
        let a = net.layers[k].affine_mut().expect("affine layer");
        if let Weight::Dense(w) = &mut a.weight {
            one_step_integrate(w, &g.weight, integrator, states, ParamId::new(k, ParamTag::Weight))?;
        }
        one_step_integrate_vec(&mut a.bias, &g.bias, integrator, states, ParamId::new(k, ParamTag::Bias))?;
    }
    Ok(stats)
}

/// Weight-only parameter accounting (biases excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    /// Stored for inference: `r (n_in + n_out)` per low-rank layer.
    pub eval: usize,
    /// Peak during adaptive training: `2r (n_in + n_out) + 4r²` per low-rank layer.
    pub train: usize,
    /// Dense twin: `n_out · n_in` per layer.
    pub full: usize,
}

impl ParameterCounts {
    pub fn eval_compression(&self) -> f64 {
        1.0 - self.eval as f64 / self.full as f64
    }

    pub fn train_compression(&self) -> f64 {
        1.0 - self.train as f64 / self.full as f64
    }
}

/// Parameter counts of an architecture at the ranks recorded in `spec`.
pub fn parameter_counts(spec: &NetworkSpec) -> ParameterCounts {
    let mut counts = ParameterCounts { eval: 0, train: 0, full: 0 };
    for layer in &spec.layers {
        let Some((n_out, n_in)) = layer.weight_dims() else { continue };
        let full = n_out * n_in;
        counts.full += full;
        if layer.is_low_rank() {
            let r = layer.rank().unwrap_or(n_out.min(n_in).div_ceil(2));
            counts.eval += r * (n_in + n_out);
            counts.train += 2 * r * (n_in + n_out) + 4 * r * r;
        } else {
            counts.eval += full;
            counts.train += full;
        }
    }
    counts
}

/// Per-sample operation-count model of one training step: `r² (n_in + n_out)` for each
/// low-rank layer and `n_in · n_out` for each dense one.
pub fn step_cost_model(spec: &NetworkSpec) -> u64 {
    spec.layers
        .iter()
        .filter_map(|l| {
            let (n_out, n_in) = l.weight_dims()?;
            let cost = if l.is_low_rank() {
                let r = l.rank().unwrap_or(n_out.min(n_in).div_ceil(2));
                r * r * (n_in + n_out)
            } else {
                n_in * n_out
            };
            Some(cost as u64)
        })
        .sum()
}

#[cfg(test)]
mod tests;
