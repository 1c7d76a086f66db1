//! Mixture-density head over style semantics.
//!
//! A two-layer trunk maps the prompt's semantic vector to mixture weights,
//! per-component means, and raw variances; a parallel noise branch (fed a
//! standard-normal vector during training, zeros at inference) adds to the
//! raw variances before the softplus. The noise mode then ties the variance
//! shape:
//!
//! - `FullyFactored` — one variance per component per dimension (K×d)
//! - `Isotropic` — one variance per component (K), shared over dimensions
//! - `IsotropicAcrossClusters` — a single variance shared by everything
//! - `FixedIsotropic` — a constant, never learned
//!
//! The NLL is the exact negative log density by default
//! (`exact_constant = true`); switching it off reproduces the reduced form
//! that keeps only the mixture-weight and quadratic terms, which is only a
//! valid comparison when σ is shared across components.

use anyhow::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::Linear;
use crate::tensor::{Grads, Graph, NodeId, ParamStore, Tensor};

pub const LN_2PI: f64 = 1.837_877_066_409_345_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    FullyFactored,
    Isotropic,
    IsotropicAcrossClusters,
    FixedIsotropic,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 4] = [
        NoiseMode::FullyFactored,
        NoiseMode::Isotropic,
        NoiseMode::IsotropicAcrossClusters,
        NoiseMode::FixedIsotropic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseMode::FullyFactored => "fully_factored",
            NoiseMode::Isotropic => "isotropic",
            NoiseMode::IsotropicAcrossClusters => "isotropic_across_clusters",
            NoiseMode::FixedIsotropic => "fixed_isotropic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnConfig {
    pub input_dim: usize,
    pub target_dim: usize,
    pub hidden: usize,
    pub components: usize,
    pub mode: NoiseMode,
    pub fixed_sigma: f64,
    pub var_floor: f64,
    pub exact_constant: bool,
    pub inference_noise: bool,
}

impl Default for MdnConfig {
    fn default() -> Self {
        MdnConfig {
            input_dim: 16,
            target_dim: 16,
            hidden: 64,
            components: 5,
            mode: NoiseMode::IsotropicAcrossClusters,
            fixed_sigma: 0.5,
            var_floor: 1e-6,
            exact_constant: true,
            inference_noise: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdnHeadParams {
    pub cfg: MdnConfig,
    pub trunk: Linear,
    pub logits: Linear,
    pub means: Linear,
    pub var_head: Linear,
    pub noise_in: Linear,
    pub noise_out: Linear,
}

impl MdnHeadParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: MdnConfig) -> Self {
        let kd = cfg.components * cfg.target_dim;
        MdnHeadParams {
            cfg,
            trunk: Linear::new(store, rng, "mdn.trunk", cfg.input_dim, cfg.hidden, true),
            logits: Linear::new(store, rng, "mdn.logits", cfg.hidden, cfg.components, true),
            means: Linear::new(store, rng, "mdn.means", cfg.hidden, kd, true),
            var_head: Linear::new(store, rng, "mdn.var", cfg.hidden, kd, true),
            noise_in: Linear::new(store, rng, "mdn.noise_in", cfg.input_dim, cfg.hidden, true),
            noise_out: Linear::new(store, rng, "mdn.noise_out", cfg.hidden, kd, false),
        }
    }

    /// Draw the noise-branch input for one training forward.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.cfg.input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// Graph handles for one forward pass.
pub struct MdnNodes {
    pub logits: NodeId,
    pub means: NodeId,
    pub variances: NodeId,
}

/// Valid mixture parameters (variances expanded to K×d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Tensor,
    pub variances: Tensor,
    pub mode: NoiseMode,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols
    }

    /// Distinct learnable variances exposed by the mode's tying pattern.
    pub fn variance_count(&self) -> usize {
        let (k, d) = (self.means.rows, self.means.cols);
        match self.mode {
            NoiseMode::FullyFactored => k * d,
            NoiseMode::Isotropic => k,
            NoiseMode::IsotropicAcrossClusters => 1,
            NoiseMode::FixedIsotropic => 0,
        }
    }

    /// Σ_k π_k μ_k — the analytic mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for k in 0..self.components() {
            for (o, &m) in out.iter_mut().zip(self.means.row(k).iter()) {
                *o += self.weights[k] * m;
            }
        }
        out
    }
}

/// Forward pass on the tape. `noise` is the standard-normal branch input;
/// pass `None` for deterministic inference (the branch sees zeros unless
/// `inference_noise` asks otherwise — in which case the caller supplies it).
pub fn mdn_forward_graph(
    g: &mut Graph,
    params: &MdnHeadParams,
    x: NodeId,
    noise: Option<&[f64]>,
) -> MdnNodes {
    let cfg = &params.cfg;
    let (k, d) = (cfg.components, cfg.target_dim);
    let h_pre = params.trunk.apply(g, x);
    let h = g.tanh(h_pre);
    let logits = params.logits.apply(g, h);
    let means_flat = params.means.apply(g, h);
    let means = g.reshape(means_flat, k, d);

    let variances = if cfg.mode == NoiseMode::FixedIsotropic {
        let v = cfg.fixed_sigma * cfg.fixed_sigma;
        g.constant(Tensor::filled(k, d, v))
    } else {
        let data_raw = params.var_head.apply(g, h);
        let eps = noise.map(|n| n.to_vec()).unwrap_or_else(|| vec![0.0; cfg.input_dim]);
        let eps_node = g.constant(Tensor::row_vector(eps));
        let n_pre = params.noise_in.apply(g, eps_node);
        let n_h = g.tanh(n_pre);
        let noise_raw = params.noise_out.apply(g, n_h);
        let raw_sum = g.add(data_raw, noise_raw);
        let raw = g.reshape(raw_sum, k, d);
        let sp = g.softplus(raw);
        let reduced = match cfg.mode {
            NoiseMode::FullyFactored => sp,
            NoiseMode::Isotropic => {
                let per_k = g.row_mean(sp);
                g.broadcast(per_k, k, d)
            }
            NoiseMode::IsotropicAcrossClusters => {
                let one = g.all_mean(sp);
                g.broadcast(one, k, d)
            }
            NoiseMode::FixedIsotropic => unreachable!(),
        };
        g.add_scalar(reduced, cfg.var_floor)
    };

    MdnNodes { logits, means, variances }
}

/// Materialize [`MixtureParams`] from graph nodes.
pub fn extract_mixture(g: &Graph, nodes: &MdnNodes) -> MixtureParams {
    let logits = g.val(nodes.logits);
    let max = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    let mp = MixtureParams {
        weights,
        means: g.val(nodes.means).clone(),
        variances: g.val(nodes.variances).clone(),
        mode: NoiseMode::FixedIsotropic, // overwritten by callers below
    };
    mp
}

/// Plain-value forward: softmaxed weights, means, mode-shaped variances.
pub fn mdn_forward(
    store: &ParamStore,
    params: &MdnHeadParams,
    x: &[f64],
    noise: Option<&[f64]>,
) -> Result<MixtureParams> {
    anyhow::ensure!(
        x.len() == params.cfg.input_dim,
        "input dim {} does not match head dim {}",
        x.len(),
        params.cfg.input_dim
    );
    let mut g = Graph::new(store);
    let xn = g.constant(Tensor::row_vector(x.to_vec()));
    let nodes = mdn_forward_graph(&mut g, params, xn, noise);
    let mut mp = extract_mixture(&g, &nodes);
    mp.mode = params.cfg.mode;
    let sum: f64 = mp.weights.iter().sum();
    debug_assert!((sum - 1.0).abs() <= 1e-6, "mixture weights must sum to 1");
    Ok(mp)
}

/// Exact (or reduced-form) negative log likelihood of `y` under the mixture.
///
/// exact: −logsumexp_k(ln π_k − ½‖(y−μ_k)/σ_k‖² − ½Σ_d ln σ²_kd) + (d/2)·ln 2π
/// reduced: −logsumexp_k(ln π_k − ½‖(y−μ_k)/σ_k‖²)
pub fn mixture_nll(y: &[f64], mp: &MixtureParams, exact_constant: bool) -> f64 {
    let (k, d) = (mp.components(), mp.dim());
    assert_eq!(y.len(), d, "target dim mismatch");
    let mut terms = Vec::with_capacity(k);
    for ki in 0..k {
        let mu = mp.means.row(ki);
        let var = mp.variances.row(ki);
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for i in 0..d {
            debug_assert!(var[i] > 0.0, "variance must be strictly positive");
            let diff = y[i] - mu[i];
            quad += diff * diff / var[i];
            logdet += var[i].ln();
        }
        let mut term = mp.weights[ki].ln() - 0.5 * quad;
        if exact_constant {
            term -= 0.5 * logdet;
        }
        terms.push(term);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|&t| (t - max).exp()).sum::<f64>().ln();
    let mut nll = -lse;
    if exact_constant {
        nll += 0.5 * d as f64 * LN_2PI;
    }
    nll
}

/// NLL on the tape, differentiable w.r.t. everything upstream of `nodes`.
pub fn nll_graph(g: &mut Graph, y: &[f64], nodes: &MdnNodes, exact_constant: bool) -> NodeId {
    let (k, d) = {
        let m = g.val(nodes.means);
        (m.rows, m.cols)
    };
    assert_eq!(y.len(), d);
    let y_node = g.constant(Tensor::row_vector(y.to_vec()));
    let y_b = g.broadcast(y_node, k, d);
    let diff = g.sub(y_b, nodes.means);
    let sq = g.mul(diff, diff);
    let ratio = g.div(sq, nodes.variances);
    let quad = g.row_sum(ratio); // K×1
    let half_quad = g.scale(quad, 0.5);

    let lse_logits = g.logsumexp_rows(nodes.logits); // 1×1
    let lse_b = g.broadcast(lse_logits, 1, k);
    let log_pi = g.sub(nodes.logits, lse_b); // 1×K

    let quad_row = g.transpose(half_quad); // 1×K
    let mut inner = g.sub(log_pi, quad_row);
    if exact_constant {
        let ln_var = g.ln(nodes.variances);
        let logdet = g.row_sum(ln_var);
        let half_logdet = g.scale(logdet, 0.5);
        let logdet_row = g.transpose(half_logdet);
        inner = g.sub(inner, logdet_row);
    }
    let lse = g.logsumexp_rows(inner); // 1×1
    let mut nll = g.scale(lse, -1.0);
    if exact_constant {
        nll = g.add_scalar(nll, 0.5 * d as f64 * LN_2PI);
    }
    nll
}

/// Loss value and gradients of the full head for one (x, y, ε) triple.
pub fn smsd_nll_grad(
    store: &ParamStore,
    params: &MdnHeadParams,
    x: &[f64],
    y: &[f64],
    noise: Option<&[f64]>,
) -> Result<(f64, Grads)> {
    anyhow::ensure!(x.len() == params.cfg.input_dim, "input dim mismatch");
    let mut g = Graph::new(store);
    let xn = g.constant(Tensor::row_vector(x.to_vec()));
    let nodes = mdn_forward_graph(&mut g, params, xn, noise);
    let loss = nll_graph(&mut g, y, &nodes, params.cfg.exact_constant);
    let value = g.val(loss).scalar();
    Ok((value, g.backward(loss)))
}

/// Draw component k ~ Categorical(π), then y ~ N(μ_k, σ²_k).
pub fn smsd_sample<R: Rng>(mp: &MixtureParams, rng: &mut R) -> (Vec<f64>, usize) {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut k = mp.components() - 1;
    for (i, &w) in mp.weights.iter().enumerate() {
        cum += w;
        if u < cum {
            k = i;
            break;
        }
    }
    let mu = mp.means.row(k);
    let var = mp.variances.row(k);
    let y = (0..mp.dim())
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            mu[i] + var[i].sqrt() * z
        })
        .collect();
    (y, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct dense mixture density: Σ_k π_k Π_d N(y_d; μ_kd, σ²_kd).
    fn brute_force_nll(y: &[f64], mp: &MixtureParams) -> f64 {
        let mut density = 0.0;
        for k in 0..mp.components() {
            let mut comp = mp.weights[k];
            for i in 0..mp.dim() {
                let var = mp.variances.at(k, i);
                let diff = y[i] - mp.means.at(k, i);
                comp *= (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            density += comp;
        }
        -density.ln()
    }

    fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize, mode: NoiseMode) -> MixtureParams {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights = exps.iter().map(|&e| e / z).collect();
        let means = Tensor::randn(rng, k, d, 1.2);
        let mut variances = Tensor::zeros(k, d);
        match mode {
            NoiseMode::FullyFactored => {
                for v in variances.data.iter_mut() {
                    *v = rng.gen_range(0.05..2.0);
                }
            }
            NoiseMode::Isotropic => {
                for ki in 0..k {
                    let v = rng.gen_range(0.05..2.0);
                    variances.row_mut(ki).fill(v);
                }
            }
            NoiseMode::IsotropicAcrossClusters => {
                let v = rng.gen_range(0.05..2.0);
                variances.data.fill(v);
            }
            NoiseMode::FixedIsotropic => variances.data.fill(0.25),
        }
        MixtureParams { weights, means, variances, mode }
    }

    fn head(mode: NoiseMode, seed: u64) -> (ParamStore, MdnHeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = MdnConfig {
            input_dim: 6,
            target_dim: 4,
            hidden: 8,
            components: 3,
            mode,
            ..MdnConfig::default()
        };
        let params = MdnHeadParams::new(&mut store, &mut rng, cfg);
        (store, params)
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let (mut store, params) = head(NoiseMode::Isotropic, 0);
        // zero the logits head → a = (0,0,0) → π = 1/3 each
        store.get_mut(params.logits.w).data.fill(0.0);
        store.get_mut(params.logits.b.unwrap()).data.fill(0.0);
        let mp = mdn_forward(&store, &params, &[0.3, -0.2, 0.8, 0.0, 1.0, -1.0], None).unwrap();
        for &w in &mp.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        let sum: f64 = mp.weights.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn fixed_isotropic_emits_the_constant() {
        let (store, params) = head(NoiseMode::FixedIsotropic, 1);
        let mp = mdn_forward(&store, &params, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0], None).unwrap();
        assert!(mp.variances.data.iter().all(|&v| v == 0.25));
        assert_eq!(mp.variance_count(), 0);
    }

    #[test]
    fn isotropic_across_clusters_reduction_matches_hand_computation() {
        let (mut store, params) = head(NoiseMode::IsotropicAcrossClusters, 2);
        // trunk: x=0 and zero bias → h = tanh(0) = 0 → raw variance = var bias;
        // noise branch: zeros in, zero hidden bias, no output bias → 0
        store.get_mut(params.trunk.b.unwrap()).data.fill(0.0);
        store.get_mut(params.noise_in.b.unwrap()).data.fill(0.0);
        let raw = [0.3, -0.7, 1.1, 0.25];
        {
            let b = store.get_mut(params.var_head.b.unwrap());
            // K=3, d=4 here; write one hand value per (k,d) cell of the first
            // 2×2 block and repeat for the rest so the mean is over known values
            for (i, v) in b.data.iter_mut().enumerate() {
                *v = raw[i % raw.len()];
            }
        }
        let mp = mdn_forward(&store, &params, &[0.0; 6], None).unwrap();
        let sp = |x: f64| x.exp().ln_1p();
        let expected = (sp(0.3) + sp(-0.7) + sp(1.1) + sp(0.25)) / 4.0 + 1e-6;
        for &v in &mp.variances.data {
            assert!((v - expected).abs() < 1e-12, "got {v}, expected {expected}");
        }
        assert_eq!(mp.variance_count(), 1);
    }

    #[test]
    fn standard_normal_nll_at_zero_is_half_ln_2pi() {
        let mp = MixtureParams {
            weights: vec![1.0],
            means: Tensor::zeros(1, 1),
            variances: Tensor::filled(1, 1, 1.0),
            mode: NoiseMode::FullyFactored,
        };
        let nll = mixture_nll(&[0.0], &mp, true);
        assert!((nll - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn duplicate_components_collapse_to_single() {
        let single = MixtureParams {
            weights: vec![1.0],
            means: Tensor::from_vec(1, 2, vec![0.4, -0.3]),
            variances: Tensor::from_vec(1, 2, vec![0.8, 1.3]),
            mode: NoiseMode::FullyFactored,
        };
        let double = MixtureParams {
            weights: vec![0.5, 0.5],
            means: Tensor::from_vec(2, 2, vec![0.4, -0.3, 0.4, -0.3]),
            variances: Tensor::from_vec(2, 2, vec![0.8, 1.3, 0.8, 1.3]),
            mode: NoiseMode::FullyFactored,
        };
        let y = [0.1, 0.2];
        assert!((mixture_nll(&y, &single, true) - mixture_nll(&y, &double, true)).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_brute_force_oracle_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in NoiseMode::ALL {
            for _ in 0..100 {
                let mp = random_mixture(&mut rng, 4, 8, mode);
                let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let ours = mixture_nll(&y, &mp, true);
                let oracle = brute_force_nll(&y, &mp);
                assert!(
                    (ours - oracle).abs() <= 1e-9,
                    "mode {mode:?}: {ours} vs oracle {oracle}"
                );
            }
        }
    }

    #[test]
    fn graph_nll_agrees_with_plain_nll() {
        for mode in NoiseMode::ALL {
            let (store, params) = head(mode, 7);
            let x = [0.3, -0.4, 0.9, 0.1, -0.2, 0.7];
            let y = [0.5, -0.5, 0.2, 0.0];
            let mp = mdn_forward(&store, &params, &x, None).unwrap();
            let plain = mixture_nll(&y, &mp, true);
            let mut g = Graph::new(&store);
            let xn = g.constant(Tensor::row_vector(x.to_vec()));
            let nodes = mdn_forward_graph(&mut g, &params, xn, None);
            let loss = nll_graph(&mut g, &y, &nodes, true);
            assert!((g.val(loss).scalar() - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        for (mi, mode) in NoiseMode::ALL.into_iter().enumerate() {
            let (mut store, params) = head(mode, 11 + mi as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + mi as u64);
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, grads) = smsd_nll_grad(&store, &params, &x, &y, Some(&noise)).unwrap();
            let h = 1e-5;
            for pid in 0..store.len() {
                let n = store.get(crate::tensor::ParamId(pid)).data.len();
                for i in 0..n {
                    let id = crate::tensor::ParamId(pid);
                    let orig = store.get(id).data[i];
                    store.get_mut(id).data[i] = orig + h;
                    let up = smsd_nll_grad(&store, &params, &x, &y, Some(&noise)).unwrap().0;
                    store.get_mut(id).data[i] = orig - h;
                    let down = smsd_nll_grad(&store, &params, &x, &y, Some(&noise)).unwrap().0;
                    store.get_mut(id).data[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.get(id).map(|t| t.data[i]).unwrap_or(0.0);
                    let denom = fd.abs().max(an.abs()).max(1e-3);
                    assert!(
                        ((fd - an) / denom).abs() <= 1e-4,
                        "mode {mode:?} param {pid} coord {i}: fd={fd} analytic={an}"
                    );
                }
            }
            if mode == NoiseMode::FixedIsotropic {
                // variance path unused: no gradient reaches the var head or noise branch
                assert!(grads.get(params.var_head.w).is_none());
                assert!(grads.get(params.noise_out.w).is_none());
            }
        }
    }

    #[test]
    fn gradient_at_single_component_mean_is_zero() {
        // K=1, means head biased so μ = y at x = 0 → dNLL/dμ = 0 there
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let cfg = MdnConfig {
            input_dim: 2,
            target_dim: 3,
            hidden: 4,
            components: 1,
            mode: NoiseMode::Isotropic,
            ..MdnConfig::default()
        };
        let params = MdnHeadParams::new(&mut store, &mut rng, cfg);
        store.get_mut(params.trunk.b.unwrap()).data.fill(0.0);
        let y = [0.7, -0.2, 0.4];
        store.get_mut(params.means.b.unwrap()).data.copy_from_slice(&y);
        let (_, grads) = smsd_nll_grad(&store, &params, &[0.0, 0.0], &y, None).unwrap();
        let mean_bias_grad = grads.get(params.means.b.unwrap()).unwrap();
        for &gv in &mean_bias_grad.data {
            assert!(gv.abs() < 1e-12, "gradient at the quadratic minimum should vanish: {gv}");
        }
    }

    #[test]
    fn degenerate_categorical_always_picks_component_zero() {
        let mp = MixtureParams {
            weights: vec![1.0, 0.0, 0.0],
            means: Tensor::from_vec(3, 1, vec![5.0, -5.0, 9.0]),
            variances: Tensor::filled(3, 1, 1e-6),
            mode: NoiseMode::FullyFactored,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (y, k) = smsd_sample(&mp, &mut rng);
            assert_eq!(k, 0);
            assert!((y[0] - 5.0).abs() < 1e-2, "floored variance keeps samples near μ");
        }
    }

    #[test]
    fn sampling_frequencies_and_means_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mp = random_mixture(&mut rng, 3, 4, NoiseMode::FullyFactored);
        let n = 20_000usize;
        let mut counts = vec![0usize; 3];
        let mut sums = vec![vec![0.0; 4]; 3];
        let mut sample_rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..n {
            let (y, k) = smsd_sample(&mp, &mut sample_rng);
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(y.iter()) {
                *s += v;
            }
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / n as f64;
            assert!((freq - mp.weights[k]).abs() < 0.02, "component {k} frequency {freq}");
            for i in 0..4 {
                let mean = sums[k][i] / counts[k] as f64;
                let tol = 4.0 * mp.variances.at(k, i).sqrt() / (counts[k] as f64).sqrt();
                assert!(
                    (mean - mp.means.at(k, i)).abs() < tol,
                    "component {k} dim {i}: {mean} vs {}",
                    mp.means.at(k, i)
                );
            }
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let (store, params) = head(NoiseMode::Isotropic, 20);
        assert!(mdn_forward(&store, &params, &[1.0, 2.0], None).is_err());
    }
}
