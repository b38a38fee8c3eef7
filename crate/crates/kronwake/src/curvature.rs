//! Per-layer Kronecker curvature factors and their exponential averages.
//!
//! The first fed factor is stored with weight 1, and every later update folds
//! in as Ā ← ρĀ + (1−ρ)A, so after k+1 updates the state equals the direct
//! weighted sum ρᵏA₀ + (1−ρ)Σρ^{k−i}Aᵢ. `ea_dense_fisher` builds that sum
//! literally at oracle scale so the recursion can be checked against it.

use crate::error::{Error, Result};
use crate::network::ForwardCache;
use crate::tensor::{damped_inverse, Matrix};

/// Per-layer (A, Γ) factors computed from one batch.
#[derive(Clone, Debug)]
pub struct KronFactors {
    /// A_l = mean over the batch of ā_{l-1} ā_{l-1}ᵀ, shape (in+1)².
    pub a: Vec<Matrix>,
    /// Γ_l = mean over the batch of ∇_{z_l}L ∇_{z_l}Lᵀ, shape out².
    pub gamma: Vec<Matrix>,
}

impl KronFactors {
    pub fn num_layers(&self) -> usize {
        self.a.len()
    }

    fn check_shapes(&self, other: &KronFactors) -> Result<()> {
        if self.a.len() != other.a.len() || self.gamma.len() != other.gamma.len() {
            return Err(Error::Dimension("factor layer counts differ".into()));
        }
        for (x, y) in self.a.iter().zip(&other.a) {
            if x.rows() != y.rows() {
                return Err(Error::Dimension("A factor shapes differ".into()));
            }
        }
        for (x, y) in self.gamma.iter().zip(&other.gamma) {
            if x.rows() != y.rows() {
                return Err(Error::Dimension("Γ factor shapes differ".into()));
            }
        }
        Ok(())
    }
}

/// Batch-mean factors from a forward cache and per-layer pre-activation
/// gradients taken at model-sampled labels (same forward pass, per-sample
/// scale — no 1/B folded into the gradients).
pub fn compute_factors(cache: &ForwardCache, preact_grads: &[Matrix]) -> Result<KronFactors> {
    if cache.aug_inputs.len() != preact_grads.len() {
        return Err(Error::Dimension("cache and gradient layer counts differ".into()));
    }
    let batch = cache.outputs.rows();
    if batch == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    let scale = 1.0 / batch as f64;
    let mut a = Vec::with_capacity(cache.aug_inputs.len());
    let mut gamma = Vec::with_capacity(preact_grads.len());
    for (aug, dz) in cache.aug_inputs.iter().zip(preact_grads) {
        if aug.rows() != batch || dz.rows() != batch {
            return Err(Error::Dimension("batch size mismatch between cache and gradients".into()));
        }
        a.push(aug.mul_transpose_a(aug)?.scale(scale).symmetrized());
        gamma.push(dz.mul_transpose_a(dz)?.scale(scale).symmetrized());
    }
    Ok(KronFactors { a, gamma })
}

/// Exponential average of per-layer factors plus cached damped inverses.
#[derive(Clone, Debug)]
pub struct EaState {
    abar: Vec<Matrix>,
    gbar: Vec<Matrix>,
    // EA as of the previous update; the hat-factor reweighting needs it.
    // Before the first update it mirrors the first factors.
    prev_abar: Vec<Matrix>,
    prev_gbar: Vec<Matrix>,
    abar_inv: Option<Vec<Matrix>>,
    gbar_inv: Option<Vec<Matrix>>,
    pub rho: f64,
    /// Damping added to factor eigenvalues at inversion.
    pub damping: f64,
    /// Number of ea_update calls so far.
    pub updates: usize,
    /// Step index of the most recent refresh.
    pub last_refresh: usize,
}

impl EaState {
    pub fn new(rho: f64, damping: f64) -> Self {
        EaState {
            abar: Vec::new(),
            gbar: Vec::new(),
            prev_abar: Vec::new(),
            prev_gbar: Vec::new(),
            abar_inv: None,
            gbar_inv: None,
            rho,
            damping,
            updates: 0,
            last_refresh: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    pub fn abar(&self) -> &[Matrix] {
        &self.abar
    }

    pub fn gbar(&self) -> &[Matrix] {
        &self.gbar
    }

    /// EA factors as of the update before the latest one.
    pub fn prev_abar(&self) -> &[Matrix] {
        &self.prev_abar
    }

    pub fn prev_gbar(&self) -> &[Matrix] {
        &self.prev_gbar
    }

    /// Fold fresh factors into the average. First call stores them with
    /// weight 1; later calls apply Ā ← ρĀ + (1−ρ)A. Inverse caches are
    /// invalidated.
    pub fn ea_update(&mut self, fresh: &KronFactors) -> Result<()> {
        if self.updates == 0 {
            self.abar = fresh.a.clone();
            self.gbar = fresh.gamma.clone();
            self.prev_abar = fresh.a.clone();
            self.prev_gbar = fresh.gamma.clone();
        } else {
            let current = KronFactors { a: self.abar.clone(), gamma: self.gbar.clone() };
            current.check_shapes(fresh)?;
            self.prev_abar = self.abar.clone();
            self.prev_gbar = self.gbar.clone();
            for (bar, f) in self.abar.iter_mut().zip(&fresh.a) {
                let mut next = bar.scale(self.rho);
                next.axpy(1.0 - self.rho, f)?;
                *bar = next;
            }
            for (bar, f) in self.gbar.iter_mut().zip(&fresh.gamma) {
                let mut next = bar.scale(self.rho);
                next.axpy(1.0 - self.rho, f)?;
                *bar = next;
            }
        }
        self.abar_inv = None;
        self.gbar_inv = None;
        self.updates += 1;
        Ok(())
    }

    /// Recompute the damped inverses of the current Ā, Γ̄.
    pub fn refresh_inverses(&mut self) -> Result<()> {
        let mut ai = Vec::with_capacity(self.abar.len());
        let mut gi = Vec::with_capacity(self.gbar.len());
        for m in &self.abar {
            ai.push(damped_inverse(m, self.damping)?);
        }
        for m in &self.gbar {
            gi.push(damped_inverse(m, self.damping)?);
        }
        self.abar_inv = Some(ai);
        self.gbar_inv = Some(gi);
        Ok(())
    }

    /// Cached damped inverses; erroring when stale is the internal invariant
    /// the step engines rely on.
    pub fn inverses(&self) -> Result<(&[Matrix], &[Matrix])> {
        match (&self.abar_inv, &self.gbar_inv) {
            (Some(a), Some(g)) => Ok((a, g)),
            _ => Err(Error::Numeric("stale inverse cache: refresh_inverses not called".into())),
        }
    }
}

/// True iff the factors should be recomputed at step `k` (period `n_u`).
pub fn should_refresh(k: usize, n_u: usize) -> Result<bool> {
    if n_u == 0 {
        return Err(Error::Config("update period must be positive".into()));
    }
    Ok(k % n_u == 0)
}

/// Oracle-scale direct construction of the exponentially averaged matrix:
/// ρᵏF₀ + (1−ρ)Σ_{i≥1} ρ^{k−i}Fᵢ, exactly as written.
pub fn ea_dense_fisher(history: &[Matrix], rho: f64) -> Result<Matrix> {
    if history.is_empty() {
        return Err(Error::Dimension("empty history".into()));
    }
    let n = history[0].rows();
    if history.iter().any(|m| m.rows() != n || m.cols() != n) {
        return Err(Error::Dimension("history dimensions differ".into()));
    }
    let k = history.len() - 1;
    let mut out = history[0].scale(rho.powi(k as i32));
    for (i, f) in history.iter().enumerate().skip(1) {
        out.axpy((1.0 - rho) * rho.powi((k - i) as i32), f)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        backward, forward, output_grad_gaussian, Activation, LayerSpec, NetParams,
    };
    use crate::tensor::{dense_kron, vec_of};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_factors(n_layers: usize, dim: usize, rng: &mut StdRng) -> KronFactors {
        let mk = |rng: &mut StdRng| {
            let r = Matrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            let mut m = r.mul_transpose_b(&r).unwrap();
            for i in 0..dim {
                m.set(i, i, m.get(i, i) + 0.1);
            }
            m.symmetrized()
        };
        KronFactors {
            a: (0..n_layers).map(|_| mk(rng)).collect(),
            gamma: (0..n_layers).map(|_| mk(rng)).collect(),
        }
    }

    fn factors_for_batch(params: &NetParams, inputs: &Matrix, targets: &Matrix) -> KronFactors {
        let (outputs, cache) = forward(params, inputs).unwrap();
        let dz = output_grad_gaussian(&outputs, targets, 1.0).unwrap();
        let (_, preact) = backward(params, &cache, &dz).unwrap();
        compute_factors(&cache, &preact).unwrap()
    }

    #[test]
    fn single_sample_factor_is_outer_product() {
        let arch = vec![LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Identity }];
        let mut rng = StdRng::seed_from_u64(2);
        let params = NetParams::init(&arch, &mut rng).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let targets = Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let f = factors_for_batch(&params, &inputs, &targets);

        let aug = [0.5, -1.0, 2.0, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((f.a[0].get(i, j) - aug[i] * aug[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicated_samples_match_single_sample() {
        let arch = vec![LayerSpec { in_dim: 2, out_dim: 2, activation: Activation::Identity }];
        let mut rng = StdRng::seed_from_u64(3);
        let params = NetParams::init(&arch, &mut rng).unwrap();
        let single_in = Matrix::from_rows(&[vec![0.7, -0.2]]).unwrap();
        let single_t = Matrix::from_rows(&[vec![0.3, 0.9]]).unwrap();
        let dup_in = Matrix::from_rows(&vec![vec![0.7, -0.2]; 5]).unwrap();
        let dup_t = Matrix::from_rows(&vec![vec![0.3, 0.9]; 5]).unwrap();
        let f1 = factors_for_batch(&params, &single_in, &single_t);
        let f5 = factors_for_batch(&params, &dup_in, &dup_t);
        assert!(f1.a[0].sub(&f5.a[0]).unwrap().max_abs() < 1e-13);
        assert!(f1.gamma[0].sub(&f5.gamma[0]).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn kron_block_equals_mean_of_outer_products_for_fixed_input() {
        // For one repeated input, dense_kron(A, Γ) must equal the batch mean
        // of vec(dz āᵀ) vec(dz āᵀ)ᵀ exactly, by bilinearity. This pins the
        // vec convention between network flattening and the factor layout.
        let arch = vec![LayerSpec { in_dim: 2, out_dim: 2, activation: Activation::Identity }];
        let mut rng = StdRng::seed_from_u64(4);
        let params = NetParams::init(&arch, &mut rng).unwrap();
        let n = 50;
        let inputs = Matrix::from_rows(&vec![vec![0.4, -0.6]; n]).unwrap();
        let targets = Matrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));

        let (outputs, cache) = forward(&params, &inputs).unwrap();
        let dz = output_grad_gaussian(&outputs, &targets, 1.0).unwrap();
        let (_, preact) = backward(&params, &cache, &dz).unwrap();
        let f = compute_factors(&cache, &preact).unwrap();
        let kron = dense_kron(&f.a[0], &f.gamma[0]).unwrap();

        let d = params.dim();
        let mut direct = Matrix::zeros(d, d);
        for s in 0..n {
            let mut dzrow = Matrix::zeros(1, 2);
            dzrow.row_mut(0).copy_from_slice(dz.row(s));
            let mut augrow = Matrix::zeros(1, 3);
            augrow.row_mut(0).copy_from_slice(cache.aug_inputs[0].row(s));
            let grad = dzrow.mul_transpose_a(&augrow).unwrap();
            let g = vec_of(&grad);
            for i in 0..d {
                for j in 0..d {
                    let v = direct.get(i, j) + g[i] * g[j] / n as f64;
                    direct.set(i, j, v);
                }
            }
        }
        let err = kron.sub(&direct).unwrap().max_abs();
        assert!(err < 1e-12, "layout mismatch: {err:.3e}");
    }

    #[test]
    fn ea_rho_zero_tracks_latest() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut state = EaState::new(0.0, 0.01);
        for _ in 0..4 {
            let f = random_factors(1, 3, &mut rng);
            state.ea_update(&f).unwrap();
            assert!(state.abar()[0].sub(&f.a[0]).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn ea_constant_sequence_is_fixed_point() {
        let mut rng = StdRng::seed_from_u64(6);
        let f = random_factors(2, 3, &mut rng);
        let mut state = EaState::new(0.5, 0.01);
        for _ in 0..6 {
            state.ea_update(&f).unwrap();
            for l in 0..2 {
                assert!(state.abar()[l].sub(&f.a[l]).unwrap().max_abs() < 1e-12);
                assert!(state.gbar()[l].sub(&f.gamma[l]).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ea_three_updates_match_direct_sum() {
        let mut rng = StdRng::seed_from_u64(7);
        let fs: Vec<KronFactors> = (0..3).map(|_| random_factors(1, 2, &mut rng)).collect();
        let mut state = EaState::new(0.5, 0.01);
        for f in &fs {
            state.ea_update(f).unwrap();
        }
        // 0.25 A0 + 0.25 A1 + 0.5 A2
        let mut want = fs[0].a[0].scale(0.25);
        want.axpy(0.25, &fs[1].a[0]).unwrap();
        want.axpy(0.5, &fs[2].a[0]).unwrap();
        assert!(state.abar()[0].sub(&want).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn ea_recursion_reproduces_dense_form() {
        let mut rng = StdRng::seed_from_u64(8);
        for &rho in &[0.0f64, 0.33, 0.95] {
            let fs: Vec<KronFactors> = (0..6).map(|_| random_factors(1, 3, &mut rng)).collect();
            let mut state = EaState::new(rho, 0.01);
            for f in &fs {
                state.ea_update(f).unwrap();
            }
            let hist: Vec<Matrix> = fs.iter().map(|f| f.a[0].clone()).collect();
            let dense = ea_dense_fisher(&hist, rho).unwrap();
            let err = state.abar()[0].sub(&dense).unwrap().max_abs();
            assert!(err <= 1e-12, "rho {rho}: {err:.3e}");
        }
    }

    #[test]
    fn ea_weights_sum_to_one() {
        for &rho in &[0.0f64, 0.33, 0.5, 0.7, 0.95] {
            for k in 0..20usize {
                let mut total = rho.powi(k as i32);
                for i in 1..=k {
                    total += (1.0 - rho) * rho.powi((k - i) as i32);
                }
                assert!((total - 1.0).abs() < 1e-12, "rho {rho} k {k}: {total}");
            }
        }
    }

    #[test]
    fn dense_fisher_examples() {
        let f0 = Matrix::diag(&[1.0]);
        assert!((ea_dense_fisher(&[f0.clone()], 0.5).unwrap().get(0, 0) - 1.0).abs() < 1e-15);

        let hist = vec![Matrix::diag(&[1.0]), Matrix::diag(&[2.0]), Matrix::diag(&[4.0])];
        // rho = 0 keeps only the last
        assert!((ea_dense_fisher(&hist, 0.0).unwrap().get(0, 0) - 4.0).abs() < 1e-15);
        // rho = 0.5: 0.25·1 + 0.25·2 + 0.5·4 = 2.75
        assert!((ea_dense_fisher(&hist, 0.5).unwrap().get(0, 0) - 2.75).abs() < 1e-15);
    }

    #[test]
    fn dense_fisher_spd_preserved() {
        let mut rng = StdRng::seed_from_u64(9);
        let fs = random_factors(1, 4, &mut rng);
        let hist = vec![fs.a[0].clone(), fs.gamma[0].clone(), fs.a[0].clone()];
        let bar = ea_dense_fisher(&hist, 0.7).unwrap();
        let (vals, _) = crate::tensor::sym_eig(&bar).unwrap();
        assert!(vals.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn refresh_schedule() {
        assert!(should_refresh(0, 30).unwrap());
        assert!(should_refresh(30, 30).unwrap());
        assert!(!should_refresh(31, 30).unwrap());
        assert!(should_refresh(0, 1).unwrap());
        assert!(matches!(should_refresh(5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_cache_invalidation() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut state = EaState::new(0.5, 0.01);
        let f = random_factors(1, 3, &mut rng);
        state.ea_update(&f).unwrap();
        assert!(state.inverses().is_err());
        state.refresh_inverses().unwrap();
        let (ai, _) = state.inverses().unwrap();
        let direct = damped_inverse(&state.abar()[0], 0.01).unwrap();
        assert!(ai[0].sub(&direct).unwrap().max_abs() < 1e-14);
        // updating again invalidates
        state.ea_update(&f).unwrap();
        assert!(state.inverses().is_err());
    }
}
