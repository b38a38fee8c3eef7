//! Brute-force dense constructions of the wake objectives.
//!
//! Each solve assembles the displayed objective term by term — including the
//! inner Σ_{j=i}^{k-1} s_j step sums — and minimizes it with a symmetric
//! solve. Nothing here shares code with the recursion engines in `steps`;
//! that independence is the point, since the engines are verified against
//! these solutions at every index.

use crate::error::{Error, Result};
use crate::tensor::{dot, solve_spd, vec_axpy, Matrix};

/// Largest dimension a wake history will accept.
pub const ORACLE_SIZE_CAP: usize = 64;

/// Wake weight prefactor: 1 at i = 0, (1−ρ) afterwards.
pub fn kappa(i: usize, rho: f64) -> f64 {
    if i == 0 {
        1.0
    } else {
        1.0 - rho
    }
}

/// Full retained history {gᵢ, Bᵢ and/or Fᵢ, sᵢ} for one synthetic run.
#[derive(Clone, Debug)]
pub struct WakeHistory {
    pub dim: usize,
    pub rho: f64,
    pub lambda: f64,
    grads: Vec<Vec<f64>>,
    bs: Vec<Matrix>,
    fs: Vec<Matrix>,
    steps: Vec<Vec<f64>>,
}

impl WakeHistory {
    pub fn new(dim: usize, rho: f64, lambda: f64) -> Result<Self> {
        if dim == 0 || dim > ORACLE_SIZE_CAP {
            return Err(Error::SizeCap(format!("history dim {dim} outside 1..={ORACLE_SIZE_CAP}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("rho {rho} outside [0,1)")));
        }
        if lambda <= 0.0 {
            return Err(Error::Config(format!("lambda {lambda} must be positive")));
        }
        Ok(WakeHistory { dim, rho, lambda, grads: Vec::new(), bs: Vec::new(), fs: Vec::new(), steps: Vec::new() })
    }

    fn check_vec(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension(format!("vector len {} vs dim {}", v.len(), self.dim)));
        }
        Ok(())
    }

    fn check_mat(&self, m: &Matrix) -> Result<()> {
        if m.rows() != self.dim || m.cols() != self.dim {
            return Err(Error::Dimension(format!("matrix {}x{} vs dim {}", m.rows(), m.cols(), self.dim)));
        }
        m.check_symmetric("wake history matrix")
    }

    /// Observation for a WoQM run: gradient and curvature Bₖ.
    pub fn push_grad_b(&mut self, g: Vec<f64>, b: Matrix) -> Result<()> {
        self.check_vec(&g)?;
        self.check_mat(&b)?;
        self.grads.push(g);
        self.bs.push(b);
        Ok(())
    }

    /// Observation for an SO run: gradient and Fisher Fₖ.
    pub fn push_grad_f(&mut self, g: Vec<f64>, f: Matrix) -> Result<()> {
        self.check_vec(&g)?;
        self.check_mat(&f)?;
        self.grads.push(g);
        self.fs.push(f);
        Ok(())
    }

    /// Observation for a Q run: gradient, curvature Bₖ and Fisher Fₖ.
    pub fn push_grad_bf(&mut self, g: Vec<f64>, b: Matrix, f: Matrix) -> Result<()> {
        self.check_vec(&g)?;
        self.check_mat(&b)?;
        self.check_mat(&f)?;
        self.grads.push(g);
        self.bs.push(b);
        self.fs.push(f);
        Ok(())
    }

    pub fn record_step(&mut self, s: Vec<f64>) -> Result<()> {
        self.check_vec(&s)?;
        self.steps.push(s);
        Ok(())
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    /// Index of the step about to be solved; all of s₀..s_{k−1} are recorded.
    fn current_k(&self, mats: usize) -> Result<usize> {
        let k = self.steps.len();
        if self.grads.len() != k + 1 || mats != k + 1 {
            return Err(Error::Dimension(format!(
                "history out of sync: {} grads, {} matrices, {} steps",
                self.grads.len(),
                mats,
                k
            )));
        }
        Ok(k)
    }

    /// Suffix sums tᵢ = Σ_{j=i}^{k-1} sⱼ for i = 0..=k (t_k = 0).
    fn step_tails(&self, k: usize) -> Vec<Vec<f64>> {
        let mut tails = vec![vec![0.0; self.dim]; k + 1];
        for i in (0..k).rev() {
            let mut t = tails[i + 1].clone();
            vec_axpy(1.0, &self.steps[i], &mut t);
            tails[i] = t;
        }
        tails
    }

    /// Linear coefficient of the WoQM objective:
    /// Σ ρ^{k-i} (gᵢ + λ κ(i) Bᵢ tᵢ).
    fn woqm_linear(&self, k: usize) -> Result<Vec<f64>> {
        let tails = self.step_tails(k);
        let mut c = vec![0.0; self.dim];
        for i in 0..=k {
            let w = self.rho.powi((k - i) as i32);
            vec_axpy(w, &self.grads[i], &mut c);
            let bt = self.bs[i].matvec(&tails[i])?;
            vec_axpy(w * self.lambda * kappa(i, self.rho), &bt, &mut c);
        }
        Ok(c)
    }

    /// Quadratic coefficient λ Σ κ(i) ρ^{k-i} Bᵢ of the WoQM objective.
    fn woqm_quadratic(&self, k: usize) -> Result<Matrix> {
        let mut q = Matrix::zeros(self.dim, self.dim);
        for i in 0..=k {
            q.axpy(self.lambda * kappa(i, self.rho) * self.rho.powi((k - i) as i32), &self.bs[i])?;
        }
        Ok(q)
    }

    /// Exact minimizer of the WoQM wake objective at the current index;
    /// records the step into the history.
    pub fn solve_woqm(&mut self) -> Result<Vec<f64>> {
        let k = self.current_k(self.bs.len())?;
        let c = self.woqm_linear(k)?;
        let q = self.woqm_quadratic(k)?;
        let rhs: Vec<f64> = c.iter().map(|x| -x).collect();
        let s = solve_spd(&q, &rhs)?;
        self.steps.push(s.clone());
        Ok(s)
    }

    /// WoQM objective value at an arbitrary step (constants dropped).
    pub fn woqm_objective(&self, s: &[f64]) -> Result<f64> {
        self.check_vec(s)?;
        let k = self.steps.len().checked_sub(1).ok_or_else(|| Error::Dimension("no steps recorded".into()))?;
        // Evaluate the objective that defined step k, i.e. with tails from s₀..s_{k−1}.
        let hist = WakeHistory {
            dim: self.dim,
            rho: self.rho,
            lambda: self.lambda,
            grads: self.grads.clone(),
            bs: self.bs.clone(),
            fs: self.fs.clone(),
            steps: self.steps[..k].to_vec(),
        };
        let c = hist.woqm_linear(k)?;
        let q = hist.woqm_quadratic(k)?;
        Ok(dot(s, &c) + 0.5 * dot(s, &q.matvec(s)?))
    }

    /// Gradient of the WoQM objective (with steps s₀..s_{k−1} recorded) at s.
    pub fn woqm_gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_vec(s)?;
        let k = self.steps.len();
        if self.grads.len() != k + 1 || self.bs.len() != k + 1 {
            return Err(Error::Dimension("history out of sync for gradient".into()));
        }
        let mut g = self.woqm_linear(k)?;
        let q = self.woqm_quadratic(k)?;
        vec_axpy(1.0, &q.matvec(s)?, &mut g);
        Ok(g)
    }

    /// Linear coefficient shared by the SO/Q objectives:
    /// g_k + Σ_{i<k} ρ^{k-i} λ κ(i) Fᵢ tᵢ.
    fn so_linear(&self, k: usize, lambda_k: f64) -> Result<Vec<f64>> {
        let tails = self.step_tails(k);
        let mut c = self.grads[k].clone();
        for i in 0..k {
            let w = self.rho.powi((k - i) as i32) * lambda_k * kappa(i, self.rho);
            let ft = self.fs[i].matvec(&tails[i])?;
            vec_axpy(w, &ft, &mut c);
        }
        Ok(c)
    }

    /// λ_k Σ κ(i) ρ^{k-i} Fᵢ.
    fn so_quadratic(&self, k: usize, lambda_k: f64) -> Result<Matrix> {
        let mut q = Matrix::zeros(self.dim, self.dim);
        for i in 0..=k {
            q.axpy(lambda_k * kappa(i, self.rho) * self.rho.powi((k - i) as i32), &self.fs[i])?;
        }
        Ok(q)
    }

    /// Exact SO-wake minimizer at the current index; records the step.
    pub fn solve_so(&mut self) -> Result<Vec<f64>> {
        let k = self.current_k(self.fs.len())?;
        let c = self.so_linear(k, self.lambda)?;
        let q = self.so_quadratic(k, self.lambda)?;
        let rhs: Vec<f64> = c.iter().map(|x| -x).collect();
        let s = solve_spd(&q, &rhs)?;
        self.steps.push(s.clone());
        Ok(s)
    }

    /// Exact Q-wake minimizer (quadratic model + quadratic SKL wake) with a
    /// variable λ schedule; records the step.
    pub fn solve_q_varlambda(&mut self, lambda_of: &dyn Fn(usize) -> f64) -> Result<Vec<f64>> {
        let k = self.current_k(self.fs.len())?;
        if self.bs.len() != k + 1 {
            return Err(Error::Dimension("Q solve requires a B_k per index".into()));
        }
        let lam_k = lambda_of(k);
        if lam_k <= 0.0 {
            return Err(Error::Config(format!("lambda({k}) = {lam_k} must be positive")));
        }
        let c = self.so_linear(k, lam_k)?;
        let mut q = self.so_quadratic(k, lam_k)?;
        q.axpy(1.0, &self.bs[k])?;
        let rhs: Vec<f64> = c.iter().map(|x| -x).collect();
        let s = solve_spd(&q, &rhs)?;
        self.steps.push(s.clone());
        Ok(s)
    }

    /// Constant-λ Q-wake minimizer; same assembly as the variable-λ solve.
    pub fn solve_q(&mut self) -> Result<Vec<f64>> {
        let lam = self.lambda;
        self.solve_q_varlambda(&move |_| lam)
    }

    /// Gradient of the KL-wake re-expression of the WoQM objective (B = F):
    /// Σ ρ^{k-i} gᵢ + λ Σ κ(i) ρ^{k-i} Fᵢ (tᵢ + s).
    pub fn kld_form_grad(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_vec(s)?;
        let k = self.steps.len();
        if self.grads.len() != k + 1 || self.fs.len() != k + 1 {
            return Err(Error::Dimension("history out of sync for kld gradient".into()));
        }
        let tails = self.step_tails(k);
        let mut g = vec![0.0; self.dim];
        for i in 0..=k {
            let w = self.rho.powi((k - i) as i32);
            vec_axpy(w, &self.grads[i], &mut g);
            let mut arg = tails[i].clone();
            vec_axpy(1.0, s, &mut arg);
            let fa = self.fs[i].matvec(&arg)?;
            vec_axpy(w * self.lambda * kappa(i, self.rho), &fa, &mut g);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::ea_dense_fisher;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_spd(d: usize, rng: &mut StdRng) -> Matrix {
        let r = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut m = r.mul_transpose_b(&r).unwrap();
        for i in 0..d {
            m.set(i, i, m.get(i, i) + 0.1);
        }
        m.symmetrized()
    }

    fn random_vec(d: usize, rng: &mut StdRng) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn kappa_values() {
        assert_eq!(kappa(0, 0.5), 1.0);
        assert_eq!(kappa(3, 0.5), 0.5);
        assert_eq!(kappa(1, 0.0), 1.0);
    }

    #[test]
    fn woqm_first_step_is_scaled_newton() {
        let mut rng = StdRng::seed_from_u64(1);
        let d = 4;
        let b0 = random_spd(d, &mut rng);
        let g0 = random_vec(d, &mut rng);
        let lambda = 2.5;
        let mut h = WakeHistory::new(d, 0.5, lambda).unwrap();
        h.push_grad_b(g0.clone(), b0.clone()).unwrap();
        let s0 = h.solve_woqm().unwrap();
        let want = solve_spd(&b0, &g0).unwrap();
        for i in 0..d {
            assert!((s0[i] + want[i] / lambda).abs() < 1e-12);
        }
    }

    #[test]
    fn woqm_scalar_hand_case() {
        // k=1, B0=1, B1=2, g0=g1=1, rho=0.5, lambda=1 -> s1 = -2/3
        let mut h = WakeHistory::new(1, 0.5, 1.0).unwrap();
        h.push_grad_b(vec![1.0], Matrix::diag(&[1.0])).unwrap();
        h.solve_woqm().unwrap();
        h.push_grad_b(vec![1.0], Matrix::diag(&[2.0])).unwrap();
        let s1 = h.solve_woqm().unwrap();
        assert!((s1[0] + 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn woqm_matches_ea_closed_form_at_every_k() {
        // The inductive claim: every wake minimizer equals -(1/λ) B̄_k⁻¹ g_k.
        let mut rng = StdRng::seed_from_u64(2);
        for &(rho, lambda) in &[(0.0, 1.0), (0.5, 1.0), (0.95, 100.0)] {
            let d = 8;
            let mut h = WakeHistory::new(d, rho, lambda).unwrap();
            let mut bhist = Vec::new();
            for _ in 0..=15 {
                let b = random_spd(d, &mut rng);
                let g = random_vec(d, &mut rng);
                bhist.push(b.clone());
                h.push_grad_b(g.clone(), b).unwrap();
                let s = h.solve_woqm().unwrap();

                let bbar = ea_dense_fisher(&bhist, rho).unwrap();
                let mut want = solve_spd(&bbar, &g).unwrap();
                want.iter_mut().for_each(|x| *x = -*x / lambda);
                let scale = want.iter().fold(1e-30f64, |m, x| m.max(x.abs()));
                for i in 0..d {
                    assert!(
                        (s[i] - want[i]).abs() <= 1e-8 * scale,
                        "rho {rho} lambda {lambda}: coord {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn so_first_step_and_rho_zero() {
        let mut rng = StdRng::seed_from_u64(3);
        let d = 5;
        let f0 = random_spd(d, &mut rng);
        let g0 = random_vec(d, &mut rng);
        let lambda = 3.0;
        let mut h = WakeHistory::new(d, 0.4, lambda).unwrap();
        h.push_grad_f(g0.clone(), f0.clone()).unwrap();
        let s0 = h.solve_so().unwrap();
        let want = solve_spd(&f0, &g0).unwrap();
        for i in 0..d {
            assert!((s0[i] + want[i] / lambda).abs() < 1e-12);
        }

        // rho = 0: every step is the pure scaled NG step
        let mut h0 = WakeHistory::new(d, 0.0, lambda).unwrap();
        for _ in 0..6 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h0.push_grad_f(g.clone(), f.clone()).unwrap();
            let s = h0.solve_so().unwrap();
            let want = solve_spd(&f, &g).unwrap();
            for i in 0..d {
                assert!((s[i] + want[i] / lambda).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn so_matches_momentum_gradient_closed_form() {
        let mut rng = StdRng::seed_from_u64(4);
        let d = 8;
        let rho = 0.5;
        let lambda = 1.0;
        let mut h = WakeHistory::new(d, rho, lambda).unwrap();
        let mut fhist = Vec::new();
        let mut prev_g = vec![0.0; d];
        for _ in 0..=15 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            fhist.push(f.clone());
            h.push_grad_f(g.clone(), f).unwrap();
            let s = h.solve_so().unwrap();

            let fbar = ea_dense_fisher(&fhist, rho).unwrap();
            let modified: Vec<f64> = g.iter().zip(&prev_g).map(|(a, b)| a - rho * b).collect();
            let mut want = solve_spd(&fbar, &modified).unwrap();
            want.iter_mut().for_each(|x| *x = -*x / lambda);
            let scale = want.iter().fold(1e-30f64, |m, x| m.max(x.abs()));
            for i in 0..d {
                assert!((s[i] - want[i]).abs() <= 1e-8 * scale);
            }
            prev_g = g;
        }
    }

    #[test]
    fn q_with_zero_b_degenerates_to_so() {
        let mut rng = StdRng::seed_from_u64(5);
        let d = 6;
        let mut hq = WakeHistory::new(d, 0.5, 1.0).unwrap();
        let mut hso = WakeHistory::new(d, 0.5, 1.0).unwrap();
        for _ in 0..8 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            hq.push_grad_bf(g.clone(), Matrix::zeros(d, d), f.clone()).unwrap();
            hso.push_grad_f(g, f).unwrap();
            let sq = hq.solve_q().unwrap();
            let ss = hso.solve_so().unwrap();
            for i in 0..d {
                assert!((sq[i] - ss[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn q_first_step_formula() {
        let mut rng = StdRng::seed_from_u64(6);
        let d = 5;
        let lambda = 2.0;
        let b0 = random_spd(d, &mut rng);
        let f0 = random_spd(d, &mut rng);
        let g0 = random_vec(d, &mut rng);
        let mut h = WakeHistory::new(d, 0.3, lambda).unwrap();
        h.push_grad_bf(g0.clone(), b0.clone(), f0.clone()).unwrap();
        let s0 = h.solve_q().unwrap();
        // s0 = -(1/λ)[F̄0 + B0/λ]⁻¹ g0
        let mut m = f0.clone();
        m.axpy(1.0 / lambda, &b0).unwrap();
        let mut want = solve_spd(&m, &g0).unwrap();
        want.iter_mut().for_each(|x| *x = -*x / lambda);
        for i in 0..d {
            assert!((s0[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn varlambda_constant_schedule_matches_q() {
        let mut rng = StdRng::seed_from_u64(7);
        let d = 4;
        let lambda = 1.5;
        let mut h1 = WakeHistory::new(d, 0.6, lambda).unwrap();
        let mut h2 = WakeHistory::new(d, 0.6, lambda).unwrap();
        for _ in 0..7 {
            let b = random_spd(d, &mut rng);
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h1.push_grad_bf(g.clone(), b.clone(), f.clone()).unwrap();
            h2.push_grad_bf(g, b, f).unwrap();
            let s1 = h1.solve_q().unwrap();
            let s2 = h2.solve_q_varlambda(&|_| lambda).unwrap();
            assert_eq!(s1, s2, "constant schedule must reproduce solve_q bit-for-bit");
        }
    }

    #[test]
    fn kld_form_grad_trivial_cases() {
        let mut rng = StdRng::seed_from_u64(8);
        let d = 3;
        let f0 = random_spd(d, &mut rng);
        let g0 = random_vec(d, &mut rng);
        let mut h = WakeHistory::new(d, 0.5, 1.0).unwrap();
        h.push_grad_bf(g0.clone(), f0.clone(), f0.clone()).unwrap();
        // s=0, k=0 -> g0
        let grad = h.kld_form_grad(&vec![0.0; d]).unwrap();
        for i in 0..d {
            assert!((grad[i] - g0[i]).abs() < 1e-14);
        }

        // rho = 0: g_k + λ F_k s
        let lambda = 2.0;
        let mut h0 = WakeHistory::new(d, 0.0, lambda).unwrap();
        for _ in 0..4 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h0.push_grad_bf(g.clone(), f.clone(), f.clone()).unwrap();
            let s = random_vec(d, &mut rng);
            let grad = h0.kld_form_grad(&s).unwrap();
            let fs = f.matvec(&s).unwrap();
            for i in 0..d {
                let want = g[i] + lambda * fs[i];
                assert!((grad[i] - want).abs() < 1e-12);
            }
            h0.solve_woqm().unwrap();
        }
    }

    #[test]
    fn kld_form_grad_equals_woqm_gradient() {
        let mut rng = StdRng::seed_from_u64(9);
        let d = 6;
        let mut h = WakeHistory::new(d, 0.45, 1.7).unwrap();
        for k in 0..=8 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h.push_grad_bf(g, f.clone(), f).unwrap();
            let s = random_vec(d, &mut rng);
            let kld = h.kld_form_grad(&s).unwrap();
            let woqm = h.woqm_gradient(&s).unwrap();
            let scale = woqm.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for i in 0..d {
                assert!((kld[i] - woqm[i]).abs() <= 1e-10 * scale, "k {k} coord {i}");
            }
            h.solve_woqm().unwrap();
        }
    }

    #[test]
    fn objective_at_minimizer_is_minimal() {
        let mut rng = StdRng::seed_from_u64(10);
        let d = 5;
        let mut h = WakeHistory::new(d, 0.5, 1.0).unwrap();
        for _ in 0..6 {
            let b = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h.push_grad_b(g, b).unwrap();
            let s = h.solve_woqm().unwrap();
            let at_min = h.woqm_objective(&s).unwrap();
            let mut other = s.clone();
            for x in other.iter_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
            let at_other = h.woqm_objective(&other).unwrap();
            assert!(at_min <= at_other + 1e-12);
        }
    }

    #[test]
    fn size_cap_enforced() {
        assert!(matches!(WakeHistory::new(65, 0.5, 1.0), Err(Error::SizeCap(_))));
        assert!(WakeHistory::new(64, 0.5, 1.0).is_ok());
    }
}
