//! The `verify` subcommand: run the dense oracle suites against the step
//! recursions and report the worst relative error per closed form.

use kronwake::error::Result;
use kronwake::oracle::WakeHistory;
use kronwake::steps::{q_step, q_step_variable_lambda, so_step, woqm_step, DenseSolver, StepState};
use kronwake::tensor::Matrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub struct VerifyReport {
    pub woqm_max_err: f64,
    pub so_max_err: f64,
    pub q_max_err: f64,
    pub q_zero_b_bitwise: bool,
    pub varlambda_max_err: f64,
    pub varlambda_constant_bitwise: bool,
    pub kld_form_max_err: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.woqm_max_err <= 1e-8
            && self.so_max_err <= 1e-8
            && self.q_max_err <= 1e-8
            && self.q_zero_b_bitwise
            && self.varlambda_max_err <= 1e-8
            && self.varlambda_constant_bitwise
            && self.kld_form_max_err <= 1e-10
    }

    pub fn print(&self) {
        let line = |name: &str, err: f64, tol: f64| {
            println!(
                "{name:<34} max rel error {err:9.3e}  (tol {tol:.0e})  {}",
                if err <= tol { "ok" } else { "FAIL" }
            );
        };
        line("EA-curvature step vs wake oracle", self.woqm_max_err, 1e-8);
        line("momentum-NG step vs wake oracle", self.so_max_err, 1e-8);
        line("q step vs wake oracle", self.q_max_err, 1e-8);
        println!(
            "q with B=0 collapses to SO          bitwise: {}",
            if self.q_zero_b_bitwise { "ok" } else { "FAIL" }
        );
        line("variable-λ q step vs oracle", self.varlambda_max_err, 1e-8);
        println!(
            "constant λ schedule reproduces q    bitwise: {}",
            if self.varlambda_constant_bitwise { "ok" } else { "FAIL" }
        );
        line("KL-wake gradient re-expression", self.kld_form_max_err, 1e-10);
    }
}

fn random_spd(d: usize, rng: &mut StdRng) -> Matrix {
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

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

const GRID: [(f64, f64); 8] = [
    (0.0, 1.0),
    (0.0, 100.0),
    (0.33, 1.0),
    (0.33, 100.0),
    (0.5, 1.0),
    (0.5, 100.0),
    (0.95, 1.0),
    (0.95, 100.0),
];

pub fn verify() -> Result<VerifyReport> {
    let mut rng = StdRng::seed_from_u64(20_2020);

    let mut woqm_max: f64 = 0.0;
    let mut so_max: f64 = 0.0;
    let mut q_max: f64 = 0.0;
    for &(rho, lambda) in &GRID {
        for &d in &[2usize, 4, 8] {
            let mut h = WakeHistory::new(d, rho, lambda)?;
            let mut solver = DenseSolver::new(rho);
            for _ in 0..=20 {
                let b = random_spd(d, &mut rng);
                let g = random_vec(d, &mut rng);
                h.push_grad_b(g.clone(), b.clone())?;
                solver.observe(b, None)?;
                let engine = woqm_step(&solver, &g, lambda)?;
                woqm_max = woqm_max.max(rel_err(&engine, &h.solve_woqm()?));
            }

            let mut h = WakeHistory::new(d, rho, lambda)?;
            let mut solver = DenseSolver::new(rho);
            let mut state = StepState::new(d, rho);
            for _ in 0..=20 {
                let f = random_spd(d, &mut rng);
                let g = random_vec(d, &mut rng);
                h.push_grad_f(g.clone(), f.clone())?;
                solver.observe(f, None)?;
                let engine = so_step(&solver, &g, &mut state, lambda)?;
                so_max = so_max.max(rel_err(&engine, &h.solve_so()?));
            }

            let mut h = WakeHistory::new(d, rho, lambda)?;
            let mut solver = DenseSolver::new(rho);
            let mut state = StepState::new(d, rho);
            for _ in 0..=12 {
                let f = random_spd(d, &mut rng);
                let b = random_spd(d, &mut rng);
                let g = random_vec(d, &mut rng);
                h.push_grad_bf(g.clone(), b.clone(), f.clone())?;
                solver.observe(f, Some(b))?;
                let engine = q_step(&solver, &g, &mut state, lambda)?;
                q_max = q_max.max(rel_err(&engine, &h.solve_q()?));
            }
        }
    }

    // q with B ≡ 0 must match SO bit for bit
    let mut q_zero_b_bitwise = true;
    {
        let d = 6;
        let rho = 0.5;
        let lambda = 100.0;
        let mut sq = DenseSolver::new(rho);
        let mut ss = DenseSolver::new(rho);
        let mut stq = StepState::new(d, rho);
        let mut sts = StepState::new(d, rho);
        for _ in 0..12 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            sq.observe(f.clone(), None)?;
            ss.observe(f, None)?;
            let a = q_step(&sq, &g, &mut stq, lambda)?;
            let b = so_step(&ss, &g, &mut sts, lambda)?;
            q_zero_b_bitwise &= a == b;
        }
    }

    // variable λ schedule
    let schedule = |k: usize| 100.0 / (1.0 + 0.1 * k as f64);
    let mut varlambda_max: f64 = 0.0;
    let mut varlambda_constant_bitwise = true;
    for &rho in &[0.0, 0.33, 0.5, 0.95] {
        let d = 6;
        let mut h = WakeHistory::new(d, rho, schedule(0))?;
        let mut solver = DenseSolver::new(rho);
        let mut state = StepState::new(d, rho);
        for _ in 0..=12 {
            let f = random_spd(d, &mut rng);
            let b = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h.push_grad_bf(g.clone(), b.clone(), f.clone())?;
            solver.observe(f, Some(b))?;
            let engine = q_step_variable_lambda(&solver, &g, &mut state, &schedule)?;
            varlambda_max = varlambda_max.max(rel_err(&engine, &h.solve_q_varlambda(&schedule)?));
        }

        let mut s1 = DenseSolver::new(rho);
        let mut s2 = DenseSolver::new(rho);
        let mut st1 = StepState::new(d, rho);
        let mut st2 = StepState::new(d, rho);
        for _ in 0..8 {
            let f = random_spd(d, &mut rng);
            let b = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            s1.observe(f.clone(), Some(b.clone()))?;
            s2.observe(f, Some(b))?;
            let a = q_step(&s1, &g, &mut st1, 100.0)?;
            let b2 = q_step_variable_lambda(&s2, &g, &mut st2, &|_| 100.0)?;
            varlambda_constant_bitwise &= a == b2;
        }
    }

    // KL-wake regularized linear model gradient ≡ quadratic-wake gradient
    let mut kld_max: f64 = 0.0;
    for _ in 0..20 {
        let d = 6;
        let mut h = WakeHistory::new(d, 0.45, 1.7)?;
        for _ in 0..=8 {
            let f = random_spd(d, &mut rng);
            let g = random_vec(d, &mut rng);
            h.push_grad_bf(g, f.clone(), f)?;
            let s = random_vec(d, &mut rng);
            kld_max = kld_max.max(rel_err(&h.kld_form_grad(&s)?, &h.woqm_gradient(&s)?));
            h.solve_woqm()?;
        }
    }

    Ok(VerifyReport {
        woqm_max_err: woqm_max,
        so_max_err: so_max,
        q_max_err: q_max,
        q_zero_b_bitwise,
        varlambda_max_err: varlambda_max,
        varlambda_constant_bitwise,
        kld_form_max_err: kld_max,
    })
}
