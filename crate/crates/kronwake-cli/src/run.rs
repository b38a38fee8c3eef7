//! The training loop: wires dataset, network, curvature, step engines and
//! the QE solver; emits one CSV per run.
//!
//! Reproducibility contract: a (config, seed) pair determines every byte of
//! the CSV. One ChaCha stream per run covers weight init then label sampling
//! in encounter order; epoch shuffles use their own (seed, epoch)-derived
//! streams so a permutation depends on nothing else. Wall-clock timings go to
//! stderr; the CSV wall_s column stays 0 unless `timing` is set, which is the
//! one switch that trades byte reproducibility for real timings.

use crate::config::{ClipMode, DatasetKind, RunConfig, Solver};
use kronwake::curvature::{compute_factors, should_refresh, EaState, KronFactors};
use kronwake::data::{batches, load_idx, synth_classification, synth_regression, BatchPlan, DataKind, Dataset};
use kronwake::error::{Error, Result};
use kronwake::network::{
    backward, batch_loss, forward, head_kind, loss_grad, output_grad_cross_entropy,
    output_grad_gaussian, sample_labels_from_outputs, Activation, Labels, LayerSpec, LossKind,
    NetParams,
};
use kronwake::qe::{qe_step, QeConfig, SnapshotRing};
use kronwake::steps::{
    boundedness_margin, build_hat_factors, clip_step, q_step, so_step, woqm_step, ClipPolicy,
    HatInverses, KronSolver, StepState,
};
use kronwake::tensor::{dense_kron, norm2, solve_spd, unvec, vec_of, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub wall_s: f64,
    pub step_norm: f64,
    pub margin: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub rows: Vec<EpochRow>,
    pub csv_path: PathBuf,
}

/// Resolve the data directory, honoring the KRONWAKE_DATA_DIR override.
pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("KRONWAKE_DATA_DIR") {
        Some(d) => PathBuf::from(d),
        None => cfg.data_dir.clone(),
    }
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = data_dir(cfg);
            let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
            Ok((train, test))
        }
        DatasetKind::SynthClassification => {
            let input_dim = cfg.arch[0];
            let classes = *cfg.arch.last().unwrap();
            let train = synth_classification(cfg.synth_n, input_dim, classes, cfg.synth_seed)?;
            let test = synth_classification(cfg.synth_test_n, input_dim, classes, cfg.synth_seed ^ 0xff)?;
            Ok((train, test))
        }
        DatasetKind::SynthRegression => {
            let input_dim = cfg.arch[0];
            let out = *cfg.arch.last().unwrap();
            let train = synth_regression(cfg.synth_n, input_dim, out, cfg.synth_seed, 1.0)?;
            let test = synth_regression(cfg.synth_test_n, input_dim, out, cfg.synth_seed ^ 0xff, 1.0)?;
            Ok((train, test))
        }
    }
}

fn build_arch(cfg: &RunConfig, train: &Dataset) -> Result<Vec<LayerSpec>> {
    if cfg.arch[0] != train.inputs.cols() {
        return Err(Error::Config(format!(
            "arch input dim {} vs dataset input dim {}",
            cfg.arch[0],
            train.inputs.cols()
        )));
    }
    let out = *cfg.arch.last().unwrap();
    match train.kind {
        DataKind::Classification { n_classes } => {
            if out < n_classes {
                return Err(Error::Config(format!("arch output {out} < {n_classes} classes")));
            }
        }
        DataKind::Regression => {
            if let Labels::Targets(t) = &train.labels {
                if out != t.cols() {
                    return Err(Error::Config(format!("arch output {out} vs target dim {}", t.cols())));
                }
            }
        }
    }
    let head = match train.kind {
        DataKind::Classification { .. } => Activation::SoftmaxOutput,
        DataKind::Regression => Activation::Identity,
    };
    let mut layers = Vec::with_capacity(cfg.arch.len() - 1);
    for w in cfg.arch.windows(2) {
        layers.push(LayerSpec { in_dim: w[0], out_dim: w[1], activation: Activation::Relu });
    }
    layers.last_mut().unwrap().activation = head;
    Ok(layers)
}

fn resolve_clip(cfg: &RunConfig) -> ClipPolicy {
    match cfg.clip_mode {
        ClipMode::None => ClipPolicy::None,
        ClipMode::Global => ClipPolicy::Global { clip: cfg.clip_param },
        ClipMode::PerGroup => ClipPolicy::PerGroup { tau: cfg.tau },
        ClipMode::Auto => match cfg.solver {
            Solver::Kfac | Solver::So => ClipPolicy::Global { clip: cfg.clip_param },
            Solver::Q | Solver::Qe => ClipPolicy::PerGroup { tau: cfg.tau },
        },
    }
}

/// θ ← θ − wd_over_lambda·θ + s
fn apply_update(params: &mut NetParams, s: &[f64], wd_over_lambda: f64) -> Result<()> {
    let ranges = params.layer_ranges();
    for (l, range) in ranges.into_iter().enumerate() {
        let w = params.layer_mut(l);
        let rows = w.rows();
        let cols = w.cols();
        let block = &s[range];
        for j in 0..cols {
            for i in 0..rows {
                let v = w.get(i, j);
                w.set(i, j, v - wd_over_lambda * v + block[j * rows + i]);
            }
        }
    }
    Ok(())
}

fn evaluate(params: &NetParams, test: &Dataset, loss_kind: LossKind) -> Result<(f64, f64)> {
    let n = test.len();
    let chunk = 1024;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut off = 0;
    while off < n {
        let hi = (off + chunk).min(n);
        let idx: Vec<usize> = (off..hi).collect();
        let (inputs, labels) = test.gather(&idx);
        let (outputs, _) = forward(params, &inputs)?;
        loss_sum += batch_loss(&outputs, &labels, loss_kind)? * idx.len() as f64;
        if let Labels::Classes(classes) = &labels {
            for (s, &y) in classes.iter().enumerate() {
                let row = outputs.row(s);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                if best == y {
                    correct += 1;
                }
            }
        }
        off = hi;
    }
    let acc = match test.kind {
        DataKind::Classification { .. } => correct as f64 / n as f64,
        DataKind::Regression => 0.0,
    };
    Ok((loss_sum / n as f64, acc))
}

/// blockdiag(A_l ⊗ Γ_l), margin-diagnostic scale only.
fn blockdiag_kron(a: &[Matrix], g: &[Matrix]) -> Result<Matrix> {
    let sizes: Vec<usize> = a.iter().zip(g).map(|(x, y)| x.rows() * y.rows()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Matrix::zeros(total, total);
    let mut off = 0;
    for (l, (x, y)) in a.iter().zip(g).enumerate() {
        let block = dense_kron(x, y)?;
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                out.set(off + i, off + j, block.get(i, j));
            }
        }
        off += sizes[l];
    }
    Ok(out)
}

fn dense_margin(ea: &EaState, fresh: &KronFactors, rho: f64, lambda: f64) -> Result<f64> {
    let fbar = blockdiag_kron(ea.abar(), ea.gbar())?;
    let b = blockdiag_kron(&fresh.a, &fresh.gamma)?;
    let d = fbar.rows();
    let mut shifted = fbar.clone();
    shifted.axpy(1.0 / lambda, &b)?;
    let mut mhat = Matrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let u = solve_spd(&shifted, &e)?;
        let col = fbar.matvec(&u)?;
        for i in 0..d {
            mhat.set(i, j, col[i]);
        }
    }
    boundedness_margin(rho, &mhat)
}

fn per_sample_output_grad(outputs: &Matrix, labels: &Labels) -> Result<Matrix> {
    match labels {
        Labels::Classes(c) => output_grad_cross_entropy(outputs, c, 1.0),
        Labels::Targets(t) => output_grad_gaussian(outputs, t, 1.0),
    }
}

/// B_k v for the QE quadratic term: per-layer vec(Γ V A) on fresh factors.
fn apply_block_kron(factors: &KronFactors, shapes: &[(usize, usize)], v: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(v.len());
    let mut off = 0;
    for (l, &(o, i)) in shapes.iter().enumerate() {
        let block = &v[off..off + o * i];
        let vm = unvec(block, o, i)?;
        let t = factors.gamma[l].matmul(&vm)?;
        let t = t.matmul(&factors.a[l])?;
        out.extend(vec_of(&t));
        off += o * i;
    }
    Ok(out)
}

fn fmt_float(x: f64) -> String {
    format!("{x}")
}

/// Execute one seeded training run; returns per-epoch metrics and writes the
/// CSV. Divergence aborts with the failure position appended to the CSV tail.
pub fn run(cfg: &RunConfig, timing: bool) -> Result<RunMetrics> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let arch = build_arch(cfg, &train)?;
    let loss_kind = match train.kind {
        DataKind::Classification { .. } => LossKind::CrossEntropy,
        DataKind::Regression => LossKind::Gaussian,
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut params = NetParams::init(&arch, &mut rng)?;
    let head = head_kind(&arch);
    let d = params.dim();
    if cfg.margin_diag && d > 64 {
        return Err(Error::Config(format!("margin_diag needs d ≤ 64, net has {d} parameters")));
    }

    let shapes: Vec<(usize, usize)> = arch.iter().map(|l| (l.out_dim, l.in_dim + 1)).collect();
    let groups = params.layer_ranges();
    let clip = resolve_clip(cfg);
    let qe_cfg = QeConfig { n_is: cfg.n_is, omega: cfg.omega, n_cap: cfg.n_cap, zeta_scale: cfg.zeta_scale };

    let mut ea = EaState::new(cfg.rho, cfg.gamma);
    let mut state = StepState::new(d, cfg.rho);
    let mut ring = SnapshotRing::new(cfg.n_cap.max(1))?;
    let mut hat_inv: Option<HatInverses> = None;
    let mut fresh_factors: Option<KronFactors> = None;

    let plan = BatchPlan { batch_size: cfg.batch_size, seed: cfg.seed };
    let started = Instant::now();
    let mut csv = String::from("epoch,train_loss,test_loss,test_acc,wall_s,step_norm\n");
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut k: usize = 0;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(cfg.csv_name());

    let mut abort: Option<(usize, usize, Error)> = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut step_norm_sum = 0.0;
        let mut n_batches = 0usize;
        let mut epoch_margin: Option<f64> = None;
        for bidx in batches(train.len(), &plan, epoch - 1)? {
            let (binputs, blabels) = train.gather(&bidx);
            let lam = cfg.lambda_at(k);
            let (loss, grads, cache) = match loss_grad(&params, &binputs, &blabels, loss_kind) {
                Ok(v) => v,
                Err(e @ Error::Numeric(_)) => {
                    abort = Some((epoch, k, e));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            n_batches += 1;
            let g = grads.flatten();

            let mut push_snapshot = false;
            if should_refresh(k, cfg.update_period)? {
                let sampled = sample_labels_from_outputs(&cache.outputs, head, &mut rng)?;
                let dz = per_sample_output_grad(&cache.outputs, &sampled)?;
                let (_, preact) = backward(&params, &cache, &dz)?;
                let fresh = compute_factors(&cache, &preact)?;
                ea.ea_update(&fresh)?;
                ea.refresh_inverses()?;
                ea.last_refresh = k;
                let wants_hats = matches!(cfg.solver, Solver::Q | Solver::Qe) && !cfg.q_zero_b;
                if wants_hats {
                    let hats = build_hat_factors(ea.prev_abar(), ea.prev_gbar(), &fresh, cfg.rho, lam)?;
                    hat_inv = Some(hats.damped_inverses(cfg.gamma)?);
                }
                if cfg.margin_diag {
                    epoch_margin = Some(match epoch_margin {
                        None => dense_margin(&ea, &fresh, cfg.rho, lam)?,
                        Some(m) => m.max(dense_margin(&ea, &fresh, cfg.rho, lam)?),
                    });
                }
                fresh_factors = Some(fresh);
                push_snapshot = cfg.solver == Solver::Qe;
            }

            let (abar_inv, gbar_inv) = ea.inverses()?;
            let solver = KronSolver {
                shapes: shapes.clone(),
                abar: ea.abar(),
                gbar: ea.gbar(),
                abar_inv,
                gbar_inv,
                hat_inv: hat_inv.as_ref(),
            };
            let step_result = match cfg.solver {
                Solver::Kfac => woqm_step(&solver, &g, lam),
                Solver::So => so_step(&solver, &g, &mut state, lam),
                Solver::Q => q_step(&solver, &g, &mut state, lam),
                Solver::Qe => {
                    let factors = fresh_factors
                        .as_ref()
                        .ok_or_else(|| Error::Numeric("qe: no curvature factors yet".into()))?;
                    let apply_b = |v: &[f64]| apply_block_kron(factors, &shapes, v);
                    qe_step(
                        &solver, &apply_b, &params, &binputs, &ring, &g, &mut state, lam, k,
                        &qe_cfg, head,
                    )
                }
            };
            let s_raw = match step_result {
                Ok(s) => s,
                Err(e @ Error::Numeric(_)) => {
                    abort = Some((epoch, k, e));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let s = clip_step(&s_raw, &clip, &groups)?;

            if push_snapshot {
                ring.push(params.snapshot(), k)?;
            }

            apply_update(&mut params, &s, cfg.weight_decay / lam)?;
            step_norm_sum += norm2(&s);
            k += 1;
        }

        let (test_loss, test_acc) = evaluate(&params, &test, loss_kind)?;
        let elapsed = started.elapsed().as_secs_f64();
        let wall_s = if timing { elapsed } else { 0.0 };
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            test_loss,
            test_acc,
            wall_s,
            step_norm: step_norm_sum / n_batches.max(1) as f64,
            margin: epoch_margin,
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch,
            fmt_float(row.train_loss),
            fmt_float(row.test_loss),
            fmt_float(row.test_acc),
            fmt_float(row.wall_s),
            fmt_float(row.step_norm)
        ));
        eprintln!(
            "[{} seed {}] epoch {}/{}: train_loss {:.4} test_loss {:.4} test_acc {:.4} ({:.1}s){}",
            cfg.solver.name(),
            cfg.seed,
            epoch,
            cfg.epochs,
            row.train_loss,
            row.test_loss,
            row.test_acc,
            elapsed,
            match epoch_margin {
                Some(m) => format!(" margin {m:.3}"),
                None => String::new(),
            }
        );
        rows.push(row);
    }

    if let Some((epoch, step, err)) = abort {
        csv.push_str(&format!("# diverged epoch={epoch} step={step}\n"));
        std::fs::write(&csv_path, &csv)?;
        return Err(Error::Numeric(format!("run aborted at epoch {epoch}, step {step}: {err}")));
    }
    std::fs::write(&csv_path, &csv)?;
    Ok(RunMetrics { rows, csv_path })
}
