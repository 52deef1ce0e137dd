//! Gaussian-oracle benchmark for the mutual-information estimators.
//!
//! Pairs are drawn as z ~ N(0, I_d), z+ = rho z + sqrt(1-rho^2) eps, whose
//! mutual information is analytically -d/2 ln(1-rho^2). The approximator is
//! trained on one batch and the bounds are evaluated on a fresh batch, which
//! keeps the independent-pair case exactly unbiased around zero.

use super::{club_upper_bound, infonce_lower_bound, q_nll_loss, VariationalQ};
use crate::error::Result;
use crate::rng;
use crate::tensor::optim::{zero_grads, AdamState};
use crate::tensor::GradTensor;
use serde::Serialize;

pub const DEFAULT_TAUS: [f64; 3] = [0.1, 0.5, 1.0];
pub const DEFAULT_Q_STEPS: usize = 400;
pub const DEFAULT_Q_LR: f64 = 1e-2;

pub fn analytic_gaussian_mi(rho: f64, d: usize) -> f64 {
    -(d as f64) / 2.0 * (1.0 - rho * rho).ln()
}

/// Draw an index-aligned pair batch with per-dimension correlation `rho`.
pub fn gaussian_pairs(
    seed: u64,
    n: usize,
    d: usize,
    rho: f64,
) -> (GradTensor<f64>, GradTensor<f64>) {
    let mut rng = rng::stream(seed, "gaussian_pairs");
    let mut z = Vec::with_capacity(n * d);
    let mut zp = Vec::with_capacity(n * d);
    let noise = (1.0 - rho * rho).sqrt();
    for _ in 0..n * d {
        let a = rng::normal(&mut rng);
        let e = rng::normal(&mut rng);
        z.push(a);
        zp.push(rho * a + noise * e);
    }
    (
        GradTensor::constant(vec![n, d], z).expect("z batch"),
        GradTensor::constant(vec![n, d], zp).expect("zp batch"),
    )
}

/// Fit the variational approximator on one batch by full-batch Adam.
pub fn train_q(
    z: &GradTensor<f64>,
    zp: &GradTensor<f64>,
    d: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<VariationalQ<f64>> {
    let q = VariationalQ::init(&mut rng::stream(seed, "q_init"), d);
    let params = q.params();
    let mut opt = AdamState::new(&params, lr);
    for _ in 0..steps {
        zero_grads(&params);
        let loss = q_nll_loss(z, zp, &q)?;
        loss.backward()?;
        opt.step(&params)?;
    }
    Ok(q)
}

/// Best corrected-InfoNCE value over a temperature grid.
pub fn infonce_best_tau(
    z: &GradTensor<f64>,
    zp: &GradTensor<f64>,
    taus: &[f64],
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for &tau in taus {
        best = best.max(infonce_lower_bound(z, zp, tau)?.value());
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct CorrelatedOutcome {
    pub analytic: f64,
    pub clubs: Vec<f64>,
    pub infonces: Vec<f64>,
}

impl CorrelatedOutcome {
    pub fn mean_club(&self) -> f64 {
        mean(&self.clubs)
    }
    pub fn mean_infonce(&self) -> f64 {
        mean(&self.infonces)
    }
}

/// One oracle run per seed: train q on a training batch, evaluate CLUB and
/// best-tau InfoNCE on a fresh batch of the same construction.
pub fn correlated_oracle(
    rho: f64,
    d: usize,
    n: usize,
    seeds: &[u64],
    q_steps: usize,
    q_lr: f64,
    taus: &[f64],
) -> Result<CorrelatedOutcome> {
    let mut clubs = Vec::new();
    let mut infonces = Vec::new();
    for &seed in seeds {
        let (z_train, zp_train) = gaussian_pairs(rng::mix_seed(&[seed, 1]), n, d, rho);
        let (z_eval, zp_eval) = gaussian_pairs(rng::mix_seed(&[seed, 2]), n, d, rho);
        let q = train_q(&z_train, &zp_train, d, q_steps, q_lr, seed)?;
        clubs.push(club_upper_bound(&z_eval, &zp_eval, &q)?.value());
        infonces.push(infonce_best_tau(&z_eval, &zp_eval, taus)?);
    }
    Ok(CorrelatedOutcome {
        analytic: analytic_gaussian_mi(rho, d),
        clubs,
        infonces,
    })
}

#[derive(Debug, Clone)]
pub struct IndependenceOutcome {
    pub infonce: Vec<f64>,
    pub club: Vec<f64>,
}

impl IndependenceOutcome {
    /// |mean| measured against three standard errors of the estimator,
    /// with the estimator spread taken from the trials themselves.
    pub fn within_three_se(vals: &[f64]) -> bool {
        let m = mean(vals);
        let sd = std_dev(vals);
        m.abs() <= 3.0 * sd.max(1e-12)
    }
}

/// Estimator behavior on independent pairs. InfoNCE runs at small batch size
/// where its finite-sample spread dominates the (strictly negative) Jensen
/// bias; CLUB is evaluated on a batch fresh relative to q's training batch,
/// which makes its expectation exactly zero under independence.
pub fn independence_trials(
    d: usize,
    trials: usize,
    base_seed: u64,
    n_infonce: usize,
    infonce_tau: f64,
    n_club: usize,
    q_steps: usize,
    q_lr: f64,
) -> Result<IndependenceOutcome> {
    let mut infonce = Vec::with_capacity(trials);
    let mut club = Vec::with_capacity(trials);
    for t in 0..trials {
        let ts = rng::mix_seed(&[base_seed, t as u64]);
        let (zi, _) = gaussian_pairs(rng::mix_seed(&[ts, 10]), n_infonce, d, 0.0);
        let (zpi, _) = gaussian_pairs(rng::mix_seed(&[ts, 11]), n_infonce, d, 0.0);
        infonce.push(infonce_lower_bound(&zi, &zpi, infonce_tau)?.value());

        let (zc_train, _) = gaussian_pairs(rng::mix_seed(&[ts, 20]), n_club, d, 0.0);
        let (zpc_train, _) = gaussian_pairs(rng::mix_seed(&[ts, 21]), n_club, d, 0.0);
        let q = train_q(&zc_train, &zpc_train, d, q_steps, q_lr, ts)?;
        let (zc, _) = gaussian_pairs(rng::mix_seed(&[ts, 22]), n_club, d, 0.0);
        let (zpc, _) = gaussian_pairs(rng::mix_seed(&[ts, 23]), n_club, d, 0.0);
        club.push(club_upper_bound(&zc, &zpc, &q)?.value());
    }
    Ok(IndependenceOutcome { infonce, club })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub rho: f64,
    pub d: usize,
    pub analytic: f64,
    pub infonce: f64,
    pub club: f64,
}

/// Seed-averaged estimates across a correlation sweep, for the benchmark CSV.
pub fn bench_rows(
    rhos: &[f64],
    d: usize,
    n: usize,
    n_seeds: usize,
    q_steps: usize,
    q_lr: f64,
) -> Result<Vec<BenchRow>> {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|s| 1000 + s).collect();
    let mut rows = Vec::new();
    for &rho in rhos {
        let out = correlated_oracle(rho, d, n, &seeds, q_steps, q_lr, &DEFAULT_TAUS)?;
        rows.push(BenchRow {
            rho,
            d,
            analytic: out.analytic,
            infonce: out.mean_infonce(),
            club: out.mean_club(),
        });
    }
    Ok(rows)
}

pub fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn std_dev(vals: &[f64]) -> f64 {
    let m = mean(vals);
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() as f64 - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_value_matches_hand_arithmetic() {
        let v = analytic_gaussian_mi(0.8, 4);
        assert!((v - 2.0433024952420017).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn gaussian_pairs_have_requested_correlation() {
        let (z, zp) = gaussian_pairs(5, 4000, 2, 0.8);
        let zd = z.data_vec();
        let zpd = zp.data_vec();
        let n = zd.len() as f64;
        let corr = zd.iter().zip(zpd.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((corr - 0.8).abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn trained_club_respects_lower_edge_on_small_instance() {
        // small, fast instance: the converged CLUB must not fall below
        // analytic - 0.15 (upper-bound direction)
        let out = correlated_oracle(0.8, 2, 300, &[1, 2], 250, 1e-2, &DEFAULT_TAUS).unwrap();
        assert!(
            out.mean_club() >= out.analytic - 0.15,
            "club {} vs analytic {}",
            out.mean_club(),
            out.analytic
        );
        assert!(
            out.mean_infonce() <= out.analytic + 0.1,
            "infonce {} vs analytic {}",
            out.mean_infonce(),
            out.analytic
        );
    }
}
