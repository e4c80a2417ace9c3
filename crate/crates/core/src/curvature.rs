//! Per-client curvature (top Hessian eigenvalue, Hessian trace) and the
//! relative overfitting rank derived from their pairwise spread.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{hvp_at, Batch, BatchObjective, GradVector, GradientOracle, ModelParams};
use crate::{Error, Result};

const MAX_START_REDRAWS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConfig {
    pub power_iters: usize,
    pub tol: f64,
    pub probes: usize,
    /// Examples drawn (without replacement) from the shard for each estimate.
    pub subsample: usize,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            power_iters: 20,
            tol: 1e-4,
            probes: 100,
            subsample: 256,
        }
    }
}

/// Signed Rayleigh quotient of the dominant (largest magnitude) Hessian
/// eigenvalue, by power iteration on Hessian-vector products.
pub fn top_eigenvalue<O, R>(
    oracle: &O,
    theta: &[f64],
    iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<f64>
where
    O: GradientOracle + ?Sized,
    R: Rng + ?Sized,
{
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "power iteration needs iters >= 1".into(),
        ));
    }
    let d = oracle.dim();
    let mut v = None;
    for _ in 0..=MAX_START_REDRAWS {
        let draw = GradVector::new((0..d).map(|_| rng.sample(StandardNormal)).collect());
        let norm = draw.norm();
        if norm > 0.0 {
            v = Some(GradVector::new(
                draw.into_inner().into_iter().map(|x| x / norm).collect(),
            ));
            break;
        }
    }
    let mut v = v.ok_or(Error::DegenerateStart(MAX_START_REDRAWS))?;

    let mut estimate = f64::NAN;
    for it in 0..iters {
        let hv = hvp_at(oracle, theta, &v)?;
        let rayleigh = v.dot(&hv);
        let converged = it > 0 && (rayleigh - estimate).abs() < tol;
        estimate = rayleigh;
        let norm = hv.norm();
        if converged || norm == 0.0 {
            break;
        }
        v = GradVector::new(hv.into_inner().into_iter().map(|x| x / norm).collect());
    }
    Ok(estimate)
}

/// Hutchinson estimate of `tr(H)` from Rademacher probes.
pub fn hessian_trace<O, R>(oracle: &O, theta: &[f64], probes: usize, rng: &mut R) -> Result<f64>
where
    O: GradientOracle + ?Sized,
    R: Rng + ?Sized,
{
    if probes == 0 {
        return Err(Error::InvalidArgument(
            "hessian_trace needs probes >= 1".into(),
        ));
    }
    let d = oracle.dim();
    let mut total = 0.0;
    for _ in 0..probes {
        let z = GradVector::new(
            (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        );
        total += z.dot(&hvp_at(oracle, theta, &z)?);
    }
    Ok(total / probes as f64)
}

/// Raw curvature of one client model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCurvature {
    pub lambda_max: f64,
    pub trace: f64,
}

/// Estimate curvature of `model` on a random subsample of `shard`.
pub fn estimate_client_curvature<R: Rng + ?Sized>(
    model: &ModelParams,
    shard: &Batch,
    cfg: &CurvatureConfig,
    rng: &mut R,
) -> Result<ClientCurvature> {
    let data = if shard.len() > cfg.subsample && cfg.subsample > 0 {
        let mut rows = index::sample(rng, shard.len(), cfg.subsample).into_vec();
        rows.sort_unstable();
        shard.select(&rows)?
    } else {
        shard.clone()
    };
    let objective = BatchObjective::new(model.architecture(), &data)?;
    let lambda_max = top_eigenvalue(&objective, model.as_slice(), cfg.power_iters, cfg.tol, rng)?;
    let trace = hessian_trace(&objective, model.as_slice(), cfg.probes, rng)?;
    Ok(ClientCurvature { lambda_max, trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub lambda_max: f64,
    pub trace: f64,
    /// Mean absolute gap of `lambda_max` to every other client.
    pub delta_bar: f64,
    /// Same for the trace.
    pub h_bar: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub clients: Vec<CurvatureRow>,
}

impl CurvatureReport {
    pub fn rho(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.rho).collect()
    }
}

fn mean_pairwise_gap(values: &[f64]) -> Vec<f64> {
    let k = values.len();
    values
        .iter()
        .enumerate()
        .map(|(i, a)| {
            values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a - b).abs())
                .sum::<f64>()
                / (k - 1) as f64
        })
        .collect()
}

/// Normalize by the maximum; an all-zero family contributes zeros.
fn normalized(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    values
        .iter()
        .map(|&v| if max > 0.0 { v / max } else { 0.0 })
        .collect()
}

/// Build the full report, including the per-client overfitting rank.
pub fn curvature_report(lambdas: &[f64], traces: &[f64]) -> Result<CurvatureReport> {
    if lambdas.len() != traces.len() {
        return Err(Error::Dimension(
            "lambda and trace vectors differ in length".into(),
        ));
    }
    if lambdas.len() < 2 {
        return Err(Error::InvalidArgument(
            "overfitting ranks need at least two clients".into(),
        ));
    }
    if lambdas.iter().chain(traces).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("curvature inputs"));
    }
    let delta = mean_pairwise_gap(lambdas);
    let h = mean_pairwise_gap(traces);
    let (dn, hn) = (normalized(&delta), normalized(&h));
    let clients = (0..lambdas.len())
        .map(|k| CurvatureRow {
            lambda_max: lambdas[k],
            trace: traces[k],
            delta_bar: delta[k],
            h_bar: h[k],
            rho: (dn[k] + hn[k]) / 2.0,
        })
        .collect();
    Ok(CurvatureReport { clients })
}

pub fn overfitting_ranks(lambdas: &[f64], traces: &[f64]) -> Result<Vec<f64>> {
    Ok(curvature_report(lambdas, traces)?.rho())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture, QuadraticObjective};
    use crate::rng;
    use nalgebra::DMatrix;
    use ndarray::Array2;
    use proptest::prelude::*;

    struct Linear(Vec<f64>);

    impl GradientOracle for Linear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn gradient(&self, _theta: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn eigenvalue_of_diagonal_quadratics() {
        let q = QuadraticObjective::diagonal(&[5.0, 1.0]);
        let l = top_eigenvalue(&q, &[0.3, -0.2], 200, 1e-12, &mut rng::seeded(1)).unwrap();
        assert!((l - 5.0).abs() < 1e-3);
        let id = QuadraticObjective::diagonal(&[1.0; 4]);
        let l = top_eigenvalue(&id, &[0.0; 4], 20, 1e-4, &mut rng::seeded(2)).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eigenvalue_reports_sign_of_dominant_mode() {
        let q = QuadraticObjective::diagonal(&[2.0, -6.0, 1.0]);
        let l = top_eigenvalue(&q, &[0.0; 3], 500, 1e-12, &mut rng::seeded(4)).unwrap();
        assert!((l + 6.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn empty_parameter_space_is_degenerate_start() {
        let q = QuadraticObjective::diagonal(&[]);
        let err = top_eigenvalue(&q, &[], 5, 1e-4, &mut rng::seeded(1));
        assert!(matches!(err, Err(Error::DegenerateStart(3))));
    }

    #[test]
    fn trace_of_diagonal_quadratic_is_exact_for_any_probe_count() {
        let q = QuadraticObjective::diagonal(&[2.0, 3.0]);
        for probes in [1, 2, 7, 50] {
            let t =
                hessian_trace(&q, &[1.0, -1.0], probes, &mut rng::seeded(probes as u64)).unwrap();
            assert!((t - 5.0).abs() < 1e-9, "{t}");
        }
        let flat = Linear(vec![1.0, 2.0, 3.0]);
        assert_eq!(
            hessian_trace(&flat, &[0.0; 3], 10, &mut rng::seeded(0)).unwrap(),
            0.0
        );
    }

    /// Dense Hessian by central differences of the analytic gradient along
    /// each basis vector.
    fn dense_hessian(obj: &BatchObjective<'_>, theta: &[f64]) -> DMatrix<f64> {
        let d = theta.len();
        let eps = 1e-4 * theta.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        let mut h = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[j] += eps;
            m[j] -= eps;
            let (gp, gm) = (obj.gradient(&p).unwrap(), obj.gradient(&m).unwrap());
            for i in 0..d {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
            }
        }
        (&h + h.transpose()) * 0.5
    }

    fn tiny_problem(seed: u64) -> (ModelParams, Batch) {
        use rand::Rng as _;
        let arch = Architecture::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let model = ModelParams::init(arch, &mut rng::seeded(seed));
        let mut r = rng::seeded(seed + 1000);
        let inputs = Array2::from_shape_fn((24, 3), |_| r.random_range(-2.0..2.0));
        let labels = (0..24).map(|_| r.random_range(0..2)).collect();
        (model, Batch::new(inputs, labels).unwrap())
    }

    #[test]
    fn eigenvalue_matches_dense_oracle_on_tiny_mlp() {
        for seed in 0..5 {
            let (model, batch) = tiny_problem(seed);
            let obj = BatchObjective::new(model.architecture(), &batch).unwrap();
            let h = dense_hessian(&obj, model.as_slice());
            let eig = h.symmetric_eigenvalues();
            let dominant = eig
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap();
            let est = top_eigenvalue(&obj, model.as_slice(), 2000, 1e-12, &mut rng::seeded(seed))
                .unwrap();
            assert!(
                (est - dominant).abs() <= 1e-2 * dominant.abs(),
                "{est} vs {dominant}"
            );
        }
    }

    #[test]
    fn trace_matches_dense_oracle_on_most_seeds() {
        let mut hits = 0;
        for seed in 0..10 {
            let (model, batch) = tiny_problem(seed + 20);
            let obj = BatchObjective::new(model.architecture(), &batch).unwrap();
            let exact = dense_hessian(&obj, model.as_slice()).trace();
            let est = hessian_trace(&obj, model.as_slice(), 1000, &mut rng::seeded(seed)).unwrap();
            if (est - exact).abs() <= 0.1 * exact.abs() {
                hits += 1;
            }
        }
        assert!(hits >= 8, "only {hits}/10 seeds within 10%");
    }

    #[test]
    fn rank_examples() {
        let r = curvature_report(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        let delta: Vec<f64> = r.clients.iter().map(|c| c.delta_bar).collect();
        assert_eq!(delta, vec![2.0, 1.5, 2.5]);
        let rho = r.rho();
        for (a, b) in rho.iter().zip([0.8, 0.6, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            overfitting_ranks(&[3.0; 4], &[7.0; 4]).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(
            overfitting_ranks(&[0.2, 9.0], &[5.0, -1.0]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(overfitting_ranks(&[1.0], &[1.0]).is_err());
        assert!(overfitting_ranks(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn one_constant_family_halves_the_rank() {
        let rho = overfitting_ranks(&[1.0, 2.0, 4.0], &[3.0; 3]).unwrap();
        assert!((rho[2] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ranks_are_bounded_and_equivariant(
            lam in prop::collection::vec(-10.0f64..10.0, 2..8),
            seed in any::<u64>(),
            scale in 0.01f64..100.0,
        ) {
            use rand::seq::SliceRandom;
            let k = lam.len();
            let mut r = rng::seeded(seed);
            let tr: Vec<f64> = lam.iter().map(|x| x * 1.7 + (*x * 3.0).sin()).collect();
            let rho = overfitting_ranks(&lam, &tr).unwrap();
            for &x in &rho {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut r);
            let pl: Vec<f64> = perm.iter().map(|&i| lam[i]).collect();
            let pt: Vec<f64> = perm.iter().map(|&i| tr[i]).collect();
            let prho = overfitting_ranks(&pl, &pt).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((prho[j] - rho[i]).abs() < 1e-12);
            }
            let sl: Vec<f64> = lam.iter().map(|x| x * scale).collect();
            let srho = overfitting_ranks(&sl, &tr).unwrap();
            for (a, b) in srho.iter().zip(&rho) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
