use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssm_impute::kalman::{filter_series, measurement_update, FilterState};
use ssm_impute::model::{make_condition, simulate, Indicators, Loadings, MaskedSeries, ModelParams};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
    let a = Matrix2::new(
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.6..0.6),
    );
    let l = Matrix2::new(rng.random_range(0.5..1.5), 0.0, normal(rng) * 0.3, rng.random_range(0.5..1.5));
    let h = Loadings::from_fn(|_, _| normal(rng));
    let r = Indicators::from_fn(|_, _| rng.random_range(0.2..1.0));
    ModelParams { a, h, q: l * l.transpose(), r }
}

fn random_init(rng: &mut ChaCha8Rng) -> FilterState {
    let l = Matrix2::new(rng.random_range(0.5..1.5), 0.0, normal(rng) * 0.3, rng.random_range(0.5..1.5));
    FilterState { x: Vector2::new(normal(rng), normal(rng)), p: l * l.transpose() }
}

/// Mean and covariance of the stacked observations, built by unrolling the
/// state recursion from the initial distribution.
fn joint_moments(params: &ModelParams, init: &FilterState, t_len: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let (mut m, mut v) = (init.x, init.p);
    for _ in 0..t_len {
        m = params.a * m;
        v = params.a * v * params.a.transpose() + params.q;
        means.push(m);
        vars.push(v);
    }
    let n = 6 * t_len;
    let mut mu = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for s in 0..t_len {
        let zm = params.h * means[s];
        for i in 0..6 {
            mu[6 * s + i] = zm[i];
        }
        for t in s..t_len {
            // Cov(x_t, x_s) = A^{t-s} V_s
            let mut c = vars[s];
            for _ in s..t {
                c = params.a * c;
            }
            let block = params.h * c * params.h.transpose();
            for i in 0..6 {
                for j in 0..6 {
                    let mut val = block[(i, j)];
                    if s == t && i == j {
                        val += params.r[i];
                    }
                    cov[(6 * t + i, 6 * s + j)] = val;
                    cov[(6 * s + j, 6 * t + i)] = val;
                }
            }
        }
    }
    (mu, cov)
}

fn mvn_logpdf(y: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance must be positive definite");
    let d = y - mu;
    let sol = chol.solve(&d);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + d.dot(&sol))
}

fn random_series(rng: &mut ChaCha8Rng, t_len: usize) -> MaskedSeries {
    MaskedSeries::from_observations(DMatrix::from_fn(t_len, 6, |_, _| normal(rng)))
}

fn observed_subset(series: &MaskedSeries, mu: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let keep: Vec<usize> = (0..series.len() * 6).filter(|k| !series.mask[(k / 6, k % 6)]).collect();
    let y = DVector::from_iterator(keep.len(), keep.iter().map(|&k| series.z[(k / 6, k % 6)]));
    let m = DVector::from_iterator(keep.len(), keep.iter().map(|&k| mu[k]));
    let c = DMatrix::from_fn(keep.len(), keep.len(), |i, j| cov[(keep[i], keep[j])]);
    (y, m, c)
}

#[test]
fn loglik_matches_joint_gaussian_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let params = random_params(&mut rng);
        let init = random_init(&mut rng);
        let series = random_series(&mut rng, 3);
        let (mu, cov) = joint_moments(&params, &init, 3);
        let oracle = mvn_logpdf(&DVector::from_iterator(18, (0..18).map(|k| series.z[(k / 6, k % 6)])), &mu, &cov);
        let ll = filter_series(&series, &params, &init).unwrap().loglik;
        assert!(((ll - oracle) / oracle).abs() < 1e-8, "{ll} vs {oracle}");
    }
}

#[test]
fn masked_rows_match_marginal_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let params = random_params(&mut rng);
        let init = random_init(&mut rng);
        let mut series = random_series(&mut rng, 5);
        for t in [1, 3] {
            for c in 0..3 {
                series.mask[(t, c)] = true;
            }
        }
        let (mu, cov) = joint_moments(&params, &init, 5);
        let (y, m, c) = observed_subset(&series, &mu, &cov);
        assert_eq!(y.len(), 24);
        let oracle = mvn_logpdf(&y, &m, &c);
        let ll = filter_series(&series, &params, &init).unwrap().loglik;
        assert!(((ll - oracle) / oracle).abs() < 1e-8, "{ll} vs {oracle}");
    }
}

#[test]
fn partial_update_matches_gaussian_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let params = random_params(&mut rng);
        let prior = random_init(&mut rng);
        let z: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
        let observed = [false, false, false, true, true, true];
        let (post, ll) = measurement_update(&prior, &z, &observed, &params).unwrap();

        // joint of (x1, x2, z1..z6)
        let mut full_h = DMatrix::zeros(8, 2);
        full_h[(0, 0)] = 1.0;
        full_h[(1, 1)] = 1.0;
        for i in 0..6 {
            full_h[(2 + i, 0)] = params.h[(i, 0)];
            full_h[(2 + i, 1)] = params.h[(i, 1)];
        }
        let mean = &full_h * DVector::from_column_slice(prior.x.as_slice());
        let p = DMatrix::from_fn(2, 2, |r, c| prior.p[(r, c)]);
        let mut cov = &full_h * p * full_h.transpose();
        for i in 0..6 {
            cov[(2 + i, 2 + i)] += params.r[i];
        }
        let obs_idx = [5usize, 6, 7];
        let sxx = cov.view((0, 0), (2, 2)).into_owned();
        let sxo = DMatrix::from_fn(2, 3, |r, c| cov[(r, obs_idx[c])]);
        let soo = DMatrix::from_fn(3, 3, |r, c| cov[(obs_idx[r], obs_idx[c])]);
        let soo_inv = soo.clone().try_inverse().unwrap();
        let resid = DVector::from_fn(3, |k, _| z[3 + k] - mean[obs_idx[k]]);
        let cond_mean = DVector::from_fn(2, |k, _| mean[k]) + &sxo * &soo_inv * &resid;
        let cond_cov = sxx - &sxo * &soo_inv * sxo.transpose();
        for r in 0..2 {
            assert!((post.x[r] - cond_mean[r]).abs() < 1e-10);
            for c in 0..2 {
                assert!((post.p[(r, c)] - cond_cov[(r, c)]).abs() < 1e-10);
            }
        }
        let oracle = mvn_logpdf(&(resid.clone() + DVector::from_fn(3, |k, _| mean[obs_idx[k]])),
            &DVector::from_fn(3, |k, _| mean[obs_idx[k]]), &soo);
        assert!((ll - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
    }
}

#[test]
fn near_noiseless_indicators_pin_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut params = random_params(&mut rng);
    params.r = Indicators::repeat(1e-9);
    let prior = random_init(&mut rng);
    let x = Vector2::new(0.4, -1.2);
    let z: Vec<f64> = (0..6).map(|i| (params.h.row(i) * x)[0]).collect();
    let (post, _) = measurement_update(&prior, &z, &[true; 6], &params).unwrap();
    assert!((post.x - x).norm() < 1e-6);
}

#[test]
fn loglik_invariant_to_indicator_order_within_block() {
    let params = make_condition(0.25, 0.7, 0.3).unwrap();
    let mut varied = params.clone();
    varied.h[(0, 0)] = 0.6;
    varied.h[(1, 0)] = 0.9;
    varied.r[0] = 0.4;
    varied.r[2] = 0.1;
    let mut series = simulate(&params, 200, 21, 100).unwrap();
    for t in (0..200).step_by(7) {
        series.mask[(t, 1)] = true;
    }
    let init = FilterState::stationary(&params).unwrap();
    let base = filter_series(&series, &varied, &init).unwrap().loglik;

    let perm = [2usize, 0, 1, 3, 4, 5];
    let mut permuted = series.clone();
    let mut pparams = varied.clone();
    for (new, &old) in perm.iter().enumerate() {
        for t in 0..200 {
            permuted.z[(t, new)] = series.z[(t, old)];
            permuted.mask[(t, new)] = series.mask[(t, old)];
        }
        pparams.h.set_row(new, &varied.h.row(old));
        pparams.r[new] = varied.r[old];
    }
    let swapped = filter_series(&permuted, &pparams, &init).unwrap().loglik;
    assert!((base - swapped).abs() < 1e-9 * base.abs());
}
