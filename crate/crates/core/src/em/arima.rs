//! ARIMA(p, d, q) by conditional least squares, with Hannan–Rissanen
//! residual regression for the moving-average part.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::least_squares;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArimaOrder {
    fn default() -> Self {
        Self { p: 1, d: 0, q: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ArimaFit {
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// One-step-ahead in-sample predictions on the original scale.
    pub fitted: Vec<f64>,
}

fn difference(y: &[f64], d: usize) -> Vec<f64> {
    let mut w = y.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    w
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Regresses `w[t]` on an intercept, `p` lags of `w` and `q` lags of `e`,
/// for `t >= start`.
fn lag_regression(w: &[f64], e: Option<&[f64]>, p: usize, q: usize, start: usize) -> Option<DVector<f64>> {
    let n = w.len().checked_sub(start)?;
    let k = 1 + p + q;
    if n <= k {
        return None;
    }
    let x = DMatrix::from_fn(n, k, |r, c| {
        let t = r + start;
        match c {
            0 => 1.0,
            c if c <= p => w[t - c],
            c => e.map_or(0.0, |e| e[t - (c - p)]),
        }
    });
    let y = DVector::from_fn(n, |r, _| w[r + start]);
    least_squares(&x, &y)
}

/// Fits the model and returns its one-step-ahead predictions. Falls back to
/// the series mean when the series is too short or the design is singular.
pub fn fit_arima(y: &[f64], order: ArimaOrder) -> ArimaFit {
    let fallback = || ArimaFit {
        intercept: mean(y),
        ar: vec![0.0; order.p],
        ma: vec![0.0; order.q],
        fitted: vec![mean(y); y.len()],
    };
    if y.len() <= order.d + order.p + order.q + 2 {
        return fallback();
    }
    let w = difference(y, order.d);
    let (p, q) = (order.p, order.q);

    let coef = if q == 0 {
        lag_regression(&w, None, p, 0, p)
    } else {
        // long autoregression supplies innovation estimates
        let long = (p + q).max(10).min(w.len() / 4);
        lag_regression(&w, None, long, 0, long).and_then(|b| {
            let mut e = vec![0.0; w.len()];
            for t in long..w.len() {
                let pred = b[0] + (1..=long).map(|i| b[i] * w[t - i]).sum::<f64>();
                e[t] = w[t] - pred;
            }
            lag_regression(&w, Some(&e), p, q, long + q)
        })
    };
    let Some(coef) = coef else {
        log::warn!("ARIMA design is singular; using the series mean");
        return fallback();
    };
    let intercept = coef[0];
    let ar: Vec<f64> = (0..p).map(|i| coef[1 + i]).collect();
    let ma: Vec<f64> = (0..q).map(|j| coef[1 + p + j]).collect();

    let w_mean = mean(&w);
    let mut w_hat = vec![w_mean; w.len()];
    let mut resid = vec![0.0; w.len()];
    for t in 0..w.len() {
        if t >= p {
            w_hat[t] = intercept
                + (0..p).map(|i| ar[i] * w[t - 1 - i]).sum::<f64>()
                + (0..q).filter(|&j| t > j).map(|j| ma[j] * resid[t - 1 - j]).sum::<f64>();
        }
        resid[t] = w[t] - w_hat[t];
    }

    // Δᵈy_t has unit weight on y_t, so ŷ_t = y_t − (w_t − ŵ_t).
    let y_mean = mean(y);
    let fitted = (0..y.len())
        .map(|t| if t < order.d { y_mean } else { y[t] - resid[t - order.d] })
        .collect();
    ArimaFit { intercept, ar, ma, fitted }
}
