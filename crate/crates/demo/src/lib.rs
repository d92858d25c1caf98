//! Browser demo: covariance spectrum, a 1D heat solve against its closed
//! form, and the partial sums of the first-order expansion of a Bermudan
//! swaption.
//!
//! Everything runs single-threaded; terms are solved one after the other.

use pdexpand::anova::{partial_sum_profile, ExpansionPlan};
use pdexpand::heatpde::{solve_term, ActiveAxis, AxisMap, GridSpec, HeatSolver};
use pdexpand::model::{LmmConfig, LmmModel};
use pdexpand::products::BermudanSwaption;
use wasm_bindgen::prelude::*;

fn js_err(e: pdexpand::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn flat_model(n: usize, phi: f64, vol: f64, level: f64) -> Result<LmmModel, pdexpand::Error> {
    LmmModel::new(LmmConfig::flat(n, 0.25, phi, vol, level)?)
}

/// Eigenvalues of the log-rate covariance matrix, largest first.
#[wasm_bindgen]
pub fn spectrum(n: usize, phi: f64, vol: f64) -> Result<Vec<f64>, JsError> {
    let m = flat_model(n, phi, vol, 0.1).map_err(js_err)?;
    Ok(m.spectrum().eigenvalues().to_vec())
}

/// Numerical and exact solution of `u_tau = lambda/2 u_zz` from `exp(-z^2/2)`.
#[wasm_bindgen]
pub struct HeatComparison {
    z: Vec<f64>,
    numeric: Vec<f64>,
    exact: Vec<f64>,
}

#[wasm_bindgen]
impl HeatComparison {
    #[wasm_bindgen(getter)]
    pub fn z(&self) -> Vec<f64> {
        self.z.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn numeric(&self) -> Vec<f64> {
        self.numeric.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn exact(&self) -> Vec<f64> {
        self.exact.clone()
    }

    /// Largest absolute difference over the sampled points.
    pub fn max_error(&self) -> f64 {
        self.numeric
            .iter()
            .zip(&self.exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Solve on `j` intervals with `steps` Crank-Nicolson steps and sample
/// `samples` points in `[-4, 4]`.
#[wasm_bindgen]
pub fn heat_solution_1d(lambda: f64, tau: f64, j: usize, steps: usize, samples: usize) -> Result<HeatComparison, JsError> {
    if steps == 0 || samples < 2 {
        return Err(JsError::new("need at least one step and two samples"));
    }
    let map = AxisMap::centered(0.0, 4.0).map_err(js_err)?;
    let solver = HeatSolver::new(vec![ActiveAxis { map, lambda }], j, tau / steps as f64, 1e6).map_err(js_err)?;
    let mut u = solver.surface_from(1, |_, z, out| out[0] = (-0.5 * z[0] * z[0]).exp());
    for _ in 0..steps {
        solver.step(&mut u);
    }
    let v = 1.0 + lambda * tau;
    let z: Vec<f64> = (0..samples).map(|i| -4.0 + 8.0 * i as f64 / (samples - 1) as f64).collect();
    let numeric = z.iter().map(|&x| solver.interpolate(&u, &[x])[0]).collect();
    let exact = z.iter().map(|&x| (-0.5 * x * x / v).exp() / v.sqrt()).collect();
    Ok(HeatComparison { z, numeric, exact })
}

/// Bermudan swaption value (in basis points of notional) when the first-order
/// expansion includes directions `1..=k`, for `k = 1..=n`.
#[wasm_bindgen]
pub fn bermudan_partial_sums(n: usize, strike: f64, j: usize, steps: usize) -> Result<Vec<f64>, JsError> {
    let model = flat_model(n, 0.0413, 0.2, 0.1).map_err(js_err)?;
    let product =
        BermudanSwaption::new(n, 0.25, strike, &BermudanSwaption::yearly_schedule(n)).map_err(js_err)?;
    let grid = GridSpec {
        j,
        steps_per_accrual: steps,
        ..GridSpec::default()
    };
    let plan = ExpansionPlan::first_order(n).map_err(js_err)?;
    let solve = |pattern: &[(usize, u32)]| -> Result<f64, JsError> {
        let i = plan
            .find(pattern)
            .ok_or_else(|| JsError::new("term missing from plan"))?;
        let lams = plan.terms[i].lambda_prime(plan.r, model.spectrum());
        solve_term(&model, &lams, &product, &grid).map_err(js_err)
    };
    let base = solve(&[])?;
    let corrections = (1..n).map(|k| solve(&[(k, 1)])).collect::<Result<Vec<_>, _>>()?;
    let scale = model.config.terminal_discount() * 1e4;
    Ok(partial_sum_profile(base, &corrections).into_iter().map(|v| v * scale).collect())
}
