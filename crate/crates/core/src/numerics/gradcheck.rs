//! Central finite-difference oracle for tape gradients.
//!
//! The loss closure is evaluated on an `f64` copy of the parameters, both for
//! the analytic backward pass and for every perturbed forward pass, so the
//! comparison is not limited by `f32` round-off.

use super::{NumericsError, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Per-coordinate relative tolerance that most coordinates must meet.
    pub tolerance: f64,
    /// Fraction of coordinates that must be within `tolerance`.
    pub min_fraction: f64,
    /// No coordinate may exceed this relative error.
    pub max_error: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            min_fraction: 0.99,
            max_error: 1e-2,
            floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub coordinates: usize,
    pub within_tolerance: usize,
    pub max_error: f64,
    pub worst: String,
    pub min_fraction: f64,
    pub max_allowed: f64,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.coordinates == 0 {
            1.0
        } else {
            self.within_tolerance as f64 / self.coordinates as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.coordinates > 0 && self.fraction_within() >= self.min_fraction && self.max_error < self.max_allowed
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} coords, {:.2}% within tol, max rel err {:.3e} ({})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.coordinates,
            100.0 * self.fraction_within(),
            self.max_error,
            self.worst
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of `loss_fn` against central differences for
/// every non-frozen parameter of `store`.
pub fn check_gradients<E, F>(
    name: &str,
    store: &ParamStore<f32>,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var, E>,
{
    let mut store64: ParamStore<f64> = store.cast();
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new(&store64);
        let loss = loss_fn(&mut tape)?;
        let grads = tape.backward(loss)?;
        store64
            .iter()
            .map(|(id, _)| grads.param(id).map(|g| g.data().to_vec()))
            .collect()
    };
    let mut eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::new(s);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item()?)
    };
    let mut report = GradCheckReport {
        name: name.to_string(),
        coordinates: 0,
        within_tolerance: 0,
        max_error: 0.0,
        worst: String::new(),
        min_fraction: opts.min_fraction,
        max_allowed: opts.max_error,
    };
    let ids: Vec<_> = store64.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store64.value(id).len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let original = store64.value(id).data()[j];
            store64.get_mut(id).value.data_mut()[j] = original + opts.step;
            let plus = eval(&store64)?;
            store64.get_mut(id).value.data_mut()[j] = original - opts.step;
            let minus = eval(&store64)?;
            store64.get_mut(id).value.data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric, opts.floor);
            report.coordinates += 1;
            if err < opts.tolerance {
                report.within_tolerance += 1;
            }
            if err > report.max_error {
                report.max_error = err;
                report.worst = format!("{}[{j}] analytic {a:.6e} numeric {numeric:.6e}", store64.get(id).name);
            }
        }
    }
    Ok(report)
}
