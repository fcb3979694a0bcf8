use super::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, Parameters};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding compare by absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates left out because a probe crossed a relu kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Parameter and flat index where `max_rel_error` occurred.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the graph gradient of a scalar function against central finite
/// differences `(f(θ+h) − f(θ−h)) / 2h`, element by element. Coordinates whose
/// probes change the sign of any relu input are skipped and counted.
pub fn finite_diff_check<F>(f: F, params: &Parameters, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let eval = |p: &Parameters| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let out = f(&mut g, &bound)?;
        Ok((g.value(out).data()[0], g.relu_signs()))
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = f(&mut g, &bound)?;
    let signs = g.relu_signs();
    g.backward(out)?;
    let analytic = params.gradients(&g, &bound);

    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let (up, up_signs) = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let (down, down_signs) = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            if up_signs != signs || down_signs != signs {
                report.skipped += 1;
                continue;
            }

            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(name).unwrap().data()[i];
            let err = rel_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
            if err.is_nan() || err >= opts.tolerance {
                report.failures.push(GradCheckFailure {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
