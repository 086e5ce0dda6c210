use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Settings for a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients near zero
    /// are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose stencil crosses a non-differentiable point.
    pub skipped: Vec<(usize, usize)>,
    /// Set when the function or a gradient is not finite.
    pub non_finite: Option<String>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        if let Some(msg) = &self.non_finite {
            return format!("FAIL non-finite value: {msg}");
        }
        let status = if self.passed { "ok" } else { "FAIL" };
        let mut s = format!(
            "{status} max_rel_err={:.3e} checked={}",
            self.max_rel_err, self.checked
        );
        if let Some((i, c)) = self.worst {
            s.push_str(&format!(" worst=input{i}[{c}]"));
        }
        if !self.skipped.is_empty() {
            s.push_str(&format!(
                " skipped={} (non-differentiable point, skipped coordinate)",
                self.skipped.len()
            ));
        }
        s
    }
}

/// Reduces `y` to a scalar with fixed pseudo-random weights in `[-1, 1]`, so a
/// gradient check sees every output coordinate with a distinct sensitivity.
pub fn probe<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = Tensor::from_fn(g.shape(y), |_| T::of(rng.random_range(-1.0..1.0)));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<T, F>(f: &F, xs: &[Tensor<T>], with_grad: bool) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), with_grad)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarRoot(g.shape(out).to_vec()));
    }
    if with_grad {
        g.backward(out)?;
    }
    Ok((g, vars, out))
}

/// Compares autodiff gradients of a scalar function of one tensor against
/// central finite differences.
pub fn gradcheck<T, F>(f: F, x: &Tensor<T>, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), cfg)
}

/// Multi-input variant of [`gradcheck`]: every input is perturbed in turn.
///
/// A coordinate whose `+eps` and `-eps` evaluations take different branches of
/// a non-smooth primitive (hinge, abs, relu, max) is reported in `skipped`
/// rather than compared.
pub fn gradcheck_many<T, F>(f: F, xs: &[Tensor<T>], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut report = GradcheckReport::default();
    let (g0, vars, out) = evaluate(&f, xs, true)?;
    if !g0.value(out).item().is_finite() {
        report.non_finite = Some(format!("f(x) = {} at the base point", g0.value(out).item()));
        return Ok(report);
    }
    let base_sig = g0.branch_signature().to_vec();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| match g0.grad(v) {
            Some(gr) => gr.to_f64_vec(),
            None => vec![0.0; x.numel()],
        })
        .collect();
    drop(g0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = T::of(cfg.eps);
    let mut work: Vec<Tensor<T>> = xs.to_vec();
    for (input, x) in xs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < x.numel() => {
                let mut c = sample(&mut rng, x.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..x.numel()).collect(),
        };
        for c in coords {
            let orig = x.data()[c];
            work[input].data_mut()[c] = orig + eps;
            let (gp, _, op) = evaluate(&f, &work, false)?;
            work[input].data_mut()[c] = orig - eps;
            let (gm, _, om) = evaluate(&f, &work, false)?;
            work[input].data_mut()[c] = orig;

            let (fp, fm) = (gp.value(op).item().as_f64(), gm.value(om).item().as_f64());
            let a = analytic[input][c];
            if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
                report.non_finite = Some(format!("input{input}[{c}]: f+={fp} f-={fm} grad={a}"));
                report.passed = false;
                return Ok(report);
            }
            if gp.branch_signature() != gm.branch_signature() || gp.branch_signature() != base_sig.as_slice() {
                report.skipped.push((input, c));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((input, c));
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tol;
    Ok(report)
}
