use super::{Graph, Tensor, Var};
use crate::error::{HseError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Probe step is `step_scale · max(1, |x|)`.
    pub step_scale: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Probe at most this many coordinates per input (evenly spread);
    /// `None` probes every coordinate.
    pub max_probes_per_input: Option<usize>,
    /// Seed of the fixed projection used to reduce multi-output ops.
    pub projection_seed: u64,
    /// A probe whose one-sided slopes disagree without shrinking along with
    /// the step sits on a kink; it is retried this many times at a tenth of
    /// the step and skipped if it never becomes smooth.
    pub kink_retries: usize,
    /// Fail when more than this fraction of probes is skipped.
    pub max_skipped_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step_scale: 1e-5,
            tolerance: 1e-4,
            max_probes_per_input: None,
            projection_seed: 0x5eed,
            kink_retries: 3,
            max_skipped_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
    /// Probes left out because the function is not smooth within the step.
    pub skipped: usize,
    /// `(input, coordinate)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so coordinates whose true gradient is zero compare absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` rebuilds the computation from the given input handles. A
/// multi-element output is reduced to `Σ r ⊙ out` with a fixed random
/// projection `r` in `[-1, 1)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], projection: Option<&Tensor>| -> Result<(Graph, Vec<Var>, Var, f64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let y = g.value(out);
        y.check_finite("grad_check output")?;
        let scalar = match projection {
            Some(r) => y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        Ok((g, vars, out, scalar))
    };

    let (mut g, vars, out, _) = run(inputs, None)?;
    let mut prng = SplitMix64::new(opts.projection_seed);
    let projection = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut prng);
    let center: f64 = g.value(out).data().iter().zip(projection.data()).map(|(a, b)| a * b).sum();
    g.backward(out, &projection)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("inputs are differentiable"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        probes: 0,
        skipped: 0,
        worst: None,
        pass: true,
    };
    let mut probe_inputs = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.len();
        let count = opts.max_probes_per_input.map_or(n, |m| m.min(n));
        for j in 0..count {
            let coord = if count == n { j } else { j * n / count };
            let x = input.data()[coord];
            let mut eval = |delta: f64| -> Result<f64> {
                probe_inputs[which].data_mut()[coord] = x + delta;
                let result = run(&probe_inputs, Some(&projection));
                probe_inputs[which].data_mut()[coord] = x;
                let (.., y) = result?;
                if !y.is_finite() {
                    return Err(HseError::NonFinite(format!(
                        "grad_check probe of input {which} coordinate {coord}"
                    )));
                }
                Ok(y)
            };
            let a = analytic[which].data()[coord];
            report.probes += 1;
            let mut h = opts.step_scale * x.abs().max(1.0);
            let mut wide = (eval(h)?, eval(-h)?);
            let mut numeric = None;
            for attempt in 0..=opts.kink_retries {
                let central = (wide.0 - wide.1) / (2.0 * h);
                let gap = |(plus, minus): (f64, f64), step: f64| ((plus - center) - (center - minus)).abs() / step;
                let scale = a.abs().max(central.abs()).max(REL_FLOOR);
                let wide_gap = gap(wide, h);
                if wide_gap <= opts.tolerance * scale {
                    numeric = Some(central);
                    break;
                }
                if attempt == opts.kink_retries {
                    break;
                }
                let narrow = (eval(h / 10.0)?, eval(-h / 10.0)?);
                let ratio = gap(narrow, h / 10.0) / wide_gap;
                if (0.05..=0.2).contains(&ratio) {
                    numeric = Some(central);
                    break;
                }
                h /= 10.0;
                wide = narrow;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((which, coord));
            }
        }
    }
    report.pass = report.max_rel_err < opts.tolerance
        && report.skipped as f64 <= opts.max_skipped_fraction * report.probes as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut rng = SplitMix64::new(1);
        let x = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let k = g.constant(Tensor::full(&[2], 4.0));
                let _ = v;
                Ok(g.scale(k, 2.0))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_abs_err, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn probes_across_a_kink_are_skipped() {
        let x = Tensor::from_vec(vec![1e-9, 0.8, -0.6]);
        let opts = GradCheckOptions {
            step_scale: 0.5,
            ..Default::default()
        };
        let report = grad_check(|g, v| Ok(g.relu(v[0])), std::slice::from_ref(&x), &opts).unwrap();
        assert_eq!((report.probes, report.skipped), (3, 1));
        assert!(!report.pass);
        let lenient = GradCheckOptions {
            max_skipped_fraction: 0.5,
            ..opts
        };
        assert!(grad_check(|g, v| Ok(g.relu(v[0])), &[x], &lenient).unwrap().pass);
    }

    #[test]
    fn smooth_functions_skip_nothing() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng);
        let report = grad_check(|g, v| Ok(g.tanh(v[0])), &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.pass);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = grad_check(
            |g, v| {
                let big = g.constant(Tensor::from_vec(vec![f64::INFINITY]));
                g.mul(v[0], big)
            },
            &[x],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(HseError::NonFinite(_))));
    }
}
