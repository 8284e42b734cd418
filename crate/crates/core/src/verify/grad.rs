//! Central-difference gradient checking over a flat coordinate vector.
//!
//! A probe evaluates the scalar loss at a point and also reports the
//! discrete decisions taken on the way (SGST routing, ReLU sign patterns).
//! A coordinate whose `±h` evaluations take a different decision than the
//! base point is not differentiable at step `h`; it is excluded from the
//! comparison and listed in the report instead.
//!
//! Errors are judged per named tensor, as the norm-wise relative error
//! `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over its checked coordinates. The
//! per-coordinate worst case is reported alongside for inspection.

use std::fmt;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Loss value plus the discrete state of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub routing: Vec<bool>,
    pub regime: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Exclusion {
    /// A token switches between the foreground and background branch.
    RoutingFragile,
    /// A ReLU input changes sign.
    Kink,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exclusion::RoutingFragile => "routing-fragile",
            Exclusion::Kink => "kink",
        })
    }
}

/// Contiguous run of coordinates sharing one tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

pub fn label(segments: &[Segment], mut i: usize) -> String {
    for s in segments {
        if i < s.len {
            return format!("{}[{i}]", s.name);
        }
        i -= s.len;
    }
    format!("#{i}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradOutcome {
    pub checked: usize,
    /// Largest coordinate-wise `|a − n|`.
    pub max_abs: f64,
    /// Largest tensor-wise relative error; this is what must stay below
    /// the tolerance.
    pub max_rel: f64,
    /// Tensor attaining `max_rel`.
    pub worst_tensor: Option<String>,
    /// Coordinate with the largest coordinate-wise relative error.
    pub worst: Option<Mismatch>,
    pub excluded: Vec<(String, Exclusion)>,
    /// First evaluation error, with the coordinate being perturbed.
    pub failure: Option<String>,
}

impl GradOutcome {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel < tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `probe` around `theta`.
pub fn check<F>(theta: &[f64], analytic: &[f64], segments: &[Segment], h: f64, probe: F) -> GradOutcome
where
    F: Fn(&[f64]) -> Result<Probe, String>,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let mut out = GradOutcome::default();
    let base = match probe(theta) {
        Ok(p) => p,
        Err(e) => {
            out.failure = Some(format!("at base point: {e}"));
            return out;
        }
    };
    if !base.loss.is_finite() {
        out.failure = Some("loss is not finite at the base point".into());
        return out;
    }
    // per segment: Σ(a−n)², Σa², Σn²
    let mut sums = vec![[0.0f64; 3]; segments.len() + 1];
    let segment_of = {
        let mut owner = Vec::with_capacity(theta.len());
        for (k, s) in segments.iter().enumerate() {
            owner.extend(std::iter::repeat_n(k, s.len));
        }
        owner.resize(theta.len(), segments.len());
        owner
    };
    let mut x = theta.to_vec();
    for i in 0..theta.len() {
        let mut eval = |v: f64| {
            x[i] = v;
            let r = probe(&x);
            x[i] = theta[i];
            r
        };
        let (plus, minus) = match (eval(theta[i] + h), eval(theta[i] - h)) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                out.failure = Some(format!("perturbing {}: {e}", label(segments, i)));
                return out;
            }
        };
        if plus.routing != base.routing || minus.routing != base.routing {
            out.excluded.push((label(segments, i), Exclusion::RoutingFragile));
            continue;
        }
        if plus.regime != base.regime || minus.regime != base.regime {
            out.excluded.push((label(segments, i), Exclusion::Kink));
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        if !numeric.is_finite() {
            out.failure = Some(format!("non-finite difference at {}", label(segments, i)));
            return out;
        }
        let a = analytic[i];
        let rel = rel_err(a, numeric);
        let acc = &mut sums[segment_of[i]];
        acc[0] += (a - numeric) * (a - numeric);
        acc[1] += a * a;
        acc[2] += numeric * numeric;
        out.checked += 1;
        out.max_abs = out.max_abs.max((a - numeric).abs());
        if out.worst.as_ref().is_none_or(|w| rel > w.rel) {
            out.worst = Some(Mismatch {
                coordinate: label(segments, i),
                analytic: a,
                numeric,
                rel,
            });
        }
    }
    for (k, [d, a, n]) in sums.iter().enumerate() {
        let rel = d.sqrt() / a.sqrt().max(n.sqrt()).max(REL_FLOOR);
        if rel > out.max_rel || out.worst_tensor.is_none() {
            out.max_rel = rel;
            out.worst_tensor = Some(segments.get(k).map_or("#".into(), |s| s.name.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(x: &[f64]) -> Result<Probe, String> {
        Ok(Probe {
            loss: x[0] * x[0] * x[1] + x[1].sin(),
            routing: vec![],
            regime: vec![],
        })
    }

    #[test]
    fn smooth_function_passes() {
        let t = [0.7, -0.3];
        let g = [2.0 * 0.7 * -0.3, 0.49 + (-0.3f64).cos()];
        let segs = [Segment { name: "x".into(), len: 2 }];
        let o = check(&t, &g, &segs, STEP, smooth);
        assert!(o.passed(REL_TOL), "{o:?}");
        assert_eq!(o.checked, 2);
    }

    #[test]
    fn wrong_gradient_fails_and_names_coordinate() {
        let t = [0.7, -0.3];
        let g = [2.0 * 0.7 * -0.3, 1.0];
        let segs = [Segment { name: "x".into(), len: 2 }];
        let o = check(&t, &g, &segs, STEP, smooth);
        assert!(!o.passed(REL_TOL));
        assert_eq!(o.worst.unwrap().coordinate, "x[1]");
        assert_eq!(o.worst_tensor.as_deref(), Some("x"));
    }

    #[test]
    fn tensor_error_is_norm_wise() {
        let lin = |x: &[f64]| {
            Ok(Probe {
                loss: 3.0 * x[0] + 1e-9 * x[1],
                routing: vec![],
                regime: vec![],
            })
        };
        let segs = [Segment { name: "w".into(), len: 2 }];
        // second coordinate off by 1% of a value far below the first
        let o = check(&[0.1, 0.2], &[3.0, 1.01e-9], &segs, STEP, lin);
        assert!(o.worst.as_ref().unwrap().rel > 1e-3);
        assert!(o.passed(REL_TOL), "{}", o.max_rel);
    }

    #[test]
    fn kink_within_step_is_excluded() {
        let relu = |x: &[f64]| {
            Ok(Probe {
                loss: x[0].max(0.0),
                routing: vec![],
                regime: vec![x[0] > 0.0],
            })
        };
        let segs = [Segment { name: "x".into(), len: 1 }];
        let o = check(&[1e-7], &[1.0], &segs, STEP, relu);
        assert_eq!(o.excluded, vec![("x[0]".to_string(), Exclusion::Kink)]);
        assert!(o.passed(REL_TOL));
    }

    #[test]
    fn probe_errors_are_reported_with_location() {
        let segs = [Segment { name: "w".into(), len: 1 }];
        let o = check(&[0.0], &[0.0], &segs, STEP, |x: &[f64]| {
            if x[0] > 0.0 {
                Err("overflow in matmul".into())
            } else {
                Ok(Probe { loss: 0.0, routing: vec![], regime: vec![] })
            }
        });
        assert!(o.failure.unwrap().contains("w[0]"));
    }
}
