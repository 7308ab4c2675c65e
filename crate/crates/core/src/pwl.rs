//! Minimisation of a maximum of affine functions of one variable.

/// Line `slope * t + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Line {
    pub slope: f64,
    pub intercept: f64,
}

impl Line {
    pub fn new(slope: f64, intercept: f64) -> Self {
        Self { slope, intercept }
    }

    fn at(&self, t: f64) -> f64 {
        self.slope * t + self.intercept
    }
}

/// Evaluates `max_k line_k(t)`.
pub(crate) fn envelope_at(lines: &[Line], t: f64) -> f64 {
    lines.iter().map(|l| l.at(t)).fold(f64::NEG_INFINITY, f64::max)
}

/// Returns `(t*, value)` minimising `max_k line_k(t)` over `[lo, hi]`.
///
/// The upper envelope is built exactly (slopes sorted, dominated lines
/// discarded), and the minimiser is the breakpoint where the envelope slope
/// turns nonnegative. On a flat minimum the leftmost point is returned. The
/// value is re-evaluated over all lines at `t*`.
pub(crate) fn minimize_max(lines: &[Line], lo: f64, hi: f64) -> (f64, f64) {
    assert!(!lines.is_empty() && lo <= hi);
    let mut sorted: Vec<Line> = lines.to_vec();
    sorted.sort_by(|a, b| a.slope.total_cmp(&b.slope).then(b.intercept.total_cmp(&a.intercept)));
    sorted.dedup_by(|later, first| later.slope == first.slope);

    // hull[k] is active to the right of breaks[k - 1].
    let mut hull: Vec<Line> = Vec::with_capacity(sorted.len());
    for l in sorted {
        while hull.len() >= 2 {
            let l1 = hull[hull.len() - 2];
            let l2 = hull[hull.len() - 1];
            if cross(&l1, &l) <= cross(&l1, &l2) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(l);
    }

    let t = match hull.iter().position(|l| l.slope >= 0.0) {
        Some(0) => f64::NEG_INFINITY,
        Some(k) => cross(&hull[k - 1], &hull[k]),
        None => f64::INFINITY,
    };
    let t = t.clamp(lo, hi);
    (t, envelope_at(lines, t))
}

/// Abscissa where `a` and `b` meet; requires `a.slope < b.slope`.
fn cross(a: &Line, b: &Line) -> f64 {
    (a.intercept - b.intercept) / (b.slope - a.slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(lines: &[Line], lo: f64, hi: f64) -> f64 {
        (0..=20000)
            .map(|k| lo + (hi - lo) * k as f64 / 20000.0)
            .map(|t| envelope_at(lines, t))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn abs_value() {
        let lines = [Line::new(1.0, -2.0), Line::new(-1.0, 2.0)];
        let (t, v) = minimize_max(&lines, -10.0, 10.0);
        assert!((t - 2.0).abs() < 1e-12 && v.abs() < 1e-12);
    }

    #[test]
    fn clamps_to_interval() {
        let lines = [Line::new(1.0, 0.0)];
        assert_eq!(minimize_max(&lines, 3.0, 5.0), (3.0, 3.0));
        let lines = [Line::new(-2.0, 1.0)];
        assert_eq!(minimize_max(&lines, 0.0, 4.0), (4.0, -7.0));
    }

    #[test]
    fn flat_minimum_takes_left_end() {
        let lines = [Line::new(-1.0, 0.0), Line::new(0.0, 1.0), Line::new(1.0, -5.0)];
        let (t, v) = minimize_max(&lines, -100.0, 100.0);
        assert!((t + 1.0).abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn agrees_with_sampling() {
        let lines = [
            Line::new(-3.0, 1.0),
            Line::new(-0.5, 2.0),
            Line::new(0.2, 1.5),
            Line::new(0.2, 0.5),
            Line::new(2.0, -4.0),
            Line::new(-0.5, -1.0),
        ];
        let (_, v) = minimize_max(&lines, -5.0, 5.0);
        assert!((v - brute(&lines, -5.0, 5.0)).abs() < 1e-3);
        assert!(v <= brute(&lines, -5.0, 5.0) + 1e-12);
    }
}
