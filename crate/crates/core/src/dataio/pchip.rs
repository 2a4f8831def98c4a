//! Shape-preserving piecewise cubic Hermite interpolation (Fritsch-Carlson
//! slopes). The interpolant passes through every sample and never overshoots
//! the local data range, which keeps sparse biological series free of
//! fabricated oscillations.

use super::DataError;

#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>, // node slopes
}

impl Pchip {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self, DataError> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(DataError::Data(format!(
                "interpolation needs >= 2 samples with matching lengths, got {} and {}",
                n,
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(DataError::Data(
                "interpolation samples must be finite".into(),
            ));
        }

        let mut h = Vec::with_capacity(n - 1);
        let mut delta = Vec::with_capacity(n - 1);
        for (xw, yw) in x.windows(2).zip(y.windows(2)) {
            let hi = xw[1] - xw[0];
            if hi <= 0.0 {
                return Err(DataError::Data(
                    "interpolation abscissae must be strictly increasing".into(),
                ));
            }
            h.push(hi);
            delta.push((yw[1] - yw[0]) / hi);
        }

        let mut d = vec![0.0; n];

        // Interior slopes: weighted harmonic mean, zero at local extrema.
        for k in 1..n - 1 {
            let (s1, s2) = (delta[k - 1], delta[k]);
            if s1 == 0.0 || s2 == 0.0 || s1.signum() != s2.signum() {
                d[k] = 0.0;
            } else {
                let (h1, h2) = (h[k - 1], h[k]);
                let w1 = 2.0 * h2 + h1;
                let w2 = h2 + 2.0 * h1;
                d[k] = (w1 + w2) / (w1 / s1 + w2 / s2);
            }
        }

        d[0] = endpoint_slope(h[0], delta[0], h.get(1).copied(), delta.get(1).copied());
        d[n - 1] = endpoint_slope(
            h[n - 2],
            delta[n - 2],
            if n >= 3 { Some(h[n - 3]) } else { None },
            if n >= 3 { Some(delta[n - 3]) } else { None },
        );

        Ok(Pchip {
            x: x.to_vec(),
            y: y.to_vec(),
            d,
        })
    }

    /// Evaluate inside the sample span; queries are clamped to the end
    /// segments.
    pub fn eval(&self, xq: f64) -> f64 {
        let n = self.x.len();
        let k = if xq <= self.x[0] {
            0
        } else if xq >= self.x[n - 1] {
            n - 2
        } else {
            self.x.partition_point(|&xi| xi <= xq).saturating_sub(1)
        };

        let h = self.x[k + 1] - self.x[k];
        let t = (xq - self.x[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;

        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;

        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }
}

/// One-sided three-point slope, clipped so the end segment stays monotone.
fn endpoint_slope(h0: f64, s0: f64, h1: Option<f64>, s1: Option<f64>) -> f64 {
    let (Some(h1), Some(s1)) = (h1, s1) else {
        return s0; // two samples: the secant
    };
    let mut d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d.signum() != s0.signum() {
        d = 0.0;
    } else if s0.signum() != s1.signum() && d.abs() > 3.0 * s0.abs() {
        d = 3.0 * s0;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_linear_data_exactly() {
        let x = [0.0, 1.0, 2.5, 4.0];
        let y: Vec<f64> = x.iter().map(|t| 2.0 * t).collect();
        let p = Pchip::new(&x, &y).unwrap();
        for q in [0.0, 0.3, 1.7, 2.5, 3.9, 4.0] {
            assert!((p.eval(q) - 2.0 * q).abs() <= 1e-12, "at {q}");
        }
    }

    #[test]
    fn constant_data_stays_constant() {
        let x = [0.0, 1.0, 2.0];
        let y = [5.0, 5.0, 5.0];
        let p = Pchip::new(&x, &y).unwrap();
        for q in [0.0, 0.5, 1.999, 2.0] {
            assert_eq!(p.eval(q), 5.0);
        }
    }

    #[test]
    fn passes_through_nodes() {
        let x = [0.0, 2.0, 3.0, 7.0, 11.0];
        let y = [1.0, -0.5, 4.0, 4.0, 2.0];
        let p = Pchip::new(&x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((p.eval(*xi) - yi).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Pchip::new(&[0.0], &[1.0]).is_err());
        assert!(Pchip::new(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(Pchip::new(&[0.0, f64::NAN], &[1.0, 2.0]).is_err());
        assert!(Pchip::new(&[0.0, 1.0], &[1.0, f64::INFINITY]).is_err());
    }

    proptest! {
        /// No overshoot: every evaluation inside the span stays within the
        /// global data range.
        #[test]
        fn stays_within_sample_range(
            ys in proptest::collection::vec(-100.0f64..100.0, 5..20),
            steps in proptest::collection::vec(0.1f64..5.0, 5..20),
        ) {
            let n = ys.len().min(steps.len());
            let ys = &ys[..n];
            let mut xs = vec![0.0];
            for s in &steps[..n - 1] {
                let last = *xs.last().unwrap();
                xs.push(last + s);
            }
            let p = Pchip::new(&xs, ys).unwrap();
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = xs[n - 1] - xs[0];
            for i in 0..=400 {
                let q = xs[0] + span * i as f64 / 400.0;
                let v = p.eval(q);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9,
                    "value {v} outside [{lo}, {hi}] at {q}");
            }
        }

        /// Monotone data yields a monotone interpolant.
        #[test]
        fn preserves_monotonicity(
            incs in proptest::collection::vec(0.0f64..10.0, 4..12),
        ) {
            let mut ys = vec![0.0];
            for d in &incs {
                let last = *ys.last().unwrap();
                ys.push(last + d);
            }
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
            let p = Pchip::new(&xs, &ys).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=300 {
                let q = xs[0] + (xs[xs.len() - 1] - xs[0]) * i as f64 / 300.0;
                let v = p.eval(q);
                prop_assert!(v >= prev - 1e-9);
                prev = v;
            }
        }
    }
}
