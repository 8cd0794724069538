//! Bounded one-dimensional minimization (Brent's method: golden-section with
//! parabolic interpolation).

/// Minimize `f` on `[a, b]` to absolute tolerance `tol` in the argument.
/// Returns `(x_min, f(x_min))`.
pub fn minimize<F>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    const GOLD: f64 = 0.381_966_011_250_105_1; // 2 - phi
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let tol = tol.abs().max(1e-15);
    let eps = f64::EPSILON.sqrt();

    let mut x = a + GOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d = 0.0f64;
    let mut e = 0.0f64;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = eps * x.abs() + tol;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }

        let mut take_golden = true;
        if e.abs() > tol1 {
            // parabolic fit through (v, fv), (w, fw), (x, fx)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if m > x { tol1 } else { -tol1 };
                }
                take_golden = false;
            }
        }
        if take_golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }

        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);

        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let (x, fx) = minimize(|x| (x - 1.3).powi(2) + 2.0, -10.0, 10.0, 1e-10, 200);
        assert!((x - 1.3).abs() < 1e-8, "{x}");
        assert!((fx - 2.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_function() {
        // minimum of x^4 - 2x^2 + x on [-2, 0] is near x = -1.1072
        let (x, _) = minimize(|x| x.powi(4) - 2.0 * x.powi(2) + x, -2.0, 0.0, 1e-10, 200);
        let f = |x: f64| x.powi(4) - 2.0 * x.powi(2) + x;
        assert!(f(x) <= f(x + 1e-6) && f(x) <= f(x - 1e-6));
        assert!((x + 1.1072).abs() < 1e-3, "{x}");
    }

    #[test]
    fn boundary_minimum() {
        let (x, _) = minimize(|x| x, 0.0, 5.0, 1e-10, 200);
        assert!(x < 1e-6, "{x}");
    }
}
