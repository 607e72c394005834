//! Small derivative-free numerical kernels: golden-section search, damped
//! Newton for low-dimensional smooth convex objectives, dense linear solves,
//! and an RK4 integrator with step doubling.

use crate::scalar::Scalar;

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`; the endpoints are included as candidates.
pub fn golden_section<T: Scalar>(mut f: impl FnMut(T) -> T, lo: T, hi: T, tol: T, max_iter: usize) -> (T, T) {
    let inv_phi = T::lit(0.618_033_988_749_894_8);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= tol * (T::one() + a.abs() + b.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for x in [lo, hi] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}

/// Solves `a·x = b` in place (row-major `n×n`), partial pivoting.
/// Returns `None` for a numerically singular matrix.
pub fn solve_dense<T: Scalar>(a: &mut [T], b: &mut [T]) -> Option<()> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if !(a[pivot * n + col].abs() > T::epsilon()) {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] = a[row * n + k] - factor * a[col * n + k];
            }
            b[row] = b[row] - factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s = s - a[col * n + k] * b[k];
        }
        b[col] = s / a[col * n + col];
    }
    Some(())
}

/// Central-difference gradient.
pub fn fd_gradient<T: Scalar>(f: &mut impl FnMut(&[T]) -> T, x: &[T], rel_step: T) -> Vec<T> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * (T::one() + x[i].abs());
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (T::two() * h)
        })
        .collect()
}

fn fd_hessian<T: Scalar>(f: &mut impl FnMut(&[T]) -> T, x: &[T], fx: T, rel_step: T) -> Vec<T> {
    let n = x.len();
    let h: Vec<T> = x.iter().map(|v| rel_step * (T::one() + v.abs())).collect();
    let mut hess = vec![T::zero(); n * n];
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[i * n + i] = (fp - T::two() * fx + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: T, sj: T| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let one = T::one();
            let v = (eval(one, one) - eval(one, -one) - eval(-one, one) + eval(-one, -one))
                / (T::lit(4.0) * h[i] * h[j]);
            hess[i * n + j] = v;
            hess[j * n + i] = v;
        }
    }
    hess
}

/// Outcome of [`newton_minimize`].
#[derive(Debug, Clone)]
pub struct NewtonResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton with finite-difference derivatives and backtracking.
/// Falls back to a gradient step whenever the Newton direction is not a
/// descent direction. Intended for dimensions of at most a handful.
pub fn newton_minimize<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x0: &[T],
    max_iter: usize,
) -> NewtonResult<T> {
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let grad_step = T::lit(1e-6);
    let hess_step = T::lit(1e-4);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let g = fd_gradient(&mut f, &x, grad_step);
        let gnorm = g.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !(gnorm > T::lit(1e-13) * (T::one() + fx.abs())) {
            converged = true;
            break;
        }
        let mut hess = fd_hessian(&mut f, &x, fx, hess_step);
        let mut dir: Vec<T> = g.iter().map(|v| -*v).collect();
        let newton_ok = solve_dense(&mut hess, &mut dir).is_some()
            && dir.iter().zip(&g).map(|(d, gi)| *d * *gi).sum::<T>() < T::zero()
            && dir.iter().all(|d| d.is_finite());
        if !newton_ok {
            dir = g.iter().map(|v| -*v / gnorm).collect();
        }
        let mut t = T::one();
        let mut improved = false;
        let mut trial = x.clone();
        for _ in 0..80 {
            for (k, xi) in trial.iter_mut().enumerate() {
                *xi = x[k] + t * dir[k];
            }
            let ft = f(&trial);
            if ft < fx {
                let gain = fx - ft;
                x.clone_from(&trial);
                fx = ft;
                improved = true;
                if gain <= T::lit(1e-16) * (T::one() + fx.abs()) {
                    converged = true;
                }
                break;
            }
            t = t * T::half();
        }
        if !improved || converged {
            converged = true;
            break;
        }
    }
    NewtonResult { x, value: fx, iterations, converged }
}

/// Integrates `y' = rhs(x, y)` from `x0` to `x1` with classical RK4, doubling
/// the number of substeps until two successive results agree to
/// `tol·(1 + |y|)`. Returns the Richardson-extrapolated endpoint value.
pub fn rk4_adaptive<T: Scalar, E>(
    mut rhs: impl FnMut(T, T) -> Result<T, E>,
    x0: T,
    x1: T,
    y0: T,
    tol: T,
    initial_steps: usize,
    max_doublings: usize,
) -> Result<Option<T>, E> {
    let mut run = |steps: usize| -> Result<T, E> {
        let h = (x1 - x0) / T::from_usize_lossy(steps);
        let mut y = y0;
        let mut x = x0;
        let two = T::two();
        let six = T::lit(6.0);
        for _ in 0..steps {
            let k1 = rhs(x, y)?;
            let k2 = rhs(x + h / two, y + h * k1 / two)?;
            let k3 = rhs(x + h / two, y + h * k2 / two)?;
            let k4 = rhs(x + h, y + h * k3)?;
            y = y + h * (k1 + two * k2 + two * k3 + k4) / six;
            x = x + h;
        }
        Ok(y)
    };
    if x1 == x0 {
        return Ok(Some(y0));
    }
    let mut steps = initial_steps.max(1);
    let mut coarse = run(steps)?;
    for _ in 0..max_doublings {
        steps *= 2;
        let fine = run(steps)?;
        if !fine.is_finite() {
            return Ok(None);
        }
        let diff = fine - coarse;
        if diff.abs() <= tol * (T::one() + fine.abs()) {
            return Ok(Some(fine + diff / T::lit(15.0)));
        }
        coarse = fine;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, fx) = golden_section(|x: f64| (x - 1.3).powi(2) + 2.0, -5.0, 5.0, 1e-12, 200);
        assert!((x - 1.3).abs() < 1e-7);
        assert!((fx - 2.0).abs() < 1e-15);
    }

    #[test]
    fn golden_section_reports_boundary_minimum() {
        let (x, _) = golden_section(|x: f64| x, 0.0, 1.0, 1e-12, 200);
        assert_eq!(x, 0.0);
    }

    #[test]
    fn dense_solve_small_system() {
        let mut a = vec![2.0_f64, 1.0, 1.0, 3.0];
        let mut b = vec![3.0, 5.0];
        solve_dense(&mut a, &mut b).unwrap();
        assert!((b[0] - 0.8).abs() < 1e-14 && (b[1] - 1.4).abs() < 1e-14);
        let mut s = vec![1.0, 2.0, 2.0, 4.0];
        assert!(solve_dense(&mut s, &mut [1.0, 1.0]).is_none());
    }

    #[test]
    fn newton_minimizes_smooth_convex_function() {
        let f = |x: &[f64]| (x[0] - 1.0).exp() - x[0] + (x[1] + 0.5).powi(2) + 0.1 * x[0] * x[1];
        let r = newton_minimize(f, &[0.0, 0.0], 100);
        assert!(r.converged);
        let g = fd_gradient(&mut |x: &[f64]| f(x), &r.x, 1e-6);
        assert!(g.iter().all(|v| v.abs() < 1e-7), "{g:?}");
    }

    #[test]
    fn rk4_solves_linear_ode() {
        let y = rk4_adaptive(|_x: f64, y: f64| Ok::<_, ()>(-2.0 * y), 0.0, 1.0, 1.0, 1e-14, 4, 20)
            .unwrap()
            .unwrap();
        assert!((y - (-2.0_f64).exp()).abs() < 1e-13);
    }
}
