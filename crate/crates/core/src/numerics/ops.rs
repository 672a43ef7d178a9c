use super::{Scalar, Tensor2D};
use crate::error::{shape_err, Error, Result};

/// Default guard added to denominators in [`safe_divide`].
pub const DEFAULT_EPSILON: f64 = 1e-8;

fn finish<T: Scalar>(out: Tensor2D<T>, what: &str) -> Result<Tensor2D<T>> {
    out.ensure_finite(what)?;
    Ok(out)
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.rows() {
        return Err(shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Tensor2D::zeros(a.rows(), b.cols())?;
    accumulate_product(&mut out, a, b);
    finish(out, "matmul")
}

/// `out += a · b`, in place.
pub fn matmul_acc<T: Scalar>(
    out: &mut Tensor2D<T>,
    a: &Tensor2D<T>,
    b: &Tensor2D<T>,
) -> Result<()> {
    if a.cols() != b.rows() || out.shape() != (a.rows(), b.cols()) {
        return Err(shape_err(format!(
            "matmul_acc {}x{} += {}x{} by {}x{}",
            out.rows(),
            out.cols(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    accumulate_product(out, a, b);
    out.ensure_finite("matmul_acc")
}

fn accumulate_product<T: Scalar>(out: &mut Tensor2D<T>, a: &Tensor2D<T>, b: &Tensor2D<T>) {
    for r in 0..a.rows() {
        let a_row = a.row(r);
        let out_row = out.row_mut(r);
        for (k, &a_rk) in a_row.iter().enumerate() {
            if a_rk == T::zero() {
                continue;
            }
            for (o, &b_kc) in out_row.iter_mut().zip(b.row(k)) {
                *o += a_rk * b_kc;
            }
        }
    }
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.cols() {
        return Err(shape_err(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Tensor2D::zeros(a.rows(), b.rows())?;
    for r in 0..a.rows() {
        let a_row = a.row(r);
        let out_row = out.row_mut(r);
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(c));
        }
    }
    finish(out, "matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.rows() != b.rows() {
        return Err(shape_err(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Tensor2D::zeros(a.cols(), b.cols())?;
    for k in 0..a.rows() {
        let b_row = b.row(k);
        for (r, &a_kr) in a.row(k).iter().enumerate() {
            for (o, &b_kc) in out.row_mut(r).iter_mut().zip(b_row) {
                *o += a_kr * b_kc;
            }
        }
    }
    finish(out, "matmul_tn")
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn transpose<T: Scalar>(m: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    Tensor2D::from_fn(m.cols(), m.rows(), |r, c| m.get(c, r))
}

/// Softmax along each row, stabilized by subtracting the row maximum.
pub fn row_softmax<T: Scalar>(m: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let mut out = m.clone();
    row_softmax_in_place(&mut out);
    finish(out, "row_softmax")
}

pub(crate) fn row_softmax_in_place<T: Scalar>(m: &mut Tensor2D<T>) {
    for r in 0..m.rows() {
        softmax_slice(m.row_mut(r));
    }
}

pub(crate) fn softmax_slice<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out[i][j] = numerator[i][j] / (denominator[i][0] + epsilon)`.
pub fn safe_divide<T: Scalar>(
    numerator: &Tensor2D<T>,
    denominator: &Tensor2D<T>,
    epsilon: f64,
) -> Result<Tensor2D<T>> {
    check_divide(numerator, denominator, epsilon)?;
    safe_divide_in_place(numerator.clone(), denominator, epsilon)
}

/// [`safe_divide`] reusing the numerator's buffer for the result.
pub fn safe_divide_in_place<T: Scalar>(
    mut numerator: Tensor2D<T>,
    denominator: &Tensor2D<T>,
    epsilon: f64,
) -> Result<Tensor2D<T>> {
    check_divide(&numerator, denominator, epsilon)?;
    let eps = T::from_f64(epsilon);
    for r in 0..numerator.rows() {
        let d = denominator.get(r, 0) + eps;
        for v in numerator.row_mut(r) {
            *v = *v / d;
        }
    }
    finish(numerator, "safe_divide")
}

fn check_divide<T: Scalar>(
    numerator: &Tensor2D<T>,
    denominator: &Tensor2D<T>,
    epsilon: f64,
) -> Result<()> {
    if numerator.rows() != denominator.rows() || denominator.cols() != 1 {
        return Err(shape_err(format!(
            "safe_divide {}x{} by {}x{} (denominator must be a column)",
            numerator.rows(),
            numerator.cols(),
            denominator.rows(),
            denominator.cols()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Input(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    Ok(())
}

/// Column of per-row sums (`m · 1`).
pub fn row_sums<T: Scalar>(m: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let sums = (0..m.rows())
        .map(|r| m.row(r).iter().copied().sum())
        .collect();
    Tensor2D::from_vec(m.rows(), 1, sums)
}

/// Column of per-column sums (`mᵀ · 1`).
pub fn col_sums<T: Scalar>(m: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let mut sums = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (s, &v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    Tensor2D::from_vec(m.cols(), 1, sums)
}

pub fn add<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign<T: Scalar>(a: &mut Tensor2D<T>, b: &Tensor2D<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
    a.ensure_finite("add")
}

pub fn hadamard<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "hadamard {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (x, &y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x *= y;
    }
    finish(out, "hadamard")
}

pub fn scale<T: Scalar>(m: &Tensor2D<T>, factor: T) -> Result<Tensor2D<T>> {
    map(m, |v| v * factor)
}

/// Multiplies row `r` by `factors[r]` in place (`(f 1ᵀ) ⊙ m`).
pub fn scale_rows_in_place<T: Scalar>(m: &mut Tensor2D<T>, factors: &[T]) -> Result<()> {
    if factors.len() != m.rows() {
        return Err(shape_err(format!(
            "{} row factors for {} rows",
            factors.len(),
            m.rows()
        )));
    }
    for (r, &f) in factors.iter().enumerate() {
        for v in m.row_mut(r) {
            *v *= f;
        }
    }
    m.ensure_finite("scale_rows")
}

pub fn map<T: Scalar>(m: &Tensor2D<T>, f: impl Fn(T) -> T) -> Result<Tensor2D<T>> {
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        *v = f(*v);
    }
    finish(out, "map")
}

/// Element-wise exponential in place.
pub fn exp_in_place<T: Scalar>(m: &mut Tensor2D<T>) -> Result<()> {
    for v in m.as_mut_slice() {
        *v = v.exp();
    }
    m.ensure_finite("exp")
}

/// `max |a - b| / max |b|`, the norm-wise relative error of `a` against the
/// reference `b`. Falls back to the absolute error when `b` is all zeros.
pub fn max_relative_error<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs().as_f64()));
    let scale = b.max_abs().as_f64();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_ones() {
        let m = Tensor2D::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        let i2 = Tensor2D::identity(2).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let a = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ones = Tensor2D::ones(2, 1).unwrap();
        assert_eq!(
            matmul(&a, &ones).unwrap().to_rows(),
            vec![vec![3.0], vec![7.0]]
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor2D::<f64>::random_uniform(5, 7, -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor2D::<f64>::random_uniform(7, 3, -1.0, 1.0, &mut rng).unwrap();
        let expected = naive(&a.to_rows(), &b.to_rows());
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.to_rows().iter().zip(&expected) {
            for (x, y) in g.iter().zip(e) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        // Transposed variants agree with the explicit transpose.
        let bt = transpose(&b).unwrap();
        assert!(max_relative_error(&matmul_nt(&a, &bt).unwrap(), &got).unwrap() < 1e-15);
        let at = transpose(&a).unwrap();
        assert!(max_relative_error(&matmul_tn(&at, &b).unwrap(), &got).unwrap() < 1e-15);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor2D::<f64>::zeros(2, 3).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        assert!(matches!(
            matmul_tn(&a, &transpose(&a).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let m = Tensor2D::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(row_softmax(&m).unwrap().to_rows(), vec![vec![0.5, 0.5]]);

        let single = Tensor2D::from_rows(&[vec![-37.5], vec![1e4]]).unwrap();
        assert_eq!(
            row_softmax(&single).unwrap().to_rows(),
            vec![vec![1.0], vec![1.0]]
        );

        let m = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let got = row_softmax(&m).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (c, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((got.get(0, c) - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let m = Tensor2D::<f32>::from_rows(&[vec![1000.0, 999.0, -1000.0]]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert!(s.is_finite());
        assert!((s.as_slice().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn safe_divide_examples() {
        let num = Tensor2D::full(3, 2, 2.0).unwrap();
        let den = Tensor2D::ones(3, 1).unwrap();
        assert_eq!(safe_divide(&num, &den, 0.0).unwrap(), num);

        let den = Tensor2D::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let num = Tensor2D::from_rows(&[vec![2.0, 2.0, 2.0], vec![3.0, 3.0, 3.0]]).unwrap();
        assert_eq!(
            safe_divide(&num, &den, 0.0).unwrap(),
            Tensor2D::ones(2, 3).unwrap()
        );
    }

    #[test]
    fn safe_divide_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let num = Tensor2D::<f64>::random_uniform(6, 4, -3.0, 3.0, &mut rng).unwrap();
        let den = Tensor2D::<f64>::random_uniform(6, 1, 0.1, 2.0, &mut rng).unwrap();
        let got = safe_divide(&num, &den, 1e-8).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let expected = num.get(i, j) / (den.get(i, 0) + 1e-8);
                assert_eq!(got.get(i, j), expected);
            }
        }
    }

    #[test]
    fn safe_divide_errors() {
        let num = Tensor2D::<f64>::ones(3, 2).unwrap();
        let den = Tensor2D::<f64>::ones(2, 1).unwrap();
        assert!(matches!(safe_divide(&num, &den, 0.0), Err(Error::Shape(_))));
        let den = Tensor2D::<f64>::zeros(3, 1).unwrap();
        assert!(matches!(
            safe_divide(&num, &den, 0.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            safe_divide(&num, &Tensor2D::ones(3, 1).unwrap(), -1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn row_and_col_sums() {
        let m = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(row_sums(&m).unwrap().to_rows(), vec![vec![3.0], vec![7.0]]);
        assert_eq!(col_sums(&m).unwrap().to_rows(), vec![vec![4.0], vec![6.0]]);
    }
}
