//! Dense spectral primitives used by detection and aggregation.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! `nalgebra::DMatrix<f64>`; the decomposition itself is delegated to
//! nalgebra's bidiagonalisation-based SVD, which returns singular values in
//! descending order.

use nalgebra::{DMatrix, DVector};

use crate::error::{HorusError, Result};

/// Singular values of one matrix, sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    /// Builds a spectrum from arbitrary non-negative values; they are sorted
    /// descending. Negative or non-finite values are rejected.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(HorusError::InvalidInput("empty spectrum".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HorusError::InvalidInput(
                "singular values must be finite and non-negative".into(),
            ));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Spectrum { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of retained values, `min(rows, cols)` of the source matrix.
    pub fn nominal_rank(&self) -> usize {
        self.values.len()
    }

    fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Thin SVD `m = U diag(s) Vᵀ` with `t = min(p, q)` retained triplets.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// p × t, orthonormal columns.
    pub left: DMatrix<f64>,
    pub spectrum: Spectrum,
    /// q × t, orthonormal columns.
    pub right: DMatrix<f64>,
}

fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(HorusError::InvalidInput(format!(
            "matrix must be non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(HorusError::InvalidInput(
            "matrix contains non-finite entries".into(),
        ));
    }
    Ok(())
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    ensure_finite(m)?;
    let svd = m.clone().svd(true, true);
    let left = svd
        .u
        .ok_or_else(|| HorusError::Invariant("svd did not produce U".into()))?;
    let right = svd
        .v_t
        .ok_or_else(|| HorusError::Invariant("svd did not produce Vᵀ".into()))?
        .transpose();
    let spectrum = Spectrum::new(svd.singular_values.iter().map(|s| s.max(0.0)).collect())?;
    Ok(ThinSvd {
        left,
        spectrum,
        right,
    })
}

/// Singular values only.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Spectrum> {
    ensure_finite(m)?;
    let values = m.clone().svd(false, false).singular_values;
    Spectrum::new(values.iter().map(|s| s.max(0.0)).collect())
}

/// Shannon entropy (natural log) of the normalised singular-value mass.
/// An all-zero spectrum has entropy 0.
pub fn spectral_entropy(s: &Spectrum) -> f64 {
    let total = s.total();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = s
        .values()
        .iter()
        .map(|v| v / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    // Rounding can push a uniform spectrum a hair past ln(t).
    h.clamp(0.0, (s.nominal_rank() as f64).ln())
}

/// Fraction of singular-value mass carried by the `k` largest values.
/// `k` is clamped to `[1, nominal_rank]`; an all-zero spectrum yields 1.
pub fn topk_energy_ratio(s: &Spectrum, k: usize) -> f64 {
    let total = s.total();
    if total <= 0.0 {
        return 1.0;
    }
    let k = k.clamp(1, s.nominal_rank());
    if k == s.nominal_rank() {
        return 1.0;
    }
    let head: f64 = s.values()[..k].iter().sum();
    (head / total).clamp(0.0, 1.0)
}

/// Dominant right singular vector, sign-canonicalised so the entry of
/// largest magnitude is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub vector: DVector<f64>,
    /// Set when the source matrix is identically zero; `vector` is then e₁.
    pub degenerate: bool,
}

pub fn first_right_singular_vector(m: &DMatrix<f64>) -> Result<Direction> {
    ensure_finite(m)?;
    if m.iter().all(|v| *v == 0.0) {
        let mut e1 = DVector::zeros(m.ncols());
        e1[0] = 1.0;
        return Ok(Direction {
            vector: e1,
            degenerate: true,
        });
    }
    let svd = thin_svd(m)?;
    let mut v: DVector<f64> = svd.right.column(0).into_owned();
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    canonicalize_sign(&mut v);
    Ok(Direction {
        vector: v,
        degenerate: false,
    })
}

fn canonicalize_sign(v: &mut DVector<f64>) {
    let mut pivot = 0.0_f64;
    for x in v.iter() {
        if x.abs() > pivot.abs() {
            pivot = *x;
        }
    }
    if pivot < 0.0 {
        v.neg_mut();
    }
}

/// Linear-interpolation percentile on the ascending sort, rank `(n-1)·p/100`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(HorusError::InvalidInput("percentile of empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(HorusError::InvalidInput(format!(
            "percentile {p} outside [0, 100]"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(HorusError::InvalidInput("percentile of NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Standard normal quantile via Acklam's rational approximation
/// (relative error below 1.2e-9 over the open unit interval).
pub fn inverse_normal_cdf(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(HorusError::InvalidInput(format!(
            "quantile {q} outside (0, 1)"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let tail = |p: f64| {
        let t = (-2.0 * p.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    };

    // Evaluate on the lower half and reflect, so q and 1-q negate exactly.
    let (p, sign) = if q > 0.5 { (1.0 - q, -1.0) } else { (q, 1.0) };
    let x = if p < P_LOW {
        tail(p)
    } else {
        let u = p - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    Ok(sign * x)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(v: &[f64]) -> Spectrum {
        Spectrum::new(v.to_vec()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, p: usize, q: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svd_of_identity_and_diagonal() {
        let s = thin_svd(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.spectrum.values().len(), 3);
        for v in s.spectrum.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let s = thin_svd(&d).unwrap();
        assert!((s.spectrum.values()[0] - 3.0).abs() < 1e-12);
        assert!((s.spectrum.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (p, q) in [(5, 7), (7, 5), (8, 64), (1, 4), (4, 1)] {
            let m = random_matrix(&mut rng, p, q);
            let s = thin_svd(&m).unwrap();
            let t = p.min(q);
            assert_eq!(s.left.shape(), (p, t));
            assert_eq!(s.right.shape(), (q, t));
            let sigma = DMatrix::from_diagonal(&DVector::from_vec(s.spectrum.values().to_vec()));
            let recon = &s.left * sigma * s.right.transpose();
            let err = (recon - &m).norm();
            assert!(err <= 1e-8 * m.norm().max(1.0), "err {err}");
            let ortho_u = (s.left.transpose() * &s.left - DMatrix::identity(t, t)).norm();
            let ortho_v = (s.right.transpose() * &s.right - DMatrix::identity(t, t)).norm();
            assert!(ortho_u <= 1e-8 && ortho_v <= 1e-8);
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = DMatrix::<f64>::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&m), Err(HorusError::InvalidInput(_))));
        m[(0, 1)] = f64::INFINITY;
        assert!(first_right_singular_vector(&m).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((spectral_entropy(&spec(&[1.0, 1.0, 1.0, 1.0])) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(spectral_entropy(&spec(&[5.0, 0.0, 0.0, 0.0])), 0.0);
        let expected = -0.75f64 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        assert!((spectral_entropy(&spec(&[3.0, 1.0, 0.0, 0.0])) - expected).abs() < 1e-15);
        assert_eq!(spectral_entropy(&spec(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_energy_ratio(&spec(&[3.0, 1.0, 0.0, 0.0]), 4), 1.0);
        assert_eq!(topk_energy_ratio(&spec(&[1.0, 1.0, 1.0, 1.0]), 1), 0.25);
        assert_eq!(topk_energy_ratio(&spec(&[3.0, 1.0, 0.0, 0.0]), 1), 0.75);
        assert_eq!(topk_energy_ratio(&spec(&[3.0, 1.0]), 9), 1.0);
        assert_eq!(topk_energy_ratio(&spec(&[0.0, 0.0, 0.0]), 1), 1.0);
    }

    #[test]
    fn first_right_vector_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let v = first_right_singular_vector(&d).unwrap();
        assert!((v.vector[0] - 1.0).abs() < 1e-12 && v.vector[1].abs() < 1e-12);

        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let w = DVector::from_vec(vec![0.3, -4.0, 1.0, 2.0]);
        let m = &u * w.transpose();
        let v = first_right_singular_vector(&m).unwrap();
        let wn = w.normalize();
        assert!((v.vector.dot(&wn).abs() - 1.0).abs() < 1e-12);
        // largest-magnitude entry is -4/‖w‖ in w, so canonical v is -w/‖w‖
        assert!(v.vector[1] > 0.0);

        let z = first_right_singular_vector(&DMatrix::zeros(3, 4)).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.vector[0], 1.0);
    }

    #[test]
    fn percentile_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        // rank = 3 * 0.95 = 2.85 → 0.3 + 0.85 * (0.9 - 0.3)
        let p = percentile(&[0.9, 0.1, 0.3, 0.2], 95.0).unwrap();
        assert!((p - 0.81).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    #[test]
    fn inverse_normal_basic() {
        assert_eq!(inverse_normal_cdf(0.5).unwrap(), 0.0);
        for q in [0.001, 0.02, 0.125, 0.3, 0.49] {
            let a = inverse_normal_cdf(q).unwrap();
            let b = inverse_normal_cdf(1.0 - q).unwrap();
            assert!((a + b).abs() < 1e-9, "{q}: {a} {b}");
        }
        for q in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(inverse_normal_cdf(q).is_err());
        }
    }

    #[test]
    fn mean_std_population_form() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
