//! Principal component analysis on z-scored features.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::LearningError;

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.95;

/// A fitted projection. Columns with zero training spread are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// Width of the input rows.
    pub n_features: usize,
    /// Indices of input columns that take part, ascending.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `k` rows of length `kept.len()`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the kept components (z-space variance along each).
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Total z-space variance, i.e. the covariance trace.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dropped(&self) -> Vec<usize> {
        (0..self.n_features).filter(|c| self.kept.binary_search(c).is_err()).collect()
    }

    pub fn cumulative_explained(&self) -> f64 {
        self.explained_ratio.iter().sum()
    }

    pub fn standardize(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.n_features, "row width");
        self.kept.iter().zip(self.mean.iter().zip(&self.scale)).map(|(&c, (m, s))| (row[c] - m) / s).collect()
    }

    pub fn project_z(&self, z: &[f64]) -> Vec<f64> {
        self.components.iter().map(|v| v.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    /// Standardized reconstruction of a projected point.
    pub fn back_project(&self, scores: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.kept.len()];
        for (v, s) in self.components.iter().zip(scores) {
            for (zi, vi) in z.iter_mut().zip(v) {
                *zi += s * vi;
            }
        }
        z
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        self.project_z(&self.standardize(row))
    }
}

/// Fits PCA keeping the fewest components whose cumulative explained variance
/// reaches `target`.
///
/// Columns are z-scored with the training mean and sample standard deviation.
/// When there are more columns than rows the eigenproblem is solved on the
/// `n × n` Gram matrix instead of the covariance.
pub fn fit_pca(x: &[Vec<f64>], target: f64) -> Result<PcaModel, LearningError> {
    let n = x.len();
    if n < 2 {
        return Err(LearningError::DegenerateData(format!("{n} rows")));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(LearningError::InvalidConfig(format!("variance target {target}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(LearningError::DimensionMismatch { expected: d, got: x.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d) });
    }
    let (mut kept, mut mean, mut scale) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..d {
        let m = x.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = x.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s = var.sqrt();
        if s > 1e-12 * m.abs().max(1.0) {
            kept.push(c);
            mean.push(m);
            scale.push(s);
        }
    }
    let p = kept.len();
    if p == 0 {
        return Err(LearningError::DegenerateData("every column is constant".into()));
    }
    let z = DMatrix::from_fn(n, p, |i, j| (x[i][kept[j]] - mean[j]) / scale[j]);
    let denom = (n - 1) as f64;

    // (eigenvalue, unit eigenvector in z-space), descending
    let mut pairs: Vec<(f64, Vec<f64>)> = if p <= n {
        let cov = z.transpose() * &z / denom;
        let eig = SymmetricEigen::new(cov);
        (0..p).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect())).collect()
    } else {
        let gram = &z * z.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-12 * top)
            .map(|i| {
                let lambda = eig.eigenvalues[i];
                let v = z.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                (lambda, v.iter().map(|a| a / norm).collect())
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total: f64 = (0..p).map(|j| z.column(j).norm_squared() / denom).sum();

    let mut model = PcaModel {
        n_features: d,
        kept,
        mean,
        scale,
        components: Vec::new(),
        eigenvalues: Vec::new(),
        explained_ratio: Vec::new(),
        total_variance: total,
    };
    let mut cum = 0.0;
    for (lambda, mut v) in pairs {
        if cum >= target {
            break;
        }
        // sign convention: largest-magnitude entry positive
        let big = v.iter().enumerate().fold(0, |b, (i, a)| if a.abs() > v[b].abs() { i } else { b });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        let ratio = lambda.max(0.0) / total;
        cum += ratio;
        model.components.push(v);
        model.eigenvalues.push(lambda);
        model.explained_ratio.push(ratio);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn line_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let t: f64 = rng.random_range(-5.0..5.0);
                vec![t, 2.0 * t + rng.random_range(-1e-3..1e-3)]
            })
            .collect();
        let m = fit_pca(&x, 0.95).unwrap();
        assert_eq!(m.k(), 1);
        assert!(m.explained_ratio[0] >= 0.999);
    }

    #[test]
    fn isotropic_needs_every_axis() {
        let x = gaussian(400, 3, 5);
        let m = fit_pca(&x, 0.95).unwrap();
        assert_eq!(m.k(), 3);
        // eigenvalues agree with an independent decomposition of the correlation matrix
        let z = DMatrix::from_fn(400, 3, |i, j| (x[i][j] - m.mean[j]) / m.scale[j]);
        let oracle = SymmetricEigen::new(z.transpose() * &z / 399.0);
        let mut ev: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ev.iter().zip(&m.eigenvalues) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_pca(&[vec![1.0, 2.0]], 0.95), Err(LearningError::DegenerateData(_))));
        assert!(matches!(fit_pca(&[vec![1.0], vec![1.0]], 0.95), Err(LearningError::DegenerateData(_))));
    }

    fn check_identities(x: &[Vec<f64>], m: &PcaModel) {
        for (a, va) in m.components.iter().enumerate() {
            for (b, vb) in m.components.iter().enumerate() {
                let dot: f64 = va.iter().zip(vb).map(|(p, q)| p * q).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "<v{a}, v{b}> = {dot}");
            }
        }
        assert!(m.cumulative_explained() >= 0.95);
        let n = x.len() as f64;
        let mut sse = 0.0;
        for row in x {
            let z = m.standardize(row);
            let s = m.project_z(&z);
            let r = m.back_project(&s);
            sse += z.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let again = m.back_project(&m.project_z(&r));
            for (p, q) in r.iter().zip(&again) {
                assert!((p - q).abs() < 1e-9);
            }
        }
        let discarded = m.total_variance - m.eigenvalues.iter().sum::<f64>();
        let got = sse / (n - 1.0);
        assert!((got - discarded).abs() <= 1e-6 * m.total_variance, "{got} vs {discarded}");
    }

    #[test]
    fn identities_tall_and_wide() {
        // correlated tall data
        let base = gaussian(120, 4, 9);
        let tall: Vec<Vec<f64>> =
            base.iter().map(|r| vec![r[0], r[0] + 0.3 * r[1], r[1] - r[2], 5.0 * r[3], r[0] - r[3], 7.0]).collect();
        let m = fit_pca(&tall, 0.95).unwrap();
        assert_eq!(m.dropped(), vec![5]);
        check_identities(&tall, &m);
        // wide: more columns than rows exercises the Gram path
        let wide = gaussian(20, 60, 4);
        let m = fit_pca(&wide, 0.95).unwrap();
        assert!(m.k() < 20);
        check_identities(&wide, &m);
    }
}
