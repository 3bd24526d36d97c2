// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::linalg::{dot, mean_vector, normalized, symmetric_eigen};

fn check_dims(vectors: &[Vec<f64>], dim: usize) -> Result<()> {
    match vectors.iter().find(|v| v.len() != dim) {
        Some(v) => Err(Error::DimensionMismatch {
            expected: dim,
            actual: v.len(),
        }),
        None => Ok(()),
    }
}

/// `mean(pos) − mean(neg)`, un-normalized.
pub fn estimate_mean_difference(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "mean difference needs non-empty positive and negative sets".into(),
        ));
    }
    let dim = pos[0].len();
    check_dims(pos, dim)?;
    check_dims(neg, dim)?;
    let mp = mean_vector(pos)?;
    let mn = mean_vector(neg)?;
    Ok(mp.iter().zip(&mn).map(|(a, b)| a - b).collect())
}

/// First principal component of the mean-centered pair differences
/// `pos[i] − neg[i]`, as a unit vector.
///
/// Sign: the mean difference projects non-negatively; if it is orthogonal,
/// the positive-class mean does; failing that, the first non-zero component
/// is positive. When every difference is identical (zero centered variance)
/// the normalized mean difference is returned.
pub fn estimate_pca(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pos.len() != neg.len() {
        return Err(Error::InvalidArgument(format!(
            "PCA needs paired data: {} positives vs {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    if pos.len() < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 pairs".into()));
    }
    let dim = pos[0].len();
    check_dims(pos, dim)?;
    check_dims(neg, dim)?;

    let diffs: Vec<Vec<f64>> = pos
        .iter()
        .zip(neg)
        .map(|(p, n)| p.iter().zip(n).map(|(a, b)| a - b).collect())
        .collect();
    let mean_diff = mean_vector(&diffs)?;
    let energy = diffs.iter().map(|d| dot(d, d)).sum::<f64>() / diffs.len() as f64;
    if energy == 0.0 {
        return Err(Error::DegenerateData(
            "all positive/negative differences are zero".into(),
        ));
    }

    let n = diffs.len() as f64;
    let mut cov = vec![0.0; dim * dim];
    for d in &diffs {
        let c: Vec<f64> = d.iter().zip(&mean_diff).map(|(a, m)| a - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i * dim + j] = cov[j * dim + i];
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, dim);
    let mut component = if values[0] <= 1e-20 * energy {
        normalized(&mean_diff).ok_or_else(|| {
            Error::DegenerateData("differences have neither spread nor mean".into())
        })?
    } else {
        normalized(&vectors[0]).expect("eigenvectors are unit length")
    };

    let scale = energy.sqrt();
    let along_diff = dot(&mean_diff, &component);
    let flip = if along_diff.abs() > 1e-12 * scale {
        along_diff < 0.0
    } else {
        let pos_mean = mean_vector(pos)?;
        let along_pos = dot(&pos_mean, &component);
        if along_pos.abs() > 1e-12 * scale {
            along_pos < 0.0
        } else {
            component.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0)
        }
    };
    if flip {
        component.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(component)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_difference_examples() {
        let same = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(estimate_mean_difference(&same, &same).unwrap(), vec![0.0, 0.0]);

        let pos = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        let neg = vec![vec![0.0, 1.0], vec![0.0, 3.0]];
        assert_eq!(estimate_mean_difference(&pos, &neg).unwrap(), vec![2.0, -2.0]);

        let d = estimate_mean_difference(&[vec![1.0, 1.0]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(d, vec![1.0, 1.0]);
    }

    #[test]
    fn mean_difference_errors() {
        assert!(estimate_mean_difference(&[], &[vec![1.0]]).is_err());
        assert!(matches!(
            estimate_mean_difference(&[vec![1.0, 2.0]], &[vec![1.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pca_on_axis_aligned_differences() {
        let pos = vec![vec![2.0, 0.0], vec![3.0, 0.0], vec![5.0, 0.0]];
        let neg = vec![vec![0.0, 0.0]; 3];
        let v = estimate_pca(&pos, &neg).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn pca_one_dimensional_points_toward_positive() {
        let pos = vec![vec![-1.0], vec![-2.0], vec![-4.0]];
        let neg = vec![vec![0.0]; 3];
        assert_eq!(estimate_pca(&pos, &neg).unwrap(), vec![-1.0]);
    }

    #[test]
    fn pca_symmetric_differences_pick_high_variance_axis() {
        // differences ±(0.1, 2), ±(0.2, 1): symmetric about the origin, e2 dominant
        let diffs = [[0.1, 2.0], [-0.1, -2.0], [0.2, 1.0], [-0.2, -1.0]];
        let neg: Vec<Vec<f64>> = vec![vec![0.0, 5.0]; 4];
        let pos: Vec<Vec<f64>> = diffs.iter().map(|d| vec![d[0], d[1] + 5.0]).collect();
        let v = estimate_pca(&pos, &neg).unwrap();
        assert!(v[1].abs() > 0.99);
        // mean difference is zero, so the positive-class mean (≈(0,5)) decides
        assert!(v[1] > 0.0);
    }

    #[test]
    fn pca_degenerate() {
        let same = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(estimate_pca(&same, &same), Err(Error::DegenerateData(_))));
        assert!(estimate_pca(&same[..1], &same[..1]).is_err());
    }

    #[test]
    fn pca_identical_differences_fall_back_to_mean() {
        let neg = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let pos = vec![vec![0.0, 2.0], vec![1.0, 3.0]];
        assert_eq!(estimate_pca(&pos, &neg).unwrap(), vec![0.0, 1.0]);
    }
}
