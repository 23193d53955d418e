//! Dimensionality reduction of vertex feature matrices: linear confound
//! regression of the cutting angle followed by PCA.
//!
//! Everything here runs in f64. Regression solves the 2x2 normal equations
//! per column; PCA eigendecomposes the column covariance with a fixed sign
//! convention so repeated fits are comparable bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor, write_tensor};

/// Per-column least-squares fit on the design `[1, c]` and its residuals.
#[derive(Debug, Clone)]
pub struct ConfoundRegression {
    /// Residual matrix, same shape as the input.
    pub residuals: Array2<f64>,
    /// Intercept per column.
    pub intercepts: Array1<f64>,
    /// Confound slope per column; all zero when the design was rank deficient.
    pub slopes: Array1<f64>,
    /// True when the confound was (numerically) constant and only the
    /// intercept was fit.
    pub rank_deficient: bool,
}

/// Regress each feature column on `[1, confound]` and return the residuals.
/// A constant confound degrades to an intercept-only fit and is flagged.
pub fn confound_regress(x: &Array2<f64>, confound: &[f64]) -> Result<ConfoundRegression> {
    let (n, dims) = x.dim();
    if confound.len() != n {
        return Err(Error::invalid(format!(
            "{n} feature rows but {} confound values",
            confound.len()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("confound regression needs at least 2 rows"));
    }
    if confound.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "confound regression requires finite inputs",
        ));
    }
    let nf = n as f64;
    let sum_c: f64 = confound.iter().sum();
    let mean_c = sum_c / nf;
    // Gram matrix of the centered design: variance of c decides the rank.
    let scc: f64 = confound.iter().map(|&c| (c - mean_c) * (c - mean_c)).sum();
    let rank_deficient = scc <= 1e-12 * nf.max(sum_c.abs());

    let mut intercepts = Array1::<f64>::zeros(dims);
    let mut slopes = Array1::<f64>::zeros(dims);
    let mut residuals = x.clone();
    for col in 0..dims {
        let column = x.column(col);
        let sum_x: f64 = column.sum();
        let mean_x = sum_x / nf;
        let (a, b) = if rank_deficient {
            (mean_x, 0.0)
        } else {
            let sxc: f64 = confound
                .iter()
                .zip(column.iter())
                .map(|(&c, &v)| (c - mean_c) * (v - mean_x))
                .sum();
            let b = sxc / scc;
            (mean_x - b * mean_c, b)
        };
        intercepts[col] = a;
        slopes[col] = b;
        for row in 0..n {
            residuals[[row, col]] = x[[row, col]] - a - b * confound[row];
        }
    }
    Ok(ConfoundRegression {
        residuals,
        intercepts,
        slopes,
        rank_deficient,
    })
}

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaSelection {
    /// A fixed component count.
    Components(usize),
    /// The smallest count whose cumulative explained-variance ratio reaches
    /// the threshold (e.g. 0.8).
    VarianceThreshold(f64),
}

/// A fitted PCA basis. Components are rows, orthonormal, ordered by
/// decreasing eigenvalue; the spectrum covers every dimension, not only the
/// kept components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `[k, dims]`, orthonormal rows.
    pub components: Array2<f64>,
    /// Full descending eigenvalue spectrum of the covariance.
    pub eigenvalues: Array1<f64>,
    /// Explained-variance ratio per spectrum entry; sums to 1 when any
    /// variance is present.
    pub explained: Array1<f64>,
}

impl PcaModel {
    #[must_use]
    pub fn n_components(&self) -> usize {
        self.components.dim().0
    }

    #[must_use]
    pub fn dims(&self) -> usize {
        self.components.dim().1
    }

    /// Cumulative explained-variance ratio of the kept components.
    #[must_use]
    pub fn explained_kept(&self) -> f64 {
        self.explained.iter().take(self.n_components()).sum()
    }
}

fn explained_ratios(eigenvalues: &Array1<f64>) -> Array1<f64> {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        Array1::zeros(eigenvalues.len())
    } else {
        eigenvalues.mapv(|v| v / total)
    }
}

/// Fit a PCA basis: center, eigendecompose the sample covariance, order by
/// decreasing eigenvalue, and orient each component so its largest-magnitude
/// coordinate is positive.
pub fn pca_fit(x: &Array2<f64>, selection: PcaSelection) -> Result<PcaModel> {
    let (n, dims) = x.dim();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 rows"));
    }
    if dims == 0 {
        return Err(Error::invalid("PCA needs at least 1 feature column"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("PCA requires finite inputs"));
    }
    let k = match selection {
        PcaSelection::Components(k) => {
            if k == 0 || k > dims {
                return Err(Error::invalid(format!(
                    "component count {k} outside 1..={dims}"
                )));
            }
            Some(k)
        }
        PcaSelection::VarianceThreshold(t) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid("variance threshold outside [0, 1]"));
            }
            None
        }
    };

    let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = x - &mean.clone().insert_axis(ndarray::Axis(0));
    // One blocked matrix product instead of a scalar loop; the two triangles
    // come out of separate kernel calls, so average them to keep the matrix
    // exactly symmetric.
    let scatter = centered.t().dot(&centered);
    let mut cov = DMatrix::<f64>::zeros(dims, dims);
    for i in 0..dims {
        for j in i..dims {
            let v = 0.5 * (scatter[[i, j]] + scatter[[j, i]]) / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let explained = explained_ratios(&eigenvalues);

    let k = k.unwrap_or_else(|| {
        let threshold = match selection {
            PcaSelection::VarianceThreshold(t) => t,
            PcaSelection::Components(_) => unreachable!(),
        };
        let mut cum = 0.0;
        for (i, r) in explained.iter().enumerate() {
            cum += r;
            if cum >= threshold - 1e-12 {
                return i + 1;
            }
        }
        dims
    });

    let mut components = Array2::<f64>::zeros((k, dims));
    for (row, &src) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(src);
        // Orient along the largest-magnitude coordinate; strict comparison
        // keeps the earliest index on ties.
        let mut arg = 0usize;
        let mut best = 0.0f64;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        let flip = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dims {
            components[[row, i]] = flip * col[i];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        explained,
    })
}

/// Project rows onto the kept components: `(x − mean) · componentsᵀ`.
pub fn pca_transform(model: &PcaModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    let (_, dims) = x.dim();
    if dims != model.dims() {
        return Err(Error::invalid(format!(
            "input has {dims} columns, model expects {}",
            model.dims()
        )));
    }
    let centered = x - &model.mean.clone().insert_axis(ndarray::Axis(0));
    Ok(centered.dot(&model.components.t()))
}

/// Map scores back to feature space: `scores · components + mean`.
pub fn pca_inverse(model: &PcaModel, scores: &Array2<f64>) -> Result<Array2<f64>> {
    let (_, k) = scores.dim();
    if k != model.n_components() {
        return Err(Error::invalid(format!(
            "scores have {k} columns, model keeps {}",
            model.n_components()
        )));
    }
    Ok(scores.dot(&model.components) + &model.mean.clone().insert_axis(ndarray::Axis(0)))
}

/// Fixed reduction order: regress the confound out first, then fit PCA on the
/// residuals and return their scores alongside both fits.
pub fn reduce_features(
    x: &Array2<f64>,
    confound: &[f64],
    selection: PcaSelection,
) -> Result<(ConfoundRegression, PcaModel, Array2<f64>)> {
    let regression = confound_regress(x, confound)?;
    let model = pca_fit(&regression.residuals, selection)?;
    let scores = pca_transform(&model, &regression.residuals)?;
    Ok((regression, model, scores))
}

/// Persist a PCA model into `dir` as a manifest plus one tensor per part.
pub fn write_pca_model(dir: &Path, model: &PcaModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("pli-pca-v1\n");
    let _ = writeln!(manifest, "components {}", model.n_components());
    let _ = writeln!(manifest, "dims {}", model.dims());
    fs::write(dir.join("manifest.txt"), manifest)?;
    write_tensor(&dir.join("mean.plt"), &model.mean)?;
    write_tensor(&dir.join("components.plt"), &model.components)?;
    write_tensor(&dir.join("eigenvalues.plt"), &model.eigenvalues)?;
    Ok(())
}

/// Read a model written by [`write_pca_model`].
pub fn read_pca_model(dir: &Path) -> Result<PcaModel> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = manifest.lines();
    if lines.next().map(str::trim) != Some("pli-pca-v1") {
        return Err(Error::format("unrecognized PCA manifest"));
    }
    let mean = read_tensor::<f64>(&dir.join("mean.plt"))?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::format("PCA mean tensor is not 1-dimensional"))?;
    let components = read_tensor::<f64>(&dir.join("components.plt"))?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::format("PCA component tensor is not 2-dimensional"))?;
    let eigenvalues = read_tensor::<f64>(&dir.join("eigenvalues.plt"))?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::format("PCA eigenvalue tensor is not 1-dimensional"))?;
    if components.dim().1 != mean.len() {
        return Err(Error::format("PCA component width disagrees with mean"));
    }
    let explained = explained_ratios(&eigenvalues);
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        explained,
    })
}
