//! Spectral diagnostics of dimensional collapse: representation covariance,
//! its sorted eigenvalue spectrum, effective rank and collapse index.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{asymmetry, symmetric_eigen};

pub const DEFAULT_COLLAPSE_RATIO: f64 = 1e-4;
/// Allowed asymmetry of a covariance passed to [`singular_spectrum`].
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Written in the log column for exact zeros.
pub const LOG_ZERO_SENTINEL: f64 = -16.0;
pub const CSV_HEADER: &str = "index,singular_value,log10_singular_value";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    PooledBackbone,
    ProjectorEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub log10_values: Vec<f64>,
    pub effective_rank: f64,
    pub collapse_index: usize,
    pub threshold: f64,
    pub feature_dim: usize,
    pub num_samples: usize,
    pub source: FeatureSource,
}

impl SpectrumReport {
    /// Full report for `[N, d]` features.
    pub fn from_features(
        features: &Grid<f64>,
        source: FeatureSource,
        threshold: f64,
    ) -> Result<Self> {
        let c = representation_covariance(features)?;
        let s = singular_spectrum(&c)?;
        Ok(Self {
            log10_values: s.iter().map(|&v| log10_or_sentinel(v)).collect(),
            effective_rank: effective_rank(&s)?,
            collapse_index: collapse_index(&s, threshold)?,
            threshold,
            feature_dim: s.len(),
            num_samples: features.dim(0),
            source,
            singular_values: s,
        })
    }
}

fn log10_or_sentinel(v: f64) -> f64 {
    if v > 0.0 {
        v.log10()
    } else {
        LOG_ZERO_SENTINEL
    }
}

/// Population covariance `(1/N)·Σ (fₙ − μ)(fₙ − μ)ᵀ` of `[N, d]` features.
pub fn representation_covariance(features: &Grid<f64>) -> Result<Grid<f64>> {
    let (n, d) = features.as_matrix("representation_covariance")?;
    if n < 2 {
        return Err(Error::degenerate(
            "representation_covariance",
            format!("need N >= 2 samples, got {n}"),
        ));
    }
    let x = features.data();
    let mut mu = vec![0.0; d];
    for row in x.chunks(d) {
        mu.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.chunks(d) {
        for (k, (v, m)) in row.iter().zip(&mu).enumerate() {
            centered[k] = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                c[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = c[i * d + j] / n as f64;
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    Grid::new(vec![d, d], c)
}

/// Singular values of a symmetric PSD matrix, descending, with negative
/// round-off clamped to zero.
pub fn singular_spectrum(c: &Grid<f64>) -> Result<Vec<f64>> {
    let (r, k) = c.as_matrix("singular_spectrum")?;
    if r != k {
        return Err(Error::shape(
            "singular_spectrum",
            format!("non-square {r}x{k}"),
        ));
    }
    let asym = asymmetry(c);
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(
            "singular_spectrum",
            format!("matrix asymmetry {asym:e} exceeds {SYMMETRY_TOL:e}"),
        ));
    }
    let e = symmetric_eigen(c)?;
    Ok(e.values.into_iter().map(|v| v.max(0.0)).collect())
}

/// `exp(−Σ pᵢ log pᵢ)` with `p` the normalized spectrum, after dropping
/// values at or below `1e-12·max`.
pub fn effective_rank(spectrum: &[f64]) -> Result<f64> {
    if spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "effective_rank",
            "spectrum must be finite and non-negative",
        ));
    }
    let max = spectrum.iter().fold(0.0f64, |a, &v| a.max(v));
    if !(max > 0.0) {
        return Err(Error::invalid(
            "effective_rank",
            "spectrum has no positive value",
        ));
    }
    let kept: Vec<f64> = spectrum
        .iter()
        .copied()
        .filter(|&v| v > 1e-12 * max)
        .collect();
    let total: f64 = kept.iter().sum();
    let h: f64 = kept
        .iter()
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp().clamp(1.0, kept.len() as f64))
}

/// Number of values below `ratio·max(spectrum)`.
pub fn collapse_index(spectrum: &[f64], ratio: f64) -> Result<usize> {
    if spectrum.is_empty() {
        return Err(Error::invalid("collapse_index", "empty spectrum"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(
            "collapse_index",
            format!("ratio must lie in (0, 1), got {ratio}"),
        ));
    }
    let max = spectrum.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    Ok(spectrum.iter().filter(|&&v| v < ratio * max).count())
}

/// Write the spectrum as CSV. Values use the shortest decimal form that
/// parses back to the same `f64`.
pub fn export_spectrum_csv(report: &SpectrumReport, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CSV_HEADER}").expect("write to vec");
    for (i, &v) in report.singular_values.iter().enumerate() {
        writeln!(out, "{i},{v:?},{:?}", log10_or_sentinel(v)).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a file written by [`export_spectrum_csv`] into
/// `(singular_values, log10_values)`.
pub fn read_spectrum_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::invalid(
            "read_spectrum_csv",
            format!("{}: missing header", path.display()),
        ));
    }
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let bad = || {
            Error::invalid(
                "read_spectrum_csv",
                format!("{}: bad row {}: {line}", path.display(), i + 1),
            )
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 || f[0].parse::<usize>().ok() != Some(i) {
            return Err(bad());
        }
        s.push(f[1].parse().map_err(|_| bad())?);
        l.push(f[2].parse().map_err(|_| bad())?);
    }
    Ok((s, l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::whitening::zca_exact;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(&[n, d], |_| rng.sample(StandardNormal))
    }

    fn random_rotation(d: usize, seed: u64) -> Grid<f64> {
        let m = gaussian(d, d, seed);
        let qr = nalgebra::DMatrix::from_row_slice(d, d, m.data()).qr();
        let q = qr.q();
        Grid::from_fn(&[d, d], |i| q[(i / d, i % d)])
    }

    #[test]
    fn covariance_examples() {
        let f = Grid::from_f64(&[2, 2], &[1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(
            representation_covariance(&f).unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0]
        );
        let same = Grid::from_f64(&[3, 2], &[0.5, 2.0, 0.5, 2.0, 0.5, 2.0]).unwrap();
        assert!(representation_covariance(&same)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(representation_covariance(&Grid::<f64>::zeros(&[1, 3])).is_err());
        let c = representation_covariance(&gaussian(50, 7, 1)).unwrap();
        assert!(asymmetry(&c) < 1e-12);
    }

    #[test]
    fn covariance_matches_centered_gram() {
        let f = gaussian(40, 5, 2);
        let c = representation_covariance(&f).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(40, 5, f.data());
        let mean = m.row_mean();
        let centered = nalgebra::DMatrix::from_fn(40, 5, |i, j| m[(i, j)] - mean[j]);
        let want = centered.transpose() * &centered / 40.0;
        for i in 0..5 {
            for j in 0..5 {
                assert!((c.data()[i * 5 + j] - want[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectrum_examples() {
        let diag = Grid::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(singular_spectrum(&diag).unwrap(), vec![3.0, 1.0]);
        // vvᵀ with ‖v‖² = 2 has eigenvalues 2 and 0.
        let outer = Grid::from_f64(&[2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let s = singular_spectrum(&outer).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-14 && s[1].abs() < 1e-14 && s[1] >= 0.0);
        let skew = Grid::from_f64(&[2, 2], &[1.0, 0.5, 0.4, 1.0]).unwrap();
        assert!(singular_spectrum(&skew).is_err());
    }

    #[test]
    fn spectrum_matches_independent_eigensolver() {
        for seed in 0..10 {
            let a = gaussian(6, 6, seed);
            let psd = a.transpose().unwrap().matmul(&a).unwrap();
            let s = singular_spectrum(&psd).unwrap();
            let mut want: Vec<f64> = nalgebra::DMatrix::from_row_slice(6, 6, psd.data())
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .collect();
            want.sort_by(|a, b| b.total_cmp(a));
            for (x, y) in s.iter().zip(&want) {
                assert!((x - y).abs() < 1e-8, "{s:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&[2.0; 7]).unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(effective_rank(&[3.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((effective_rank(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(effective_rank(&[0.0, 0.0]).is_err());
        assert!(effective_rank(&[]).is_err());
        // Values at or below 1e-12·max are ignored.
        assert_eq!(effective_rank(&[1.0, 1e-13]).unwrap(), 1.0);
    }

    #[test]
    fn collapse_index_examples() {
        assert_eq!(collapse_index(&[1.0, 1.0, 1.0], 1e-4).unwrap(), 0);
        assert_eq!(collapse_index(&[1.0, 1e-9, 1e-9], 1e-4).unwrap(), 2);
        assert!(collapse_index(&[], 1e-4).is_err());
        assert!(collapse_index(&[1.0], 1.0).is_err());
        assert!(collapse_index(&[1.0], 0.0).is_err());
    }

    fn report_of(values: &[f64]) -> SpectrumReport {
        SpectrumReport {
            log10_values: values.iter().map(|&v| log10_or_sentinel(v)).collect(),
            effective_rank: effective_rank(values).unwrap(),
            collapse_index: collapse_index(values, DEFAULT_COLLAPSE_RATIO).unwrap(),
            threshold: DEFAULT_COLLAPSE_RATIO,
            feature_dim: values.len(),
            num_samples: 10,
            source: FeatureSource::PooledBackbone,
            singular_values: values.to_vec(),
        }
    }

    #[test]
    fn csv_rows_and_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        export_spectrum_csv(&report_of(&[10.0, 1.0, 0.0]), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            vec![CSV_HEADER, "0,10.0,1.0", "1,1.0,0.0", "2,0.0,-16.0"]
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let f = gaussian(30, 9, 4);
        let r = SpectrumReport::from_features(&f, FeatureSource::ProjectorEmbedding, 1e-4).unwrap();
        export_spectrum_csv(&r, &p).unwrap();
        let (s, l) = read_spectrum_csv(&p).unwrap();
        assert_eq!(s, r.singular_values);
        assert_eq!(l, r.log10_values);
        assert_eq!(r.feature_dim, 9);
        assert_eq!(r.num_samples, 30);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"projector_embedding\""));
    }

    #[test]
    fn exact_zca_features_have_full_effective_rank() {
        for (n, d) in [(64, 8), (64, 32), (200, 16)] {
            let mixing = gaussian(d, d, 7);
            let f = gaussian(n, d, 8).matmul(&mixing).unwrap();
            let (white, _) = zca_exact(&f.transpose().unwrap(), 1e-5).unwrap();
            let feats = white.transpose().unwrap();
            let r = effective_rank(
                &singular_spectrum(&representation_covariance(&feats).unwrap()).unwrap(),
            )
            .unwrap();
            assert!(r >= 0.99 * d as f64, "n={n} d={d}: {r}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn spectrum_is_rotation_invariant(seed in 0u64..1000, d in 2usize..8) {
            let f = gaussian(20, d, seed);
            let r = random_rotation(d, seed + 1);
            let a = singular_spectrum(&representation_covariance(&f).unwrap()).unwrap();
            let b = singular_spectrum(&representation_covariance(&f.matmul(&r).unwrap()).unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }

        #[test]
        fn spectrum_scales_quadratically(seed in 0u64..1000, s in 0.1f64..3.0) {
            let f = gaussian(15, 5, seed);
            let a = singular_spectrum(&representation_covariance(&f).unwrap()).unwrap();
            let b = singular_spectrum(&representation_covariance(&f.map(|v| v * s)).unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x * s * s - y).abs() < 1e-8);
            }
        }

        #[test]
        fn report_invariants(seed in 0u64..1000, n in 2usize..12, d in 1usize..10) {
            let r = SpectrumReport::from_features(&gaussian(n, d, seed), FeatureSource::PooledBackbone, 1e-4).unwrap();
            prop_assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(r.singular_values.iter().all(|&v| v >= 0.0));
            prop_assert!(r.collapse_index <= r.feature_dim);
            prop_assert!(r.effective_rank >= 1.0 && r.effective_rank <= d as f64);
        }
    }
}
