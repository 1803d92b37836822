//! Sequence kernels: CCC, DTW, lagged cross-correlation and the Fréchet
//! distance between Gaussian fits.

use crate::error::{Error, Result};
use crate::numerics::{sym_sqrt, trace, Tensor};

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Concordance correlation coefficient with population moments. Zero when
/// either series is constant or the denominator vanishes.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Data(format!("ccc: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Data("ccc needs at least two samples".into()));
    }
    if is_constant(x) || is_constant(y) {
        return Ok(0.0);
    }
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = sxx / n + syy / n + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * sxy / n / denom).clamp(-1.0, 1.0))
}

/// Column `c` of a `[N, D]` tensor.
pub fn column(t: &Tensor, c: usize) -> Vec<f64> {
    let d = t.last_dim();
    t.data().iter().skip(c).step_by(d).copied().collect()
}

/// Mean over channels of the per-channel CCC between two `[N, D]` sequences.
pub fn channel_ccc(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Data(format!("channel_ccc: shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    let d = a.last_dim();
    let mut total = 0.0;
    for c in 0..d {
        total += ccc(&column(a, c), &column(b, c))?;
    }
    Ok(total / d as f64)
}

/// Dynamic time warping distance between `[N, D]` and `[M, D]` with an L1
/// frame cost and boundary-aligned monotone paths.
pub fn dtw(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, d) = x.dims2("dtw")?;
    let (m, e) = y.dims2("dtw")?;
    if d != e {
        return Err(Error::Data(format!("dtw: frame widths {d} and {e} differ")));
    }
    if n == 0 || m == 0 {
        return Err(Error::Data("dtw needs non-empty sequences".into()));
    }
    let cost = |i: usize, j: usize| -> f64 { x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).abs()).sum() };
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = best + cost(i, j);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if is_constant(x) || is_constant(y) {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = (sxx * syy).sqrt();
    (denom > 0.0).then(|| sxy / denom)
}

/// Absolute lag in `[-l_max, l_max]` maximising the Pearson correlation of
/// `x[t]` with `y[t + k]` over the overlap. Ties go to the smallest `|k|`;
/// zero when the correlation is undefined at every lag.
pub fn tlcc_lag(x: &[f64], y: &[f64], l_max: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::Data(format!("tlcc: lengths {} and {} differ", x.len(), y.len())));
    }
    let n = x.len();
    if n < l_max + 2 {
        return Err(Error::Config(format!(
            "tlcc: series of length {n} leaves an overlap shorter than 2 at lag {l_max}"
        )));
    }
    let corr = |k: isize| -> Option<f64> {
        let s = k.unsigned_abs();
        if k >= 0 {
            pearson(&x[..n - s], &y[s..])
        } else {
            pearson(&x[s..], &y[..n - s])
        }
    };
    let mut best: Option<(f64, usize)> = corr(0).map(|r| (r, 0));
    for m in 1..=l_max {
        for k in [-(m as isize), m as isize] {
            if let Some(r) = corr(k) {
                if best.is_none_or(|(b, _)| r > b) {
                    best = Some((r, m));
                }
            }
        }
    }
    Ok(best.map_or(0, |(_, lag)| lag))
}

/// Mean and covariance of a cloud of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `[D, D]`, symmetric.
    pub cov: Tensor,
}

impl GaussianStats {
    /// Fits sample mean and unbiased covariance to the rows of `frames`.
    pub fn fit(frames: &[&[f64]]) -> Result<Self> {
        let n = frames.len();
        if n < 2 {
            return Err(Error::Data("need at least two frames for a covariance".into()));
        }
        let d = frames[0].len();
        if frames.iter().any(|f| f.len() != d) {
            return Err(Error::Data("frames differ in width".into()));
        }
        let mut mu = vec![0.0; d];
        for f in frames {
            for (m, v) in mu.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        let mut dev = vec![0.0; d];
        for f in frames {
            for k in 0..d {
                dev[k] = f[k] - mu[k];
            }
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += dev[i] * dev[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean: mu, cov: Tensor::new(vec![d, d], cov)? })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Adds `eps` to the covariance diagonal.
    pub fn jittered(&self, eps: f64) -> Self {
        let d = self.dim();
        let mut cov = self.cov.clone();
        for i in 0..d {
            cov.data_mut()[i * d + i] += eps;
        }
        Self { mean: self.mean.clone(), cov }
    }
}

/// Fréchet distance `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`,
/// clamped at zero.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::Data(format!("fid: dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = sym_sqrt(&a.cov)?;
    let inner = ra.matmul(&b.cov)?.matmul(&ra)?;
    let cross = trace(&sym_sqrt(&inner)?);
    Ok((dmu + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn brute_dtw(x: &Tensor, y: &Tensor, i: usize, j: usize, acc: f64, best: &mut f64) {
        let c: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).abs()).sum();
        let acc = acc + c;
        let (n, m) = (x.shape()[0], y.shape()[0]);
        if i + 1 == n && j + 1 == m {
            *best = best.min(acc);
            return;
        }
        if i + 1 < n {
            brute_dtw(x, y, i + 1, j, acc, best);
        }
        if j + 1 < m {
            brute_dtw(x, y, i, j + 1, acc, best);
        }
        if i + 1 < n && j + 1 < m {
            brute_dtw(x, y, i + 1, j + 1, acc, best);
        }
    }

    pub(crate) fn dtw_oracle(x: &Tensor, y: &Tensor) -> f64 {
        let mut best = f64::INFINITY;
        brute_dtw(x, y, 0, 0, 0.0, &mut best);
        best
    }

    fn series(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn ccc_examples() {
        let x = [0.3, -1.0, 2.5, 0.7, 1.1];
        assert_eq!(ccc(&x, &x).unwrap(), 1.0);
        assert!((ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ccc(&x, &[0.1; 5]).unwrap(), 0.0);
        assert!(ccc(&x, &x[..4]).is_err());
    }

    #[test]
    fn ccc_penalises_scale_and_shift() {
        let mut rng = Rng::new(3);
        let x = rng.normal_vec(40);
        for (a, b) in [(2.0, 0.0), (1.0, 0.5), (0.5, -1.0), (-1.0, 0.0)] {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            assert!(ccc(&x, &y).unwrap() < 1.0);
        }
    }

    #[test]
    fn dtw_examples() {
        let x = series(&[1.0, 2.0, 3.0]);
        assert_eq!(dtw(&x, &x).unwrap(), 0.0);
        assert_eq!(dtw(&x, &series(&[1.0, 2.0, 2.0, 3.0])).unwrap(), 0.0);
        assert_eq!(dtw(&series(&[0.0]), &series(&[1.0, 2.0])).unwrap(), 3.0);
    }

    #[test]
    fn tlcc_examples() {
        let mut rng = Rng::new(5);
        let x: Vec<f64> = (0..120).map(|t| 0.02 * t as f64 + rng.normal()).collect();
        assert_eq!(tlcc_lag(&x, &x, 10).unwrap(), 0);
        let mut y = vec![0.0; 120];
        for t in 3..120 {
            y[t] = x[t - 3];
        }
        assert_eq!(tlcc_lag(&x, &y, 10).unwrap(), 3);
        assert_eq!(tlcc_lag(&y, &x, 10).unwrap(), 3);
        assert_eq!(tlcc_lag(&x, &[2.0; 120], 10).unwrap(), 0);
        assert!(tlcc_lag(&x[..11], &y[..11], 10).is_err());
        assert!(tlcc_lag(&x[..12], &y[..12], 10).is_ok());
    }

    #[test]
    fn fid_closed_forms() {
        let eye = GaussianStats { mean: vec![0.0, 0.0], cov: Tensor::eye(2) };
        assert!(fid(&eye, &eye).unwrap() < 1e-8);
        let shifted = GaussianStats { mean: vec![1.0, 0.0], cov: Tensor::eye(2) };
        assert!((fid(&eye, &shifted).unwrap() - 1.0).abs() < 1e-8);
        let a = GaussianStats { mean: vec![0.0, 0.0], cov: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 4.0]]).unwrap() };
        let b = GaussianStats { mean: vec![0.0, 0.0], cov: Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap() };
        assert!((fid(&a, &b).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn fid_fitted_symmetry() {
        let mut rng = Rng::new(9);
        let rows_a: Vec<Vec<f64>> = (0..200).map(|_| rng.normal_vec(5)).collect();
        let rows_b: Vec<Vec<f64>> = (0..200).map(|_| rng.normal_vec(5).iter().map(|v| 2.0 * v + 0.3).collect()).collect();
        let a = GaussianStats::fit(&rows_a.iter().map(|r| r.as_slice()).collect::<Vec<_>>()).unwrap();
        let b = GaussianStats::fit(&rows_b.iter().map(|r| r.as_slice()).collect::<Vec<_>>()).unwrap();
        assert!(fid(&a, &a).unwrap() < 1e-8);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    }

    proptest! {
        #[test]
        fn dtw_matches_path_enumeration(
            n in 1usize..=6, m in 1usize..=6, d in 1usize..=2, seed in any::<u64>()
        ) {
            let mut rng = Rng::new(seed);
            let x = Tensor::new(vec![n, d], rng.normal_vec(n * d)).unwrap();
            let y = Tensor::new(vec![m, d], rng.normal_vec(m * d)).unwrap();
            prop_assert!((dtw(&x, &y).unwrap() - dtw_oracle(&x, &y)).abs() <= 1e-12);
        }

        #[test]
        fn ccc_bounded_and_symmetric(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_vec(n);
            let y = rng.normal_vec(n);
            let r = ccc(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert_eq!(r, ccc(&y, &x).unwrap());
        }
    }
}
