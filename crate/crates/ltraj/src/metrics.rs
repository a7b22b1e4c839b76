//! Evaluation metrics: spatial correlation between frames, seed-based
//! temporal correlation maps, and range-normalized RMSE.
//!
//! Undefined correlations (constant inputs) are explicit error or mask
//! states; the library never hands back a silent NaN.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        let da = a - mx;
        let db = b - my;
        cov += da * db;
        vx += da * da;
        vy += db * db;
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Pearson correlation of two vectorized images.
///
/// Errors with an undefined-metric report if either image is constant.
pub fn spatial_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dim(
            "spatial_correlation",
            format!("{:?}", x.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::Length {
            context: "spatial_correlation".into(),
            required: 2,
            got: x.len(),
        });
    }
    if is_constant(x.data()) || is_constant(y.data()) {
        return Err(Error::UndefinedMetric(
            "spatial correlation of a constant image".into(),
        ));
    }
    pearson(x.data(), y.data()).ok_or_else(|| {
        Error::UndefinedMetric("spatial correlation denominator vanished".into())
    })
}

/// Per-time-point spatial correlations between two frame sequences.
/// Entries where either frame is constant are flagged undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    pub time_points: Vec<usize>,
    pub values: Vec<Option<f64>>,
}

impl CorrelationSeries {
    /// Mean over the defined entries; `None` when every entry is undefined.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().filter_map(|v| *v).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    /// CSV rows `t,corr` with a header; undefined entries have an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,corr\n");
        for (t, v) in self.time_points.iter().zip(&self.values) {
            match v {
                Some(c) => out.push_str(&format!("{t},{c}\n")),
                None => out.push_str(&format!("{t},\n")),
            }
        }
        out
    }
}

/// Spatial correlation at each time point of two equal-length sequences.
pub fn correlation_series(pred: &[Tensor], truth: &[Tensor]) -> Result<CorrelationSeries> {
    if pred.len() != truth.len() {
        return Err(Error::Length {
            context: "correlation_series".into(),
            required: truth.len(),
            got: pred.len(),
        });
    }
    let mut values = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth.iter()) {
        match spatial_correlation(p, t) {
            Ok(c) => values.push(Some(c)),
            Err(Error::UndefinedMetric(_)) => values.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(CorrelationSeries {
        time_points: (0..pred.len()).collect(),
        values,
    })
}

/// Per-pixel temporal correlation against a fixed seed pixel's time series.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCorrelationMap {
    /// Seed coordinate as (row, col).
    pub seed: (usize, usize),
    /// `H x W` correlation values; masked entries hold 0.
    pub values: Tensor,
    /// Mask bit per pixel: false where the pixel's series was constant.
    pub defined: Vec<bool>,
}

impl TemporalCorrelationMap {
    /// Matrix CSV preceded by a seed coordinate header row.
    pub fn to_csv(&self) -> String {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        let mut out = format!("seed,{},{}\n", self.seed.0, self.seed.1);
        for r in 0..h {
            let row: Vec<String> = (0..w).map(|c| format!("{}", self.values.at(r, c))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Correlation of every pixel's time series with the seed pixel's series.
///
/// Errors if the seed series itself is constant (whole map undefined);
/// individual constant pixels are masked instead.
pub fn temporal_correlation_map(frames: &[Tensor], seed: (usize, usize)) -> Result<TemporalCorrelationMap> {
    if frames.len() < 2 {
        return Err(Error::Length {
            context: "temporal_correlation_map".into(),
            required: 2,
            got: frames.len(),
        });
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("temporal_correlation_map", "rank-2 frames", format!("{shape:?}")));
    }
    for f in frames {
        if f.shape() != shape {
            return Err(Error::dim(
                "temporal_correlation_map",
                format!("{shape:?}"),
                format!("{:?}", f.shape()),
            ));
        }
    }
    let (h, w) = (shape[0], shape[1]);
    if seed.0 >= h || seed.1 >= w {
        return Err(Error::dim(
            "temporal_correlation_map",
            format!("seed within {h}x{w}"),
            format!("({}, {})", seed.0, seed.1),
        ));
    }

    let series = |r: usize, c: usize| -> Vec<f64> { frames.iter().map(|f| f.at(r, c)).collect() };
    let seed_series = series(seed.0, seed.1);
    if is_constant(&seed_series) {
        return Err(Error::UndefinedMetric(format!(
            "seed pixel ({}, {}) has a constant time series",
            seed.0, seed.1
        )));
    }

    let mut values = vec![0.0; h * w];
    let mut defined = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let s = series(r, c);
            match pearson(&s, &seed_series) {
                Some(corr) => {
                    values[r * w + c] = corr;
                    defined[r * w + c] = true;
                }
                None => {
                    values[r * w + c] = 0.0;
                }
            }
        }
    }
    Ok(TemporalCorrelationMap {
        seed,
        values: Tensor::new_unchecked(vec![h, w], values),
        defined,
    })
}

/// Root mean squared error normalized by the target's range.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Length {
            context: "nrmse".into(),
            required: truth.len(),
            got: pred.len(),
        });
    }
    if truth.len() < 2 {
        return Err(Error::Length {
            context: "nrmse".into(),
            required: 2,
            got: truth.len(),
        });
    }
    let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Err(Error::UndefinedMetric(
            "nrmse of a constant target (zero range normalizer)".into(),
        ));
    }
    let mse = pred
        .iter()
        .zip(truth.iter())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;
    use proptest::prelude::*;

    fn image(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new_unchecked(vec![1, n], data)
    }

    #[test]
    fn self_correlation_is_one_and_negation_is_minus_one() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(spatial_correlation(&x, &x).unwrap(), 1.0);
        let neg = x.scale(-1.0);
        assert_eq!(spatial_correlation(&x, &neg).unwrap(), -1.0);
    }

    #[test]
    fn exact_linear_relation_gives_one() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor::from_vec(vec![2, 2], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((spatial_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_an_explicit_error() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = Tensor::filled(vec![2, 2], 3.0);
        assert!(matches!(
            spatial_correlation(&x, &c),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            spatial_correlation(&c, &x),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn series_flags_constant_frames_and_reports_mean() {
        let a = image(vec![1.0, 2.0, 3.0]);
        let c = image(vec![5.0, 5.0, 5.0]);
        let series = correlation_series(&[a.clone(), c], &[a.clone(), a.clone()]).unwrap();
        assert_eq!(series.values[0], Some(1.0));
        assert_eq!(series.values[1], None);
        assert_eq!(series.mean(), Some(1.0));
        let csv = series.to_csv();
        assert!(csv.starts_with("t,corr\n"));
        assert!(csv.contains("1,\n"));
    }

    #[test]
    fn white_noise_frames_have_near_zero_correlation() {
        let mut rng = SplitRng::new(77);
        let n = 10_000;
        let mut sum_abs = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let a = Tensor::from_fn(vec![100, 100], |_| rng.normal());
            let b = Tensor::from_fn(vec![100, 100], |_| rng.normal());
            sum_abs += spatial_correlation(&a, &b).unwrap().abs();
        }
        let mean_abs = sum_abs / trials as f64;
        assert!(mean_abs < 0.05, "mean |corr| = {mean_abs} over {n}-pixel frames");
    }

    #[test]
    fn temporal_map_seed_is_one_and_negation_is_minus_one() {
        // Three 1x3 frames: pixel 0 = seed series, pixel 1 = negated,
        // pixel 2 = constant.
        let frames = vec![
            image(vec![1.0, -1.0, 4.0]),
            image(vec![2.0, -2.0, 4.0]),
            image(vec![3.0, -3.0, 4.0]),
        ];
        let map = temporal_correlation_map(&frames, (0, 0)).unwrap();
        assert_eq!(map.values.at(0, 0), 1.0);
        assert_eq!(map.values.at(0, 1), -1.0);
        assert_eq!(map.values.at(0, 2), 0.0);
        assert!(!map.defined[2]);
        let csv = map.to_csv();
        assert!(csv.starts_with("seed,0,0\n"));
    }

    #[test]
    fn temporal_map_hand_pearson_value() {
        // seed series (1,2,3), other pixel (1,2,4) -> 3/sqrt(2*14/3)
        let frames = vec![
            image(vec![1.0, 1.0]),
            image(vec![2.0, 2.0]),
            image(vec![3.0, 4.0]),
        ];
        let map = temporal_correlation_map(&frames, (0, 0)).unwrap();
        let expected = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert!((map.values.at(0, 1) - expected).abs() < 1e-12);
        assert!((expected - 0.98198).abs() < 1e-5);
    }

    #[test]
    fn temporal_map_constant_seed_errors() {
        let frames = vec![image(vec![1.0, 1.0]), image(vec![1.0, 2.0])];
        assert!(matches!(
            temporal_correlation_map(&frames, (0, 0)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn per_pixel_affine_rescaling_keeps_map_value() {
        let mut rng = SplitRng::new(31);
        let base: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let frames: Vec<Tensor> = base.iter().map(|f| image(f.clone())).collect();
        // Rescale pixel 2's series by a > 0 plus offset.
        let rescaled: Vec<Tensor> = base
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g[2] = 2.5 * g[2] + 1.0;
                image(g)
            })
            .collect();
        let m1 = temporal_correlation_map(&frames, (0, 0)).unwrap();
        let m2 = temporal_correlation_map(&rescaled, (0, 0)).unwrap();
        assert!((m1.values.at(0, 2) - m2.values.at(0, 2)).abs() < 1e-12);
    }

    #[test]
    fn nrmse_hand_values() {
        assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = nrmse(&[0.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.7071).abs() < 1e-4);
        assert!(matches!(
            nrmse(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    proptest! {
        #[test]
        fn correlation_is_symmetric_bounded_and_affine_invariant(
            xs in proptest::collection::vec(-100.0f64..100.0, 4..32),
            ys_seed in 0u64..1000,
            a in 0.01f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let n = xs.len();
            let mut rng = SplitRng::new(ys_seed);
            let ys: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let x = image(xs.clone());
            let y = image(ys.clone());
            if let (Ok(rxy), Ok(ryx)) = (spatial_correlation(&x, &y), spatial_correlation(&y, &x)) {
                prop_assert!((rxy - ryx).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&rxy));
                // corr(a x + b, y) == corr(x, y) for a > 0
                let scaled = image(xs.iter().map(|&v| a * v + b).collect());
                let rs = spatial_correlation(&scaled, &y).unwrap();
                prop_assert!((rs - rxy).abs() < 1e-9, "affine invariance: {rs} vs {rxy}");
                // and flips sign for a < 0
                let flipped = image(xs.iter().map(|&v| -a * v + b).collect());
                let rf = spatial_correlation(&flipped, &y).unwrap();
                prop_assert!((rf + rxy).abs() < 1e-9);
            }
        }
    }
}
