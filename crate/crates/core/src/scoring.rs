//! Defect scores from budget deviation and reconstruction error, plus AUROC metrics.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{PvqaeError, Result};

/// Per-cell cross-entropy between routed scores and the prior, normalized to sum to one.
pub fn s_prior(soft: &Array3<f64>, prior: &Array3<f64>) -> Result<Array2<f64>> {
    if soft.dim() != prior.dim() {
        return Err(PvqaeError::Shape(format!(
            "budget scores {:?} vs prior {:?}",
            soft.dim(),
            prior.dim()
        )));
    }
    let (g, g2, levels) = soft.dim();
    let ce = Array2::from_shape_fn((g, g2), |(i, j)| {
        -(0..levels)
            .map(|l| soft[[i, j, l]] * (prior[[i, j, l]] + 1e-12).ln())
            .sum::<f64>()
    });
    let total: f64 = ce.sum();
    Ok(if total > 0.0 {
        ce.mapv(|v| v / total)
    } else {
        Array2::from_elem((g, g2), 1.0 / (g * g2) as f64)
    })
}

/// Per-pixel squared error summed over channels.
pub fn s_recon(x: &Array3<f32>, x_hat: &Array3<f32>) -> Result<Array2<f64>> {
    if x.dim() != x_hat.dim() {
        return Err(PvqaeError::Shape(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let (h, w, c) = x.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, xx)| {
        (0..c)
            .map(|k| {
                let d = x_hat[[y, xx, k]] as f64 - x[[y, xx, k]] as f64;
                d * d
            })
            .sum()
    }))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Separable Gaussian blur with a `±4σ` kernel and reflected borders. `σ = 0` is the identity.
pub fn gaussian_smooth(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= z);
    let (h, w) = map.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * map[[y, reflect(x as isize + k as isize - radius, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[[reflect(y as isize + k as isize - radius, h), x]])
                .sum();
        }
    }
    out
}

/// Per-pixel defect scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// Final (smoothed) map.
    pub s: Array2<f64>,
    /// Normalized budget-deviation cells; absent when scoring without a prior.
    pub s_prior_cells: Option<Array2<f64>>,
    pub s_recon: Array2<f64>,
    /// Maximum of `s`.
    pub image_score: f64,
}

fn upsample_cells(cells: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    let (g, g2) = cells.dim();
    if g == 0 || h % g != 0 || w % g2 != 0 {
        return Err(PvqaeError::Shape(format!("{g}x{g2} cells do not tile {h}x{w}")));
    }
    let (fy, fx) = (h / g, w / g2);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| cells[[y / fy, x / fx]]))
}

/// Upsampled prior cells times the reconstruction map, smoothed; `None` scores with reconstruction only.
pub fn defect_score(s_prior_cells: Option<&Array2<f64>>, s_recon: &Array2<f64>, smoothing_sigma: f64) -> Result<ScoreMap> {
    let (h, w) = s_recon.dim();
    let raw = match s_prior_cells {
        Some(cells) => upsample_cells(cells, h, w)? * s_recon,
        None => s_recon.clone(),
    };
    let s = gaussian_smooth(&raw, smoothing_sigma);
    let image_score = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoreMap {
        s,
        s_prior_cells: s_prior_cells.cloned(),
        s_recon: s_recon.clone(),
        image_score,
    })
}

/// Strict `score > t` indicator.
pub fn threshold(map: &Array2<f64>, t: f64) -> Array2<u8> {
    map.mapv(|v| u8::from(v > t))
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(PvqaeError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PvqaeError::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PvqaeError::Numeric("NaN score in AUROC".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid * pos_in_block as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub n_images: usize,
    pub n_pixels: usize,
}

/// Per-category rows followed by an `overall` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_budget_cost: f64,
    /// Distinct codes used per level over the test split.
    pub code_utilization: Vec<usize>,
}

impl MetricsReport {
    pub fn overall(&self) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.category == "overall")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,image_auroc,pixel_auroc,n_images,n_pixels\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{}",
                r.category, r.image_auroc, r.pixel_auroc, r.n_images, r.n_pixels
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PvqaeError::io(path, e))
    }
}

/// Sidecar written next to an exported heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapInfo {
    pub image_score: f64,
    pub raw_min: f64,
    pub raw_max: f64,
    pub budget_levels: Vec<Vec<usize>>,
}

/// Scales a map to `[0, 255]` per image; constant maps become zero.
pub fn heatmap_bytes(map: &Array2<f64>) -> (Array2<u8>, f64, f64) {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes = map.mapv(|v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0
        }
    });
    (bytes, min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(PvqaeError::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6u8)) / 5.0).collect();
            assert!((auroc(&scores, &labels).unwrap() - pair_count(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn s_recon_cases() {
        let x = Array3::<f32>::zeros((3, 3, 3));
        assert!(s_recon(&x, &x).unwrap().iter().all(|&v| v == 0.0));
        let mut y = x.clone();
        y[[1, 2, 0]] = 0.5;
        let m = s_recon(&x, &y).unwrap();
        assert_eq!(m[[1, 2]], 0.25);
        assert_eq!(m.sum(), 0.25);
        y[[1, 2, 0]] = 1.0;
        assert_eq!(s_recon(&x, &y).unwrap()[[1, 2]], 1.0);
    }

    #[test]
    fn s_prior_cases() {
        let hot = |l: usize| Array3::from_shape_fn((2, 2, 3), |(_, _, k)| f64::from(u8::from(k == l)));
        let agree = s_prior(&hot(1), &hot(1)).unwrap();
        assert!(agree.iter().all(|&v| (v - 0.25).abs() < 1e-9));
        let eps = 1e-6;
        let mut prior = hot(0);
        for l in 0..3 {
            prior[[0, 1, l]] = if l == 1 { 1.0 - 2.0 * eps } else { eps };
        }
        let m = s_prior(&hot(0), &prior).unwrap();
        assert!(m[[0, 1]] > 0.99);
        assert!((m.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn defect_score_oracle() {
        let cells = arr2(&[[0.7, 0.1], [0.1, 0.1]]);
        let ones = Array2::from_elem((4, 4), 1.0);
        let s = defect_score(Some(&cells), &ones, 0.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if y < 2 && x < 2 { 0.7 } else { 0.1 };
                assert_eq!(s.s[[y, x]], want);
            }
        }
        assert_eq!(s.image_score, 0.7);
        let zero = defect_score(Some(&cells), &Array2::zeros((4, 4)), 1.0).unwrap();
        assert!(zero.s.iter().all(|&v| v == 0.0));
        let uniform = Array2::from_elem((2, 2), 0.25);
        let r = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let s = defect_score(Some(&uniform), &r, 0.0).unwrap();
        assert_eq!(s.s, r.mapv(|v| v * 0.25));
        assert!(defect_score(None, &r, 0.0).unwrap().s_prior_cells.is_none());
    }

    #[test]
    fn smoothing_preserves_constants_and_mass_location() {
        let c = Array2::from_elem((8, 8), 3.0);
        assert!(gaussian_smooth(&c, 1.5).iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let mut d = Array2::zeros((9, 9));
        d[[4, 4]] = 1.0;
        let s = gaussian_smooth(&d, 1.0);
        assert!((s.sum() - 1.0).abs() < 1e-9);
        assert_eq!(s[[4, 3]], s[[4, 5]]);
        assert_eq!(s[[3, 4]], s[[4, 3]]);
    }

    #[test]
    fn threshold_is_strict() {
        let m = arr2(&[[0.1, 0.5], [0.5, 0.9]]);
        assert!(threshold(&m, 0.0).iter().all(|&v| v == 1));
        assert!(threshold(&m, 1.0).iter().all(|&v| v == 0));
        assert_eq!(threshold(&m, 0.5), arr2(&[[0, 0], [0, 1]]));
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            rows: vec![MetricsRow {
                category: "overall".into(),
                image_auroc: 1.0,
                pixel_auroc: 0.5,
                n_images: 2,
                n_pixels: 8,
            }],
            mean_budget_cost: 0.0,
            code_utilization: vec![],
        };
        assert_eq!(
            r.to_csv(),
            "category,image_auroc,pixel_auroc,n_images,n_pixels\noverall,1.000000,0.500000,2,8\n"
        );
    }
}
