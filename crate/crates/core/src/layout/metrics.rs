//! SSIM / PSNR and the per-axis slice-similarity analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::QuantizedKv;
use crate::layout::plan::PlaneRef;
use crate::layout::tiling::to_sample;

const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
const WINDOW: usize = 8;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_extents(a: PlaneRef<'_>, b: PlaneRef<'_>) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::invalid(format!(
            "plane extents differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.data.len() != a.width * a.height || a.data.is_empty() {
        return Err(Error::invalid("plane data does not match its extents"));
    }
    Ok(())
}

/// Mean SSIM over non-overlapping 8×8 windows (edge windows are clipped).
pub fn ssim(a: PlaneRef<'_>, b: PlaneRef<'_>) -> Result<f64> {
    check_extents(a, b)?;
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in (0..h).step_by(WINDOW) {
        for x0 in (0..w).step_by(WINDOW) {
            let (y1, x1) = ((y0 + WINDOW).min(h), (x0 + WINDOW).min(w));
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let va = a.data[y * w + x] as f64;
                    let vb = b.data[y * w + x] as f64;
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

pub fn mse(a: PlaneRef<'_>, b: PlaneRef<'_>) -> Result<f64> {
    check_extents(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(255² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: PlaneRef<'_>, b: PlaneRef<'_>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / m).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Token,
    Layer,
    Head,
    Dim,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Token, Axis::Layer, Axis::Head, Axis::Dim];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Token => "token",
            Axis::Layer => "layer",
            Axis::Head => "head",
            Axis::Dim => "dim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSimilarity {
    pub axis: Axis,
    pub pairs: usize,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
}

/// Mean SSIM/PSNR between consecutive slices along each axis.
///
/// A slice along one axis is imaged as a plane whose rows run over the first
/// remaining axis and whose columns flatten the other two.
pub fn dimension_similarity_report(q: &QuantizedKv) -> Result<Vec<AxisSimilarity>> {
    let s = q.shape();
    let extents = [s.tokens, s.layers, s.heads, s.head_dim];
    if extents.iter().any(|&e| e < 2) {
        return Err(Error::invalid(format!(
            "similarity analysis needs every extent >= 2, got {extents:?}"
        )));
    }
    let strides = [s.layers * s.heads * s.head_dim, s.heads * s.head_dim, s.head_dim, 1];
    let values = q.values();

    Axis::ALL
        .iter()
        .enumerate()
        .map(|(ai, &axis)| {
            let rest: Vec<usize> = (0..4).filter(|&k| k != ai).collect();
            let height = extents[rest[0]];
            let width = extents[rest[1]] * extents[rest[2]];
            let image = |i: usize| -> Vec<u8> {
                let mut out = Vec::with_capacity(height * width);
                for r in 0..height {
                    for m in 0..extents[rest[1]] {
                        for n in 0..extents[rest[2]] {
                            let idx = i * strides[ai]
                                + r * strides[rest[0]]
                                + m * strides[rest[1]]
                                + n * strides[rest[2]];
                            out.push(to_sample(values[idx]));
                        }
                    }
                }
                out
            };
            let (mut ssim_sum, mut psnr_sum) = (0.0, 0.0);
            let mut prev = image(0);
            for i in 1..extents[ai] {
                let cur = image(i);
                let pa = PlaneRef { width, height, data: &prev };
                let pb = PlaneRef { width, height, data: &cur };
                ssim_sum += ssim(pa, pb)?;
                psnr_sum += psnr(pa, pb)?;
                prev = cur;
            }
            let pairs = extents[ai] - 1;
            Ok(AxisSimilarity {
                axis,
                pairs,
                mean_ssim: ssim_sum / pairs as f64,
                mean_psnr: psnr_sum / pairs as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{gen_synthetic_kv, quantize, KvShape};

    fn plane(w: usize, h: usize, data: &[u8]) -> PlaneRef<'_> {
        PlaneRef { width: w, height: h, data }
    }

    /// Direct single-window SSIM used as an independent reference.
    fn ssim_whole(a: &[u8], b: &[u8]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let va = a.iter().map(|&v| (v as f64 - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|&v| (v as f64 - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum::<f64>() / n;
        ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
    }

    #[test]
    fn identical_planes() {
        let d: Vec<u8> = (0..64).map(|i| (i * 3) as u8).collect();
        assert!((ssim(plane(8, 8, &d), plane(8, 8, &d)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(plane(8, 8, &d), plane(8, 8, &d)).unwrap(), 99.0);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = vec![0u8; 64];
        let b = vec![16u8; 64];
        assert_eq!(mse(plane(8, 8, &a), plane(8, 8, &b)).unwrap(), 256.0);
        let p = psnr(plane(8, 8, &a), plane(8, 8, &b)).unwrap();
        assert!((p - 24.0484).abs() < 1e-3, "{p}");
    }

    #[test]
    fn negated_plane_has_negative_ssim() {
        let a: Vec<u8> = (0..64).map(|i| 100 + ((i * 7) % 50) as u8).collect();
        let mean = a.iter().map(|&v| v as i32).sum::<i32>() / 64;
        let b: Vec<u8> = a.iter().map(|&v| (2 * mean - v as i32) as u8).collect();
        let s = ssim(plane(8, 8, &a), plane(8, 8, &b)).unwrap();
        assert!(s < 0.0);
        assert!((s - ssim_whole(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn windows_average_and_clip() {
        let a: Vec<u8> = (0..12 * 10).map(|i| (i * 13 % 251) as u8).collect();
        let b: Vec<u8> = (0..12 * 10).map(|i| (i * 17 % 241) as u8).collect();
        let got = ssim(plane(12, 10, &a), plane(12, 10, &b)).unwrap();
        let mut sum = 0.0;
        for (y0, y1) in [(0, 8), (8, 10)] {
            for (x0, x1) in [(0, 8), (8, 12)] {
                let pick = |v: &[u8]| {
                    let mut o = Vec::new();
                    for y in y0..y1 {
                        o.extend_from_slice(&v[y * 12 + x0..y * 12 + x1]);
                    }
                    o
                };
                sum += ssim_whole(&pick(&a), &pick(&b));
            }
        }
        assert!((got - sum / 4.0).abs() < 1e-12);
    }

    #[test]
    fn extent_mismatch_rejected() {
        let a = vec![0u8; 16];
        assert!(ssim(plane(4, 4, &a), plane(8, 2, &a)).is_err());
        assert!(psnr(plane(4, 4, &a), plane(2, 8, &a)).is_err());
    }

    #[test]
    fn token_axis_perfect_when_fully_smooth() {
        let kv = gen_synthetic_kv(KvShape::new(6, 3, 4, 16).unwrap(), 1.0, 2).unwrap();
        let r = dimension_similarity_report(&quantize(&kv, 16).unwrap()).unwrap();
        assert_eq!(r[0].axis, Axis::Token);
        assert!((r[0].mean_ssim - 1.0).abs() < 1e-12);
        assert_eq!(r[0].mean_psnr, 99.0);
    }

    #[test]
    fn token_axis_wins_at_high_smoothness() {
        let kv = gen_synthetic_kv(KvShape::new(64, 6, 8, 32).unwrap(), 0.9, 4).unwrap();
        let r = dimension_similarity_report(&quantize(&kv, 32).unwrap()).unwrap();
        let best = r.iter().max_by(|a, b| a.mean_ssim.total_cmp(&b.mean_ssim)).unwrap();
        assert_eq!(best.axis, Axis::Token, "{r:?}");
        let best_psnr = r.iter().max_by(|a, b| a.mean_psnr.total_cmp(&b.mean_psnr)).unwrap();
        assert_eq!(best_psnr.axis, Axis::Token);
    }

    #[test]
    fn rough_tokens_look_like_fresh_noise() {
        let shape = KvShape::new(32, 3, 8, 32).unwrap();
        let q = quantize(&gen_synthetic_kv(shape, 0.0, 10).unwrap(), 32).unwrap();
        let token = dimension_similarity_report(&q).unwrap()[0].mean_ssim;
        // token t of this cache against token t of an independently seeded one
        let other = quantize(&gen_synthetic_kv(shape, 0.0, 11).unwrap(), 32).unwrap();
        let mut reference = 0.0;
        for t in 0..32 {
            let pa: Vec<u8> = (0..3).flat_map(|l| q.row(t, l).iter().map(|&v| to_sample(v))).collect();
            let pb: Vec<u8> = (0..3).flat_map(|l| other.row(t, l).iter().map(|&v| to_sample(v))).collect();
            reference += ssim(plane(256, 3, &pa), plane(256, 3, &pb)).unwrap() / 32.0;
        }
        assert!((token - reference).abs() <= 0.05, "token {token} reference {reference}");
    }

    #[test]
    fn head_relabeling_keeps_token_scores() {
        let kv = gen_synthetic_kv(KvShape::new(8, 3, 4, 8).unwrap(), 0.6, 6).unwrap();
        let q = quantize(&kv, 8).unwrap();
        let s = q.shape();
        let perm = [2usize, 0, 3, 1];
        let mut values = vec![0i8; s.len()];
        for t in 0..s.tokens {
            for l in 0..s.layers {
                for h in 0..s.heads {
                    for d in 0..s.head_dim {
                        values[s.index(t, l, perm[h], d)] = q.get(t, l, h, d);
                    }
                }
            }
        }
        let scales = (0..s.layers)
            .flat_map(|l| (0..s.heads).map(move |h| (l, h)))
            .map(|(l, h)| q.scale_for(l, perm.iter().position(|&p| p == h).unwrap() * 8))
            .collect();
        let relabeled = QuantizedKv::new(s, 8, values, scales).unwrap();
        let a = dimension_similarity_report(&q).unwrap();
        let b = dimension_similarity_report(&relabeled).unwrap();
        assert!((a[0].mean_ssim - b[0].mean_ssim).abs() < 1e-9);
        assert!((a[0].mean_psnr - b[0].mean_psnr).abs() < 1e-9);
    }

    #[test]
    fn tiny_extents_rejected() {
        let kv = gen_synthetic_kv(KvShape::new(1, 3, 2, 2).unwrap(), 0.5, 0).unwrap();
        assert!(dimension_similarity_report(&quantize(&kv, 2).unwrap()).is_err());
    }
}
