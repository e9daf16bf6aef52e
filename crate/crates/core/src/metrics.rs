//! Image quality (PSNR, SSIM) and trajectory accuracy (ATE after similarity
//! alignment).

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::lie::{Pose, TrajectorySpline};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const C1: f64 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
const C2: f64 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
    #[error("duplicate image id {0} in trajectory")]
    DuplicateId(u32),
    #[error("trajectory ids differ")]
    IdMismatch,
    #[error("need at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("camera centers are coincident or collinear")]
    DegenerateGeometry,
}

fn check_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricsError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(a.width(), a.height(), b.width(), b.height()))
    }
}

/// `10 log10(1 / MSE)` for intensities in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable filtering of a single-channel `w x h` plane. `valid` keeps only
/// positions where the window fits; otherwise the output has the input size
/// and the input is zero-padded.
fn filter(plane: &[f64], w: usize, h: usize, valid: bool) -> (Vec<f64>, usize, usize) {
    let k = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let (ow, oh) = if valid { (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW) } else { (w, h) };
    // Output column x reads input columns x + j - off.
    let off = if valid { 0 } else { half as isize };
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = x as isize + j as isize - off;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * src[sx as usize];
                }
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = y as isize + j as isize - off;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * rows[sy as usize * ow + x];
                }
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Local statistics of one channel pair.
struct Stats {
    mx: Vec<f64>,
    my: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize, valid: bool) -> Stats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter(x, w, h, valid).0;
    let my = filter(y, w, h, valid).0;
    let mut sxx = filter(&xx, w, h, valid).0;
    let mut syy = filter(&yy, w, h, valid).0;
    let mut sxy = filter(&xy, w, h, valid).0;
    for i in 0..mx.len() {
        sxx[i] -= mx[i] * mx[i];
        syy[i] -= my[i] * my[i];
        sxy[i] -= mx[i] * my[i];
    }
    Stats { mx, my, sxx, syy, sxy }
}

fn ssim_value(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
}

/// Mean SSIM over every position where the full window fits, averaged over
/// channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(w, h));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let s = stats(&a.channel(c), &b.channel(c), w, h, true);
        for i in 0..s.mx.len() {
            sum += ssim_value(s.mx[i], s.my[i], s.sxx[i], s.syy[i], s.sxy[i]);
        }
        count += s.mx.len();
    }
    Ok(sum / count as f64)
}

/// Mean SSIM with zero-padded windows (defined for any size) and its
/// gradient w.r.t. `a`.
///
/// Written as `S = r1 * r2` with `r1 = 1 - dm^2 / b1` and `r2 = 1 - D / b2`,
/// where `dm` is the local mean of `e = a - b` and `D` its local variance, so
/// the value is exactly 1 and the gradient exactly 0 wherever `a == b`.
pub fn ssim_padded_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer), MetricsError> {
    check_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    let n = (w * h * 3) as f64;
    let mut sum = 0.0;
    let mut grad = ImageBuffer::new(w, h);
    for c in 0..3 {
        let x = a.channel(c);
        let y = b.channel(c);
        let e: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
        let ee: Vec<f64> = e.iter().map(|v| v * v).collect();
        let s = stats(&x, &y, w, h, false);
        let dm = filter(&e, w, h, false).0;
        let mee = filter(&ee, w, h, false).0;
        let len = s.mx.len();
        // Per-window coefficients of w_p, w_p * e_p and w_p * x_p in dS/dx_p.
        let (mut k_one, mut k_e, mut k_x) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for i in 0..len {
            let (mx, my, d) = (s.mx[i], s.my[i], dm[i]);
            let var_e = mee[i] - d * d;
            let b1 = mx * mx + my * my + C1;
            let b2 = s.sxx[i] + s.syy[i] + C2;
            let r1 = 1.0 - d * d / b1;
            let r2 = 1.0 - var_e / b2;
            sum += r1 * r2;
            let dr1 = -2.0 * d / b1 + 2.0 * d * d * mx / (b1 * b1);
            let dr2 = 2.0 * d / b2 - 2.0 * var_e * mx / (b2 * b2);
            k_one[i] = (r2 * dr1 + r1 * dr2) / n;
            k_e[i] = -2.0 * r1 / b2 / n;
            k_x[i] = 2.0 * r1 * var_e / (b2 * b2) / n;
        }
        // The zero-padded symmetric filter is self-adjoint.
        let g_one = filter(&k_one, w, h, false).0;
        let g_e = filter(&k_e, w, h, false).0;
        let g_x = filter(&k_x, w, h, false).0;
        let out = grad.data_mut();
        for i in 0..len {
            out[3 * i + c] = g_one[i] + e[i] * g_e[i] + x[i] * g_x[i];
        }
    }
    Ok((sum / n, grad))
}

/// Camera poses keyed by unique image id, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(u32, Pose)>,
}

impl Trajectory {
    pub fn new(mut entries: Vec<(u32, Pose)>) -> Result<Self, MetricsError> {
        entries.sort_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(MetricsError::DuplicateId(w[0].0));
        }
        Ok(Trajectory { entries })
    }

    pub fn entries(&self) -> &[(u32, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| p.camera_center()).collect()
    }
}

/// Which poses of each exposure enter the ATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AteMode {
    /// Exposure start and end; entry ids are `2 * image_id` and `2 * image_id + 1`.
    #[default]
    StartEnd,
    /// Mid-exposure pose only; entry id is the image id.
    Mid,
}

/// Samples per-image trajectories into a pose list for [`ate`].
pub fn exposure_poses(trajs: &[(u32, TrajectorySpline)], mode: AteMode) -> Result<Trajectory, crate::lie::LieError> {
    let mut entries = Vec::new();
    for (id, t) in trajs {
        match mode {
            AteMode::StartEnd => {
                entries.push((2 * id, t.pose_at(0.0)?));
                entries.push((2 * id + 1, t.pose_at(1.0)?));
            }
            AteMode::Mid => entries.push((*id, t.pose_at(0.5)?)),
        }
    }
    // Ids are unique by construction when image ids are.
    Ok(Trajectory::new(entries).unwrap_or_default())
}

/// Least-squares similarity `dst ≈ s R src + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }
}

/// Closed-form Procrustes-with-scale alignment of `src` onto `dst`.
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity, MetricsError> {
    let n = src.len();
    if n < 3 {
        return Err(MetricsError::TooFewPoses(n));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut scatter_d = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        scatter_d += cd * cd.transpose();
        var_s += cs.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;
    let sv = scatter_d.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 1e-24 || sv[1] <= 1e-12 * sv[0] || var_s <= 1e-24 {
        return Err(MetricsError::DegenerateGeometry);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    /// Aligned center distance per entry, in id order.
    pub errors: Vec<f64>,
    pub alignment: Similarity,
}

/// Positional ATE of camera centers after similarity alignment of `est`
/// onto `gt`; in units of `gt`.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<AteResult, MetricsError> {
    if est.len() != gt.len() || est.entries.iter().zip(&gt.entries).any(|(a, b)| a.0 != b.0) {
        return Err(MetricsError::IdMismatch);
    }
    let (src, dst) = (est.centers(), gt.centers());
    let alignment = align_similarity(&src, &dst)?;
    let errors: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (alignment.apply(s) - d).norm()).collect();
    let n = errors.len() as f64;
    Ok(AteResult {
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errors.iter().sum::<f64>() / n,
        errors,
        alignment,
    })
}

/// Key-value metrics: per-image records followed by aggregates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub per_image: Vec<(u32, Vec<(String, f64)>)>,
    pub aggregates: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn add_image(&mut self, id: u32, values: Vec<(String, f64)>) {
        self.per_image.push((id, values));
    }

    pub fn add_aggregate(&mut self, key: &str, value: f64) {
        self.aggregates.push((key.to_string(), value));
    }

    pub fn aggregate(&self, key: &str) -> Option<f64> {
        self.aggregates.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Mean of a per-image metric.
    pub fn mean_of(&self, key: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_image
            .iter()
            .filter_map(|(_, kv)| kv.iter().find(|(k, _)| k == key).map(|(_, v)| *v))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// One `image=<id> key=value ...` line per image, then `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, kv) in &self.per_image {
            let _ = write!(s, "image={id}");
            for (k, v) in kv {
                let _ = write!(s, " {k}={v}");
            }
            s.push('\n');
        }
        for (k, v) in &self.aggregates {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Inverse of [`MetricsReport::to_text`]; unparsable lines are skipped.
    pub fn parse(text: &str) -> Self {
        let mut r = MetricsReport::default();
        for line in text.lines() {
            let pairs: Vec<(&str, &str)> = line.split_whitespace().filter_map(|t| t.split_once('=')).collect();
            match pairs.split_first() {
                Some((("image", id), rest)) => {
                    if let Ok(id) = id.parse() {
                        let kv = rest.iter().filter_map(|(k, v)| Some((k.to_string(), v.parse().ok()?))).collect();
                        r.per_image.push((id, kv));
                    }
                }
                Some(((k, v), [])) => {
                    if let Ok(v) = v.parse() {
                        r.aggregates.push((k.to_string(), v));
                    }
                }
                _ => {}
            }
        }
        r
    }
}
