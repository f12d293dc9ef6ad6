//! Reconstruction metrics and the two solver experiments.
//!
//! MAE is a plain per-element mean absolute difference. SSIM uses the
//! standard constants `K1 = 0.01`, `K2 = 0.03` on the 8-bit dynamic range
//! with a 7x7 uniform window over valid positions (channel-averaged
//! grayscale input on the `[0, 255]` scale).
//!
//! The alignment experiment inverts each input to noise and integrates
//! back, then measures per-element L1 / RMS distances between matched
//! forward and backward intermediates at every grid point. Distances are
//! unnormalized per-element means, so only the ordering across solver
//! orders is meaningful, not absolute magnitudes.

use ndarray::{Array2, Array3, Dimension};

use crate::backbone::{ConditionedModel, ToyBackbone};
use crate::error::{Error, Result};
use crate::pipeline::default_schedule;
use crate::prompt::build_exceptional;
use crate::solver::{integrate, Direction, LatentState, SolverConfig, Trajectory};

/// Mean absolute difference over all elements.
pub fn mae<D: Dimension>(
    a: &ndarray::Array<f64, D>,
    b: &ndarray::Array<f64, D>,
) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::contract(format!(
            "mae shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::contract("mae of empty arrays"));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_DYNAMIC_RANGE: f64 = 255.0;
pub const SSIM_WINDOW: usize = 7;

/// Mean SSIM over all valid 7x7 windows of two grayscale images on the
/// `[0, 255]` scale.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::input(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE).powi(2);
    let win = SSIM_WINDOW;
    let area = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for dy in 0..win {
                for dx in 0..win {
                    let va = a[[y + dy, x + dx]];
                    let vb = b[[y + dy, x + dx]];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa / area;
            let mu_b = sb / area;
            let var_a = saa / area - mu_a * mu_a;
            let var_b = sbb / area - mu_b * mu_b;
            let cov = sab / area - mu_a * mu_b;
            let val = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Channel-averaged grayscale on the `[0, 255]` scale from a `[-1, 1]` image.
pub fn to_gray_255(image: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut s = 0.0;
        for ch in 0..c {
            s += image[[ch, y, x]];
        }
        (s / c as f64 + 1.0) / 2.0 * 255.0
    })
}

/// Per-image reconstruction row.
#[derive(Debug, Clone)]
pub struct ReconRow {
    pub label: String,
    pub mae: f64,
    pub ssim: f64,
}

/// Reconstruction metrics over a set of runs, with aggregates.
#[derive(Debug, Clone)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

impl ReconReport {
    pub fn from_rows(rows: Vec<ReconRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("reconstruction report needs >= 1 row"));
        }
        let stats = |vals: Vec<f64>| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (mean_mae, std_mae) = stats(rows.iter().map(|r| r.mae).collect());
        let (mean_ssim, std_ssim) = stats(rows.iter().map(|r| r.ssim).collect());
        Ok(ReconReport {
            rows,
            mean_mae,
            std_mae,
            mean_ssim,
            std_ssim,
        })
    }

    /// Coefficient of variation of MAE across rows.
    pub fn mae_cov(&self) -> f64 {
        if self.mean_mae == 0.0 {
            0.0
        } else {
            self.std_mae / self.mean_mae
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,mae,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.12e},{:.12e}\n", r.label, r.mae, r.ssim));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>16} {:>12}\n", "label", "mae", "ssim"));
        for r in &self.rows {
            out.push_str(&format!("{:<16} {:>16.6e} {:>12.6}\n", r.label, r.mae, r.ssim));
        }
        out.push_str(&format!(
            "mean mae {:.6e}  std {:.6e}  cov {:.4}\nmean ssim {:.6}  std {:.6e}\n",
            self.mean_mae,
            self.std_mae,
            self.mae_cov(),
            self.mean_ssim,
            self.std_ssim
        ));
        out
    }
}

/// Per-order alignment curves.
#[derive(Debug, Clone)]
pub struct OrderAlignment {
    pub order: usize,
    /// Per grid point `k = 0..=steps`: mean |enc_k - dec_k|.
    pub per_step_l1: Vec<f64>,
    /// Per grid point: RMS distance.
    pub per_step_l2: Vec<f64>,
    pub mean_l1: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub orders: Vec<OrderAlignment>,
    pub num_inputs: usize,
    pub steps: usize,
}

impl AlignmentReport {
    pub fn order(&self, order: usize) -> Option<&OrderAlignment> {
        self.orders.iter().find(|o| o.order == order)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("order,step,mean_l1,mean_l2\n");
        for o in &self.orders {
            for (k, (l1, l2)) in o.per_step_l1.iter().zip(&o.per_step_l2).enumerate() {
                out.push_str(&format!("{},{},{:.12e},{:.12e}\n", o.order, k, l1, l2));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "alignment over {} inputs, {} steps\n{:<6} {:>16} {:>16}\n",
            self.num_inputs, self.steps, "order", "mean_l1", "mean_l2"
        ));
        for o in &self.orders {
            out.push_str(&format!(
                "{:<6} {:>16.6e} {:>16.6e}\n",
                o.order, o.mean_l1, o.mean_l2
            ));
        }
        out
    }
}

/// Inverts a latent to noise and back under the exceptional prompt.
/// Returns the forward and backward trajectories.
pub fn invert_roundtrip_trajectories(
    backbone: &ToyBackbone,
    latent: &Array3<f64>,
    token_value: u32,
    steps: usize,
    order: usize,
) -> Result<(Trajectory, Trajectory)> {
    let prompt = build_exceptional(
        &backbone.text_encoder,
        token_value,
        backbone.text_encoder.max_len(),
    )?;
    let schedule = default_schedule();
    let fwd = SolverConfig::new(order, steps, Direction::Forward);
    let mut model = ConditionedModel::plain(&backbone.denoiser, &prompt);
    let (noise, enc) = integrate(
        LatentState::new(latent.clone(), 0),
        &mut model,
        &schedule,
        &fwd,
        &mut [],
    )?;
    let bwd = SolverConfig::new(order, steps, Direction::Backward);
    let mut model = ConditionedModel::plain(&backbone.denoiser, &prompt);
    let (_, dec) = integrate(noise, &mut model, &schedule, &bwd, &mut [])?;
    Ok((enc, dec))
}

/// Round-trip reconstruction of an image: encode, invert, integrate back,
/// decode. Returns the reconstructed image.
pub fn reconstruct_image(
    backbone: &ToyBackbone,
    image: &Array3<f64>,
    token_value: u32,
    steps: usize,
    order: usize,
) -> Result<Array3<f64>> {
    let latent = backbone.autoencoder.encode(image)?;
    let (_, dec) = invert_roundtrip_trajectories(backbone, &latent, token_value, steps, order)?;
    let final_state = dec.states.last().expect("trajectory non-empty");
    backbone.autoencoder.decode(&final_state.data)
}

/// Forward/backward trajectory alignment over a set of latents.
///
/// Inputs with non-finite trajectories are excluded with a warning (they
/// count toward neither order).
pub fn trajectory_alignment(
    backbone: &ToyBackbone,
    latents: &[Array3<f64>],
    orders: &[usize],
    steps: usize,
) -> Result<AlignmentReport> {
    if latents.is_empty() {
        return Err(Error::input("alignment needs >= 1 input"));
    }
    let token = 7788;
    let mut result = Vec::new();
    for &order in orders {
        let mut per_step_l1 = vec![0.0; steps + 1];
        let mut per_step_l2 = vec![0.0; steps + 1];
        let mut used = 0usize;
        for (i, latent) in latents.iter().enumerate() {
            let pair = invert_roundtrip_trajectories(backbone, latent, token, steps, order);
            let (enc, dec) = match pair {
                Ok(p) => p,
                Err(Error::Numerical { step, message }) => {
                    eprintln!("warning: input {i} excluded at order {order}: step {step}: {message}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            for k in 0..=steps {
                let a = &enc.at_grid_point(k).data;
                let b = &dec.at_grid_point(k).data;
                let n = a.len() as f64;
                let l1 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / n;
                let l2 = (a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt();
                per_step_l1[k] += l1;
                per_step_l2[k] += l2;
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::numerical(0, format!("all inputs diverged at order {order}")));
        }
        for v in per_step_l1.iter_mut().chain(per_step_l2.iter_mut()) {
            *v /= used as f64;
        }
        let mean_l1 = per_step_l1.iter().sum::<f64>() / per_step_l1.len() as f64;
        let mean_l2 = per_step_l2.iter().sum::<f64>() / per_step_l2.len() as f64;
        result.push(OrderAlignment {
            order,
            per_step_l1,
            per_step_l2,
            mean_l1,
            mean_l2,
        });
    }
    Ok(AlignmentReport {
        orders: result,
        num_inputs: latents.len(),
        steps,
    })
}

/// Round-trip reconstruction metrics across a list of token values.
pub fn token_sweep(
    backbone: &ToyBackbone,
    image: &Array3<f64>,
    token_values: &[u32],
    steps: usize,
    order: usize,
) -> Result<ReconReport> {
    if token_values.is_empty() {
        return Err(Error::input("token sweep needs >= 1 value"));
    }
    let gray_orig = to_gray_255(image);
    let mut rows = Vec::with_capacity(token_values.len());
    for &token in token_values {
        let recon = reconstruct_image(backbone, image, token, steps, order)?;
        let m = mae(image, &recon)?;
        let s = ssim(&gray_orig, &to_gray_255(&recon))?;
        rows.push(ReconRow {
            label: token.to_string(),
            mae: m,
            ssim: s,
        });
    }
    ReconReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    #[test]
    fn mae_basic_cases() {
        let a = Array1::from(vec![0.0, 1.0]);
        let b = Array1::from(vec![1.0, 1.0]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &b).unwrap(), 0.5);
        let zeros = Array2::<f64>::zeros((3, 3));
        let ones = Array2::from_elem((3, 3), 1.0);
        assert_eq!(mae(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
    }

    #[test]
    fn mae_rejects_shape_mismatch() {
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((2, 3));
        assert!(mae(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let img = Array2::from_shape_fn((12, 12), |(y, x)| ((y * 13 + x * 7) % 251) as f64);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let img = Array2::from_shape_fn((16, 16), |(y, x)| {
            if (y + x) % 2 == 0 { 255.0 } else { 0.0 }
        });
        let inv = img.mapv(|v| 255.0 - v);
        assert!(ssim(&img, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_approaches_one_as_perturbation_shrinks() {
        let img = Array2::from_shape_fn((16, 16), |(y, x)| 100.0 + (y as f64) * 3.0 + x as f64);
        let mut last = -1.0;
        for eps in [8.0, 4.0, 2.0, 1.0, 0.5] {
            let pert = img.mapv(|v| v + eps);
            let s = ssim(&img, &pert).unwrap();
            assert!(s > last, "ssim not monotone on eps ladder");
            last = s;
        }
        assert!(last > 0.99);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = Array2::<f64>::zeros((6, 6));
        assert!(matches!(ssim(&img, &img), Err(Error::Input(_))));
    }

    #[test]
    fn single_token_sweep_has_zero_std() {
        let backbone = crate::backbone::init_toy(0, crate::backbone::ToyDims {
            image_size: 16,
            ..Default::default()
        });
        let image = crate::image_io::toy_image(11, 16, 16);
        let report = token_sweep(&backbone, &image, &[7788], 4, 1).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.std_mae, 0.0);
        assert_eq!(report.mae_cov(), 0.0);
    }

    #[test]
    fn alignment_single_step_yields_one_pair_per_grid_point() {
        let backbone = crate::backbone::init_toy(0, crate::backbone::ToyDims {
            image_size: 16,
            ..Default::default()
        });
        let latent = crate::pipeline::seeded_noise((12, 8, 8), 5) * 0.1;
        let report = trajectory_alignment(&backbone, &[latent], &[1], 1).unwrap();
        assert_eq!(report.orders[0].per_step_l1.len(), 2);
        // Endpoint pair is identical by construction.
        assert_eq!(report.orders[0].per_step_l1[1], 0.0);
    }
}
