//! End-to-end composition: invert main and reference under the exceptional
//! prompt, merge the inverted noises, then integrate three coordinated ODEs
//! back to an image with composite-attention injection and background
//! rectification.
//!
//! The starting point in `NoiseSpace` mode is
//!
//! ```text
//! x*_T = x_r_T . M_seg + x_m_T . (1 - M_user) + z . (M_user xor M_seg)
//! ```
//!
//! with `z` seeded per job. `LatentPaste` mode instead pastes the encoded
//! reference into the encoded main by the segmentation mask at time 0 and
//! inverts the pasted latent once; it suits photorealistic pairs while the
//! noise-space merge suits cross-domain pairs.
//!
//! During the backward stage the two reconstruction ODEs run first,
//! recording per-layer self-attention features and maps for every window
//! step; the composition ODE then consumes the prepared overrides step by
//! step, so its step `t` never reads records younger than `t`. While
//! `t > floor(tau_B * N)` the freshly stepped state is rectified toward the
//! main reconstruction outside the user mask:
//! `x_hat = x* . M_user + x_m . (1 - M_user)`.
//!
//! When no prompt text is given the composition ODE falls back to the
//! exceptional prompt without guidance (the only information-free choice);
//! with a prompt it runs guided: `s * eps(normal) + (1 - s) * eps(null)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    build_index_map, build_override_schedule, AttentionOverride, AttentionRecordStore,
    ComposeOptions, InjectionWindow,
};
use crate::backbone::{ConditionedModel, Conditioning, Injector, Recorder, ToyBackbone};
use crate::dump::{write_attention_dump, write_trajectory, AttentionBlockDump};
use crate::error::{Error, Result};
use crate::image_io::{load_image, load_mask, save_image};
use crate::preprocess::{downsample_mask, place_reference, Mask, MaskKind, MaskResolution};
use crate::prompt::{build_exceptional, build_normal, build_null};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::solver::{
    integrate, ode_step, Direction, LatentState, SolverConfig, SolverHistory, Trajectory,
};

/// Train-step count and beta range of the built-in schedule.
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_RANGE: (f64, f64) = (1e-4, 0.02);

pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_RANGE)
        .expect("built-in schedule parameters are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    NoiseSpace,
    LatentPaste,
}

impl StartMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StartMode::NoiseSpace => "noise_space",
            StartMode::LatentPaste => "latent_paste",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise_space" => Ok(StartMode::NoiseSpace),
            "latent_paste" => Ok(StartMode::LatentPaste),
            other => Err(Error::config(format!("unknown start_mode '{other}'"))),
        }
    }
}

/// All knobs of one composition run.
#[derive(Debug, Clone)]
pub struct CompositionConfig {
    pub steps: usize,
    pub order: usize,
    pub tau_a: f64,
    pub tau_b: f64,
    pub cfg_scale: f64,
    pub token_value: u32,
    pub start_mode: StartMode,
    pub inject_values: bool,
    pub renormalize_rows: bool,
    pub reverse_cross: bool,
    pub seed: u64,
    /// Row count of the exceptional prompt embedding.
    pub prompt_max_len: usize,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            steps: 20,
            order: 2,
            tau_a: 0.4,
            tau_b: 0.0,
            cfg_scale: 2.5,
            token_value: 7788,
            start_mode: StartMode::NoiseSpace,
            inject_values: false,
            renormalize_rows: false,
            reverse_cross: false,
            seed: 0,
            prompt_max_len: 77,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::config(format!("order must be 1..=3, got {}", self.order)));
        }
        if self.steps < self.order {
            return Err(Error::config(format!(
                "steps ({}) must be >= order ({})",
                self.steps, self.order
            )));
        }
        for (name, v) in [("tau_a", self.tau_a), ("tau_b", self.tau_b)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::config("cfg_scale must be >= 0"));
        }
        if self.prompt_max_len == 0 {
            return Err(Error::config("prompt.max_length must be >= 1"));
        }
        Ok(())
    }
}

/// A file-based composition job (the CLI surface).
#[derive(Debug, Clone)]
pub struct CompositionJob {
    pub main_image: PathBuf,
    pub reference_image: PathBuf,
    pub seg_mask: PathBuf,
    pub user_mask: PathBuf,
    pub prompt: Option<String>,
    pub config: CompositionConfig,
    pub output: PathBuf,
    pub report: Option<PathBuf>,
    pub dump_trajectory: Option<PathBuf>,
    pub dump_attention: Option<PathBuf>,
}

/// In-memory composition inputs.
#[derive(Debug, Clone)]
pub struct ComposeInputs {
    /// Main image `(3, H, W)` in `[-1, 1]`.
    pub main: Array3<f64>,
    /// Reference image (own frame; placed during preprocessing).
    pub reference: Array3<f64>,
    /// Object silhouette in the reference frame.
    pub seg_mask: Mask,
    /// Region of interest in the main frame.
    pub user_mask: Mask,
    pub prompt: Option<String>,
}

/// Everything a composition run produces.
pub struct ComposeOutcome {
    pub image: Array3<f64>,
    pub final_latent: Array3<f64>,
    pub main_reconstruction_latent: Array3<f64>,
    pub main_reconstruction_image: Array3<f64>,
    pub composition_trajectory: Trajectory,
    pub override_schedule: BTreeMap<usize, AttentionOverride>,
    pub report: RunReport,
}

/// Flat key-value run report; rendered as `key = value` lines in insertion
/// order, so identical runs serialize byte-identically.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    lines: Vec<(String, String)>,
}

impl RunReport {
    pub fn new() -> Self {
        RunReport::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.lines.push((key.into(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Merges inverted noises with fresh noise over the mask partition:
/// reference inside the segmentation mask, main outside the user mask,
/// `z` in the transition band (the mask XOR).
pub fn incorporate_noise(
    x_main: &Array3<f64>,
    x_ref: &Array3<f64>,
    z: &Array3<f64>,
    user_mask: &Mask,
    seg_mask: &Mask,
) -> Result<Array3<f64>> {
    let dim = x_main.dim();
    if x_ref.dim() != dim || z.dim() != dim {
        return Err(Error::contract(format!(
            "latent shapes differ: main {:?}, ref {:?}, z {:?}",
            dim,
            x_ref.dim(),
            z.dim()
        )));
    }
    let (_, h, w) = dim;
    if user_mask.dim() != (h, w) || seg_mask.dim() != (h, w) {
        return Err(Error::contract(format!(
            "mask resolution {:?}/{:?} does not match latent {h}x{w}",
            user_mask.dim(),
            seg_mask.dim()
        )));
    }
    if !seg_mask.is_subset_of(user_mask) {
        return Err(Error::contract(
            "segmentation mask must be contained in the user mask",
        ));
    }
    let user = user_mask.to_f64();
    let seg = seg_mask.to_f64();
    let mut out = Array3::zeros(dim);
    for ((c, y, x), v) in out.indexed_iter_mut() {
        let u = user[[y, x]];
        let s = seg[[y, x]];
        *v = x_ref[[c, y, x]] * s + x_main[[c, y, x]] * (1.0 - u) + z[[c, y, x]] * (u - s);
    }
    Ok(out)
}

/// Replaces everything outside the user mask with the main-reconstruction
/// state: `x* . M_user + x_m . (1 - M_user)`. Window gating is the caller's
/// job (`InjectionWindow` with `tau_B`).
pub fn rectify_background(
    x_star: &Array3<f64>,
    x_main: &Array3<f64>,
    user_mask: &Mask,
) -> Result<Array3<f64>> {
    let dim = x_star.dim();
    if x_main.dim() != dim {
        return Err(Error::contract(format!(
            "latent shapes differ: {:?} vs {:?}",
            dim,
            x_main.dim()
        )));
    }
    let (_, h, w) = dim;
    if user_mask.dim() != (h, w) {
        return Err(Error::contract(format!(
            "mask resolution {:?} does not match latent {h}x{w}",
            user_mask.dim()
        )));
    }
    let user = user_mask.to_f64();
    let mut out = Array3::zeros(dim);
    for ((c, y, x), v) in out.indexed_iter_mut() {
        let u = user[[y, x]];
        *v = x_star[[c, y, x]] * u + x_main[[c, y, x]] * (1.0 - u);
    }
    Ok(out)
}

/// Seeded standard-normal latent.
pub fn seeded_noise(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let dist = Normal::new(0.0, 1.0).unwrap();
    Array3::from_shape_fn(dim, |_| dist.sample(&mut rng))
}

fn echo_config(report: &mut RunReport, config: &CompositionConfig, prompt: &Option<String>) {
    report.push("steps", config.steps.to_string());
    report.push("order", config.order.to_string());
    report.push("tau_a", format!("{}", config.tau_a));
    report.push("tau_b", format!("{}", config.tau_b));
    report.push("cfg_scale", format!("{}", config.cfg_scale));
    report.push("start_mode", config.start_mode.as_str());
    report.push("inject_values", config.inject_values.to_string());
    report.push("renormalize_rows", config.renormalize_rows.to_string());
    report.push("reverse_cross", config.reverse_cross.to_string());
    report.push("seed", config.seed.to_string());
    report.push(
        "prompt.text",
        prompt.clone().unwrap_or_else(|| String::from("")),
    );
    report.push("prompt.exceptional_token", config.token_value.to_string());
    report.push("prompt.max_length", config.prompt_max_len.to_string());
}

fn mean_abs(a: &Array3<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64
}

/// Runs the full composition on in-memory inputs.
pub fn compose(
    backbone: &ToyBackbone,
    inputs: &ComposeInputs,
    config: &CompositionConfig,
) -> Result<ComposeOutcome> {
    config.validate()?;
    let (c3, h, w) = inputs.main.dim();
    if c3 != 3 {
        return Err(Error::input(format!("main image must have 3 channels, got {c3}")));
    }
    if inputs.user_mask.dim() != (h, w) {
        return Err(Error::input(format!(
            "user mask {:?} does not match main image {h}x{w}",
            inputs.user_mask.dim()
        )));
    }
    let (_, rh, rw) = inputs.reference.dim();
    if inputs.seg_mask.dim() != (rh, rw) {
        return Err(Error::input(format!(
            "segmentation mask {:?} does not match reference image {rh}x{rw}",
            inputs.seg_mask.dim()
        )));
    }

    let mut report = RunReport::new();
    echo_config(&mut report, config, &inputs.prompt);
    report.push("backbone_seed", backbone.seed.to_string());
    report.push("backbone_checksum", format!("{:016x}", backbone.checksum()));

    // Stage: preprocessing.
    let (placed_image, placed_seg) =
        if inputs.seg_mask.is_empty_mask() && inputs.user_mask.is_empty_mask() {
            if inputs.reference.dim() != inputs.main.dim() {
                return Err(Error::input(
                    "with empty masks the reference must already match the main image size",
                ));
            }
            report.push("placement", "skipped (empty masks)");
            (
                inputs.reference.clone(),
                Mask::zeros((h, w), MaskKind::Segmentation, MaskResolution::Pixel),
            )
        } else {
            let placed = place_reference(&inputs.reference, &inputs.seg_mask, &inputs.user_mask)
                .map_err(|e| stage_error("preprocess", e))?;
            let (top, left, bh, bw) = placed.placement_box;
            report.push("placement", format!("box top={top} left={left} h={bh} w={bw}"));
            (placed.image, placed.seg_mask)
        };

    // Stage: encoding.
    let x_m0 = backbone
        .autoencoder
        .encode(&inputs.main)
        .map_err(|e| stage_error("encode", e))?;
    let x_r0 = backbone
        .autoencoder
        .encode(&placed_image)
        .map_err(|e| stage_error("encode", e))?;
    let (lc, lh, lw) = x_m0.dim();
    report.push("latent_shape", format!("{lc}x{lh}x{lw}"));

    let user_lat = downsample_mask(&inputs.user_mask, (lh, lw))?;
    let seg_lat = downsample_mask(&placed_seg, (lh, lw))?;
    if !seg_lat.is_subset_of(&user_lat) {
        return Err(Error::contract(
            "latent segmentation mask escapes the latent user mask",
        ));
    }

    let w_prompt = build_exceptional(
        &backbone.text_encoder,
        config.token_value,
        config.prompt_max_len,
    )?;
    let schedule = default_schedule();
    let steps = config.steps;
    let grid = TimeGrid::uniform(schedule.num_train_steps(), steps)?;
    let train_end = grid.train_index(steps);

    // Stage: inversion (forward ODEs under the exceptional prompt, no CFG).
    let fwd_cfg = SolverConfig::new(config.order, steps, Direction::Forward);
    let mut model = ConditionedModel::plain(&backbone.denoiser, &w_prompt);
    let (x_m_noise, _) = integrate(
        LatentState::new(x_m0.clone(), 0),
        &mut model,
        &schedule,
        &fwd_cfg,
        &mut [],
    )
    .map_err(|e| stage_error("invert-main", e))?;
    let mut model = ConditionedModel::plain(&backbone.denoiser, &w_prompt);
    let (x_r_noise, _) = integrate(
        LatentState::new(x_r0.clone(), 0),
        &mut model,
        &schedule,
        &fwd_cfg,
        &mut [],
    )
    .map_err(|e| stage_error("invert-reference", e))?;

    // Stage: starting point.
    let x_star_top = match config.start_mode {
        StartMode::NoiseSpace => {
            let z = seeded_noise((lc, lh, lw), config.seed);
            report.push("noise_seed", config.seed.to_string());
            incorporate_noise(&x_m_noise.data, &x_r_noise.data, &z, &user_lat, &seg_lat)
                .map_err(|e| stage_error("incorporate-noise", e))?
        }
        StartMode::LatentPaste => {
            let seg = seg_lat.to_f64();
            let mut pasted = Array3::zeros((lc, lh, lw));
            for ((c, y, x), v) in pasted.indexed_iter_mut() {
                let s = seg[[y, x]];
                *v = x_r0[[c, y, x]] * s + x_m0[[c, y, x]] * (1.0 - s);
            }
            let mut model = ConditionedModel::plain(&backbone.denoiser, &w_prompt);
            let (state, _) = integrate(
                LatentState::new(pasted, 0),
                &mut model,
                &schedule,
                &fwd_cfg,
                &mut [],
            )
            .map_err(|e| stage_error("invert-paste", e))?;
            state.data
        }
    };

    // Stage: backward reconstructions with attention recording.
    let window = InjectionWindow::new(config.tau_a, steps)?;
    let bwd_cfg = SolverConfig::new(config.order, steps, Direction::Backward);
    let mut store_main = AttentionRecordStore::new();
    let mut model = ConditionedModel {
        denoiser: &backbone.denoiser,
        conditioning: Conditioning::Plain(&w_prompt),
        recorder: Some(Recorder {
            window,
            store: &mut store_main,
        }),
        injector: None,
    };
    let (main_rec_final, traj_main_back) = integrate(
        LatentState::new(x_m_noise.data.clone(), train_end),
        &mut model,
        &schedule,
        &bwd_cfg,
        &mut [],
    )
    .map_err(|e| stage_error("reconstruct-main", e))?;

    let mut store_ref = AttentionRecordStore::new();
    let mut model = ConditionedModel {
        denoiser: &backbone.denoiser,
        conditioning: Conditioning::Plain(&w_prompt),
        recorder: Some(Recorder {
            window,
            store: &mut store_ref,
        }),
        injector: None,
    };
    let (_, _) = integrate(
        LatentState::new(x_r_noise.data.clone(), train_end),
        &mut model,
        &schedule,
        &bwd_cfg,
        &mut [],
    )
    .map_err(|e| stage_error("reconstruct-reference", e))?;

    // Stage: composite override schedule.
    let resolutions = backbone.denoiser.self_attn_resolutions((lh, lw));
    let mut index_maps = Vec::with_capacity(resolutions.len());
    for (layer, res) in resolutions.iter().enumerate() {
        let idx = build_index_map(&user_lat, *res)?;
        if idx.is_none() {
            report.push(
                format!("inject_layer_{layer}"),
                "skipped (mask degenerate at this resolution)",
            );
        }
        index_maps.push(idx);
    }
    let inject_enabled = index_maps.iter().any(Option::is_some) && !window.is_empty();
    let weights = backbone.denoiser.self_attn_weights();
    let opts = ComposeOptions {
        reverse_cross: config.reverse_cross,
        renormalize_rows: config.renormalize_rows,
        inject_values: config.inject_values,
    };
    let override_schedule = if inject_enabled {
        build_override_schedule(&store_main, &store_ref, &index_maps, &weights, &window, &opts)
            .map_err(|e| stage_error("compose-attention", e))?
    } else {
        BTreeMap::new()
    };
    report.push(
        "inject_window_steps",
        if inject_enabled { window.len() } else { 0 }.to_string(),
    );

    // Stage: composition ODE (guided when a prompt is given, exceptional
    // otherwise), with per-step rectification.
    let normal_prompt;
    let null_prompt;
    let conditioning = match inputs.prompt.as_deref() {
        Some(text) if !text.trim().is_empty() => {
            normal_prompt = build_normal(&backbone.text_encoder, text);
            null_prompt = build_null(&backbone.text_encoder);
            Conditioning::Guided {
                cond: &normal_prompt,
                uncond: &null_prompt,
                scale: config.cfg_scale,
            }
        }
        _ => Conditioning::Plain(&w_prompt),
    };
    let mut model = ConditionedModel {
        denoiser: &backbone.denoiser,
        conditioning,
        recorder: None,
        injector: inject_enabled.then_some(Injector {
            window,
            schedule: &override_schedule,
        }),
    };

    let rect_window = InjectionWindow::new(config.tau_b, steps)?;
    let mut history = SolverHistory::new();
    let mut state = LatentState::new(x_star_top, train_end);
    let mut states = vec![state.clone()];
    for step in 0..steps {
        let src_grid = steps - step;
        let dst_grid = src_grid - 1;
        state = ode_step(&state, &mut model, &schedule, &grid, &bwd_cfg, step, &mut history)
            .map_err(|e| stage_error("composition-ode", e))?;
        let injected = inject_enabled && window.contains_source(src_grid);
        let rectified = rect_window.contains_source(src_grid);
        if rectified {
            let x_main_dst = traj_main_back.at_grid_point(dst_grid);
            let blended = rectify_background(&state.data, &x_main_dst.data, &user_lat)?;
            state = LatentState::new(blended, state.time_index);
        }
        report.push(
            format!("step_{step:02}"),
            format!(
                "src={src_grid} dst={dst_grid} inject={injected} rectify={rectified} mean_abs={:.12e}",
                mean_abs(&state.data)
            ),
        );
        states.push(state.clone());
    }

    let final_latent = state.data;
    let image = backbone
        .autoencoder
        .decode(&final_latent)
        .map_err(|e| stage_error("decode", e))?;
    let main_reconstruction_image = backbone.autoencoder.decode(&main_rec_final.data)?;
    report.push("final_mean_abs", format!("{:.12e}", mean_abs(&final_latent)));

    Ok(ComposeOutcome {
        image,
        final_latent,
        main_reconstruction_latent: main_rec_final.data,
        main_reconstruction_image,
        composition_trajectory: Trajectory {
            states,
            direction: Direction::Backward,
        },
        override_schedule,
        report,
    })
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Input(msg) => Error::Input(format!("[{stage}] {msg}")),
        Error::Config(msg) => Error::Config(format!("[{stage}] {msg}")),
        Error::Contract(msg) => Error::Contract(format!("[{stage}] {msg}")),
        Error::Numerical { step, message } => Error::Numerical {
            step,
            message: format!("[{stage}] {message}"),
        },
        other => other,
    }
}

/// Loads job files, runs [`compose`], writes the image, report, and
/// optional dumps.
pub fn run_job(backbone: &ToyBackbone, job: &CompositionJob) -> Result<ComposeOutcome> {
    let inputs = ComposeInputs {
        main: load_image(&job.main_image)?,
        reference: load_image(&job.reference_image)?,
        seg_mask: load_mask(&job.seg_mask, MaskKind::Segmentation)?,
        user_mask: load_mask(&job.user_mask, MaskKind::User)?,
        prompt: job.prompt.clone(),
    };
    let outcome = compose(backbone, &inputs, &job.config)?;
    save_image(&outcome.image, &job.output)?;
    if let Some(report_path) = &job.report {
        outcome.report.write(report_path)?;
    }
    if let Some(traj_path) = &job.dump_trajectory {
        write_trajectory(&outcome.composition_trajectory, traj_path)?;
    }
    if let Some(attn_path) = &job.dump_attention {
        let mut blocks = Vec::new();
        for (&step, over) in &outcome.override_schedule {
            for (layer, entry) in over.layers.iter().enumerate() {
                if let Some(entry) = entry {
                    blocks.push(AttentionBlockDump {
                        layer,
                        step,
                        map: entry.map.clone(),
                    });
                }
            }
        }
        write_attention_dump(&blocks, attn_path)?;
    }
    Ok(outcome)
}
