//! Deterministic seed-fixed toy backbone: latent denoiser, autoencoder, and
//! the adapters that wire them into the ODE solver.
//!
//! The denoiser is an untrained conv/attention stack operating on `(c, h, w)`
//! latents: conv-in, a self+cross attention block at full latent resolution,
//! one at half resolution, one more at full resolution (with a skip), then
//! conv-out. Single-head attention; all weights are drawn once from a seeded
//! RNG and serialized with a checksum. Every property exercised on it is
//! structural, so no training is involved.
//!
//! Attention overrides replace a layer's row-stochastic map (and optionally
//! its value rows) right before the `map . values` product; overriding every
//! layer with its own computed maps reproduces the unmodified forward pass
//! bit-exactly.
//!
//! The `Conv` autoencoder is a 2x2 space-to-depth followed by an orthogonal
//! 12x12 channel mix; decoding applies the transposed mix and the inverse
//! shuffle, so `decode(encode(x))` is exact to rounding (~1e-12). `Identity`
//! passes `(3, H, W)` arrays through untouched.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    attention_maps, AttentionOverride, AttentionRecordStore, InjectionWindow, LayerCapture,
    LayerOverride, SelfAttnWeights, StepRecord,
};
use crate::dump::fnv1a64;
use crate::error::{Error, Result};
use crate::prompt::{PromptEmbedding, ToyTextEncoder};
use crate::solver::{cfg_noise, DenoiseModel, StepInfo};

const WEIGHTS_MAGIC: &[u8; 8] = b"TFWTS1\0\0";
const WEIGHTS_VERSION: u32 = 1;

/// Autoencoder flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AeMode {
    Identity,
    Conv,
}

/// Backbone size configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDims {
    /// Default pixel size of square inputs (must be a multiple of 4 in
    /// `Conv` mode so both attention resolutions exist).
    pub image_size: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    pub autoencoder: AeMode,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            image_size: 32,
            d_model: 32,
            d_text: 16,
            vocab_size: 8192,
            max_prompt_len: 77,
            autoencoder: AeMode::Conv,
        }
    }
}

impl ToyDims {
    pub fn latent_channels(&self) -> usize {
        match self.autoencoder {
            AeMode::Identity => 3,
            AeMode::Conv => 12,
        }
    }

    pub fn latent_size(&self) -> usize {
        match self.autoencoder {
            AeMode::Identity => self.image_size,
            AeMode::Conv => self.image_size / 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Small dense/conv primitives (sizes are tiny; direct loops are fine)
// ---------------------------------------------------------------------------

fn conv3x3(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (c_in, h, wd) = x.dim();
    let c_out = w.dim().0;
    debug_assert_eq!(w.dim().1, c_in);
    let mut out = Array3::zeros((c_out, h, wd));
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for i in 0..c_in {
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = xx as isize + dx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += w[[o, i, dy, dx]] * x[[i, sy as usize, sx as usize]];
                        }
                    }
                }
                out[[o, y, xx]] = acc;
            }
        }
    }
    out
}

fn conv1x1(x: &Array3<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (c_in, h, wd) = x.dim();
    let c_out = w.nrows();
    let mut out = Array3::zeros((c_out, h, wd));
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for i in 0..c_in {
                    acc += w[[o, i]] * x[[i, y, xx]];
                }
                out[[o, y, xx]] = acc;
            }
        }
    }
    out
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        (x[[ch, 2 * y, 2 * xx]]
            + x[[ch, 2 * y, 2 * xx + 1]]
            + x[[ch, 2 * y + 1, 2 * xx]]
            + x[[ch, 2 * y + 1, 2 * xx + 1]])
            * 0.25
    })
}

fn upsample_nearest2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

fn grid_to_rows(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    Array2::from_shape_fn((h * w, c), |(i, ch)| x[[ch, i / w, i % w]])
}

fn rows_to_grid(rows: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = rows.ncols();
    Array3::from_shape_fn((c, h, w), |(ch, y, xx)| rows[[y * w + xx, ch]])
}

/// Parameter-free row RMS normalization; keeps activations bounded across
/// the untrained stack.
fn rms_norm_rows(m: &Array2<f64>) -> Array2<f64> {
    let d = m.ncols() as f64;
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |i| {
        let rate = t as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 {
            rate.sin()
        } else {
            rate.cos()
        }
    })
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Text cross-attention projections of one block.
#[derive(Debug, Clone)]
pub struct CrossAttnWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    time_proj: Array2<f64>,
    self_attn: SelfAttnWeights,
    cross_attn: CrossAttnWeights,
    mlp_w1: Array2<f64>,
    mlp_w2: Array2<f64>,
}

/// Capture/override context for one forward pass.
pub struct ForwardContext<'a> {
    /// Receives one [`LayerCapture`] per self-attention layer, in order.
    pub capture: Option<&'a mut Vec<LayerCapture>>,
    pub overrides: Option<&'a AttentionOverride>,
}

/// Seed-fixed toy latent denoiser.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    latent_channels: usize,
    d_model: usize,
    conv_in_w: Array4<f64>,
    conv_in_b: Array1<f64>,
    blocks: Vec<AttnBlock>,
    down_w: Array2<f64>,
    down_b: Array1<f64>,
    up_w: Array2<f64>,
    up_b: Array1<f64>,
    conv_out_w: Array4<f64>,
    conv_out_b: Array1<f64>,
}

impl ToyDenoiser {
    fn seeded(seed: u64, latent_channels: usize, d_model: usize, d_text: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, fan_in: usize| {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };
        let d = d_model;
        let conv_in_w = {
            let dist = Normal::new(0.0, 1.0 / ((latent_channels * 9) as f64).sqrt()).unwrap();
            Array4::from_shape_fn((d, latent_channels, 3, 3), |_| dist.sample(&mut rng))
        };
        let conv_in_b = Array1::zeros(d);
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            blocks.push(AttnBlock {
                time_proj: mat(d, d, d),
                self_attn: SelfAttnWeights {
                    wq: mat(d, d, d),
                    wk: mat(d, d, d),
                    wv: mat(d, d, d),
                },
                cross_attn: CrossAttnWeights {
                    wq: mat(d, d, d),
                    wk: mat(d_text, d, d_text),
                    wv: mat(d_text, d, d_text),
                },
                mlp_w1: mat(d, 2 * d, d),
                mlp_w2: mat(2 * d, d, 2 * d),
            });
        }
        let down_w = mat(d, d, d);
        let down_b = Array1::zeros(d);
        let up_w = mat(d, d, d);
        let up_b = Array1::zeros(d);
        let conv_out_w = {
            let dist = Normal::new(0.0, 1.0 / ((d * 9) as f64).sqrt()).unwrap();
            Array4::from_shape_fn((latent_channels, d, 3, 3), |_| dist.sample(&mut rng))
        };
        let conv_out_b = Array1::zeros(latent_channels);
        ToyDenoiser {
            latent_channels,
            d_model,
            conv_in_w,
            conv_in_b,
            blocks,
            down_w,
            down_b,
            up_w,
            up_b,
            conv_out_w,
            conv_out_b,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn num_self_attn_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Spatial resolution of each self-attention layer for a given latent size.
    pub fn self_attn_resolutions(&self, latent_hw: (usize, usize)) -> Vec<(usize, usize)> {
        let (h, w) = latent_hw;
        vec![(h, w), (h / 2, w / 2), (h, w)]
    }

    pub fn self_attn_weights(&self) -> Vec<&SelfAttnWeights> {
        self.blocks.iter().map(|b| &b.self_attn).collect()
    }

    pub fn cross_attn_weights(&self, layer: usize) -> &CrossAttnWeights {
        &self.blocks[layer].cross_attn
    }

    /// Full forward pass. `ctx` carries optional self-attention captures and
    /// overrides; captures record the features entering q/k/v and the map
    /// computed from them, never altering the output.
    pub fn predict_noise(
        &self,
        x: &Array3<f64>,
        train_index: usize,
        prompt: &PromptEmbedding,
        mut ctx: Option<ForwardContext<'_>>,
    ) -> Result<Array3<f64>> {
        let (c, h, w) = x.dim();
        if c != self.latent_channels {
            return Err(Error::contract(format!(
                "latent has {c} channels, denoiser expects {}",
                self.latent_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
            return Err(Error::contract(format!(
                "latent spatial dims must be even and >= 2, got {h}x{w}"
            )));
        }
        let t_emb = sinusoidal_embedding(train_index, self.d_model);

        let g = conv3x3(x, &self.conv_in_w, &self.conv_in_b);
        let g = self.block_forward(0, &g, &t_emb, prompt, &mut ctx)?;
        let skip = g.clone();
        let g2 = conv1x1(&avg_pool2(&g), &self.down_w, &self.down_b);
        let g2 = self.block_forward(1, &g2, &t_emb, prompt, &mut ctx)?;
        let g3 = conv1x1(&upsample_nearest2(&g2), &self.up_w, &self.up_b) + &skip;
        let g3 = self.block_forward(2, &g3, &t_emb, prompt, &mut ctx)?;
        Ok(conv3x3(&g3, &self.conv_out_w, &self.conv_out_b))
    }

    fn block_forward(
        &self,
        layer: usize,
        grid: &Array3<f64>,
        t_emb: &Array1<f64>,
        prompt: &PromptEmbedding,
        ctx: &mut Option<ForwardContext<'_>>,
    ) -> Result<Array3<f64>> {
        let block = &self.blocks[layer];
        let (_, h, w) = grid.dim();
        let mut f = grid_to_rows(grid);
        let n = f.nrows();

        // Time conditioning: one bias vector added to every patch.
        let t_bias = t_emb.dot(&block.time_proj).mapv(f64::tanh);
        for mut row in f.rows_mut() {
            row += &t_bias;
        }

        // Self-attention, with optional override/capture.
        let normed = rms_norm_rows(&f);
        let override_entry = ctx
            .as_ref()
            .and_then(|c| c.overrides)
            .and_then(|o| o.layers.get(layer))
            .and_then(|e| e.as_ref());
        let capturing = ctx.as_ref().is_some_and(|c| c.capture.is_some());
        let (out, computed) =
            self_attention(&normed, &block.self_attn, override_entry, capturing)?;
        if let Some(c) = ctx.as_mut() {
            if let Some(sink) = c.capture.as_mut() {
                sink.push(LayerCapture {
                    features: normed,
                    map: computed.expect("map computed when capturing"),
                });
            }
        }
        if out.nrows() != n {
            return Err(Error::contract(format!(
                "self-attention output rows {} != patches {n} at layer {layer}",
                out.nrows()
            )));
        }
        f += &out;

        // Text cross-attention.
        let normed = rms_norm_rows(&f);
        let q = normed.dot(&block.cross_attn.wq);
        let k = prompt.matrix.dot(&block.cross_attn.wk);
        let v = prompt.matrix.dot(&block.cross_attn.wv);
        let map = attention_maps(&q, &k)?;
        f += &map.dot(&v);

        // Pointwise MLP.
        let normed = rms_norm_rows(&f);
        f += &normed.dot(&block.mlp_w1).mapv(f64::tanh).dot(&block.mlp_w2);

        Ok(rows_to_grid(&f, h, w))
    }
}

/// One self-attention application: computes `softmax(q k^T / sqrt(d))` from
/// the (normed) features unless an override map is supplied, then multiplies
/// value rows (overridden value rows when value injection is on).
///
/// Returns the attention output and, when computed, the layer's own map.
pub fn self_attention(
    features: &Array2<f64>,
    weights: &SelfAttnWeights,
    override_entry: Option<&LayerOverride>,
    force_compute_map: bool,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let n = features.nrows();
    let computed = if override_entry.is_none() || force_compute_map {
        let q = features.dot(&weights.wq);
        let k = features.dot(&weights.wk);
        Some(attention_maps(&q, &k)?)
    } else {
        None
    };
    let (map, values) = match override_entry {
        Some(entry) => {
            if entry.map.dim() != (n, n) {
                return Err(Error::contract(format!(
                    "override map {:?} does not match layer geometry {n}x{n}",
                    entry.map.dim()
                )));
            }
            let values = match &entry.values {
                Some(v) => {
                    if v.nrows() != n || v.ncols() != weights.wv.ncols() {
                        return Err(Error::contract(format!(
                            "override values {:?} do not match layer geometry ({n}, {})",
                            v.dim(),
                            weights.wv.ncols()
                        )));
                    }
                    v.clone()
                }
                None => features.dot(&weights.wv),
            };
            (&entry.map, values)
        }
        None => (
            computed.as_ref().expect("computed map present"),
            features.dot(&weights.wv),
        ),
    };
    Ok((map.dot(&values), computed))
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

/// Toy autoencoder. `Conv` is exactly invertible: 2x2 space-to-depth plus an
/// orthogonal channel mix.
#[derive(Debug, Clone)]
pub struct ToyAutoencoder {
    mode: AeMode,
    mix: Option<Array2<f64>>,
}

impl ToyAutoencoder {
    fn seeded(seed: u64, mode: AeMode) -> Self {
        let mix = match mode {
            AeMode::Identity => None,
            AeMode::Conv => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, 1.0).unwrap();
                let raw = Array2::from_shape_fn((12, 12), |_| dist.sample(&mut rng));
                Some(orthogonalize_rows(&raw))
            }
        };
        ToyAutoencoder { mode, mix }
    }

    pub fn mode(&self) -> AeMode {
        self.mode
    }

    pub fn latent_shape(&self, image_hw: (usize, usize)) -> (usize, usize, usize) {
        match self.mode {
            AeMode::Identity => (3, image_hw.0, image_hw.1),
            AeMode::Conv => (12, image_hw.0 / 2, image_hw.1 / 2),
        }
    }

    pub fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::input(format!("expected 3-channel image, got {c}")));
        }
        match self.mode {
            AeMode::Identity => Ok(image.clone()),
            AeMode::Conv => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::input(format!(
                        "image dims must be even for conv autoencoder, got {h}x{w}"
                    )));
                }
                let shuffled = Array3::from_shape_fn((12, h / 2, w / 2), |(ch, y, x)| {
                    let (base, pos) = (ch / 4, ch % 4);
                    image[[base, 2 * y + pos / 2, 2 * x + pos % 2]]
                });
                let mix = self.mix.as_ref().expect("conv mode has mix");
                let mut out = Array3::zeros((12, h / 2, w / 2));
                for o in 0..12 {
                    for y in 0..h / 2 {
                        for x in 0..w / 2 {
                            let mut acc = 0.0;
                            for i in 0..12 {
                                acc += mix[[o, i]] * shuffled[[i, y, x]];
                            }
                            out[[o, y, x]] = acc;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = latent.dim();
        match self.mode {
            AeMode::Identity => Ok(latent.clone()),
            AeMode::Conv => {
                if c != 12 {
                    return Err(Error::contract(format!(
                        "conv autoencoder latent must have 12 channels, got {c}"
                    )));
                }
                let mix = self.mix.as_ref().expect("conv mode has mix");
                let mut unmixed = Array3::zeros((12, h, w));
                for o in 0..12 {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for i in 0..12 {
                                // transposed mix = inverse of the orthogonal mix
                                acc += mix[[i, o]] * latent[[i, y, x]];
                            }
                            unmixed[[o, y, x]] = acc;
                        }
                    }
                }
                Ok(Array3::from_shape_fn((3, h * 2, w * 2), |(ch, y, x)| {
                    let pos = (y % 2) * 2 + x % 2;
                    unmixed[[ch * 4 + pos, y / 2, x / 2]]
                }))
            }
        }
    }
}

/// Modified Gram-Schmidt row orthogonalization.
fn orthogonalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut q = m.clone();
    let n = q.nrows();
    for i in 0..n {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let row_j = q.row(j).to_owned();
            let mut row_i = q.row_mut(i);
            row_i.scaled_add(-proj, &row_j);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

// ---------------------------------------------------------------------------
// Bundle + serialization
// ---------------------------------------------------------------------------

/// The full toy backbone: denoiser, autoencoder, text encoder.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    pub denoiser: ToyDenoiser,
    pub autoencoder: ToyAutoencoder,
    pub text_encoder: ToyTextEncoder,
    pub seed: u64,
    pub dims: ToyDims,
}

/// Initializes all three handles from one seed. Identical seeds yield
/// identical weights (and checksums).
pub fn init_toy(seed: u64, dims: ToyDims) -> ToyBackbone {
    let denoiser = ToyDenoiser::seeded(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
        dims.latent_channels(),
        dims.d_model,
        dims.d_text,
    );
    let autoencoder = ToyAutoencoder::seeded(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(2),
        dims.autoencoder,
    );
    let text_encoder = ToyTextEncoder::seeded(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(3),
        dims.vocab_size,
        dims.d_text,
        dims.max_prompt_len,
    );
    ToyBackbone {
        denoiser,
        autoencoder,
        text_encoder,
        seed,
        dims,
    }
}

impl ToyBackbone {
    /// All weights flattened in serialization order.
    fn weight_payload(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let d = &self.denoiser;
        out.extend(d.conv_in_w.iter());
        out.extend(d.conv_in_b.iter());
        for b in &d.blocks {
            out.extend(b.time_proj.iter());
            out.extend(b.self_attn.wq.iter());
            out.extend(b.self_attn.wk.iter());
            out.extend(b.self_attn.wv.iter());
            out.extend(b.cross_attn.wq.iter());
            out.extend(b.cross_attn.wk.iter());
            out.extend(b.cross_attn.wv.iter());
            out.extend(b.mlp_w1.iter());
            out.extend(b.mlp_w2.iter());
        }
        out.extend(d.down_w.iter());
        out.extend(d.down_b.iter());
        out.extend(d.up_w.iter());
        out.extend(d.up_b.iter());
        out.extend(d.conv_out_w.iter());
        out.extend(d.conv_out_b.iter());
        if let Some(mix) = &self.autoencoder.mix {
            out.extend(mix.iter());
        }
        out.extend(self.text_encoder.token_table().iter());
        out.extend(self.text_encoder.pos_table().iter());
        out
    }

    /// FNV-1a checksum over the serialized weight payload.
    pub fn checksum(&self) -> u64 {
        let payload = self.weight_payload();
        let mut bytes = Vec::with_capacity(payload.len() * 8);
        for v in &payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    /// Writes the weight blob: header (seed, dims, checksum) + payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = self.weight_payload();
        let mut bytes = Vec::with_capacity(64 + payload.len() * 8);
        bytes.extend_from_slice(WEIGHTS_MAGIC);
        bytes.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(self.dims.image_size as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.d_model as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.d_text as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.vocab_size as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.max_prompt_len as u32).to_le_bytes());
        bytes.push(match self.dims.autoencoder {
            AeMode::Identity => 0,
            AeMode::Conv => 1,
        });
        let mut payload_bytes = Vec::with_capacity(payload.len() * 8);
        for v in &payload {
            payload_bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(payload_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&fnv1a64(&payload_bytes).to_le_bytes());
        bytes.extend_from_slice(&payload_bytes);
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Loads a weight blob, verifying magic, version, and checksum. The
    /// payload must match the seed-derived weights (the blob is a cache of
    /// the deterministic init, so any mismatch means corruption).
    pub fn load(path: &Path) -> Result<ToyBackbone> {
        let bytes = fs::read(path)
            .map_err(|e| Error::input(format!("cannot read weights {}: {e}", path.display())))?;
        if bytes.len() < 49 || &bytes[0..8] != WEIGHTS_MAGIC {
            return Err(Error::input("not a toy weight blob (bad magic)"));
        }
        let mut off = 8;
        let mut take = |n: usize| {
            let s = &bytes[off..off + n];
            off += n;
            s
        };
        let version = u32::from_le_bytes(take(4).try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::input(format!("unsupported weight version {version}")));
        }
        let seed = u64::from_le_bytes(take(8).try_into().unwrap());
        let image_size = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let d_model = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let d_text = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let vocab_size = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let max_prompt_len = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let autoencoder = match take(1)[0] {
            0 => AeMode::Identity,
            1 => AeMode::Conv,
            m => return Err(Error::input(format!("unknown autoencoder mode {m}"))),
        };
        let payload_len = u64::from_le_bytes(take(8).try_into().unwrap()) as usize;
        let checksum = u64::from_le_bytes(take(8).try_into().unwrap());
        if bytes.len() - off != payload_len {
            return Err(Error::input("weight blob truncated"));
        }
        if fnv1a64(&bytes[off..]) != checksum {
            return Err(Error::input("weight blob checksum mismatch"));
        }
        let dims = ToyDims {
            image_size,
            d_model,
            d_text,
            vocab_size,
            max_prompt_len,
            autoencoder,
        };
        let backbone = init_toy(seed, dims);
        if backbone.checksum() != fnv1a64(&bytes[off..]) {
            return Err(Error::input(
                "weight payload does not match its seed-derived weights",
            ));
        }
        Ok(backbone)
    }
}

// ---------------------------------------------------------------------------
// Solver adapters
// ---------------------------------------------------------------------------

/// Prompt conditioning for one ODE.
pub enum Conditioning<'a> {
    /// Single evaluation with one prompt (reconstruction ODEs).
    Plain(&'a PromptEmbedding),
    /// Classifier-free guidance: `s * eps(cond) + (1 - s) * eps(uncond)`.
    Guided {
        cond: &'a PromptEmbedding,
        uncond: &'a PromptEmbedding,
        scale: f64,
    },
}

/// Records per-layer self-attention captures for window steps.
pub struct Recorder<'a> {
    pub window: InjectionWindow,
    pub store: &'a mut AttentionRecordStore,
}

/// Supplies composite overrides for window steps; a window step without a
/// prepared override is a contract error.
pub struct Injector<'a> {
    pub window: InjectionWindow,
    pub schedule: &'a std::collections::BTreeMap<usize, AttentionOverride>,
}

/// [`DenoiseModel`] adapter binding the toy denoiser to a prompt, an
/// optional recorder, and an optional injector.
pub struct ConditionedModel<'a> {
    pub denoiser: &'a ToyDenoiser,
    pub conditioning: Conditioning<'a>,
    pub recorder: Option<Recorder<'a>>,
    pub injector: Option<Injector<'a>>,
}

impl<'a> ConditionedModel<'a> {
    pub fn plain(denoiser: &'a ToyDenoiser, prompt: &'a PromptEmbedding) -> Self {
        ConditionedModel {
            denoiser,
            conditioning: Conditioning::Plain(prompt),
            recorder: None,
            injector: None,
        }
    }
}

impl DenoiseModel for ConditionedModel<'_> {
    fn predict(
        &mut self,
        x: &Array3<f64>,
        train_index: usize,
        step: &StepInfo,
    ) -> Result<Array3<f64>> {
        let override_entry = match &self.injector {
            Some(inj) if inj.window.contains_source(step.src_grid) => {
                Some(inj.schedule.get(&step.src_grid).ok_or_else(|| {
                    Error::contract(format!(
                        "no attention override prepared for window step {}",
                        step.src_grid
                    ))
                })?)
            }
            _ => None,
        };
        let recording = self
            .recorder
            .as_ref()
            .is_some_and(|r| r.window.contains_source(step.src_grid));

        match &self.conditioning {
            Conditioning::Plain(prompt) => {
                let mut captures = Vec::new();
                let ctx = ForwardContext {
                    capture: recording.then_some(&mut captures),
                    overrides: override_entry,
                };
                let eps = self.denoiser.predict_noise(x, train_index, prompt, Some(ctx))?;
                if recording {
                    if let Some(rec) = self.recorder.as_mut() {
                        rec.store
                            .insert(step.src_grid, StepRecord { layers: captures })?;
                    }
                }
                Ok(eps)
            }
            Conditioning::Guided {
                cond,
                uncond,
                scale,
            } => {
                if recording {
                    return Err(Error::contract(
                        "attention recording is defined for plain conditioning only",
                    ));
                }
                let ctx_c = ForwardContext {
                    capture: None,
                    overrides: override_entry,
                };
                let eps_cond = self.denoiser.predict_noise(x, train_index, cond, Some(ctx_c))?;
                let ctx_u = ForwardContext {
                    capture: None,
                    overrides: override_entry,
                };
                let eps_uncond = self
                    .denoiser
                    .predict_noise(x, train_index, uncond, Some(ctx_u))?;
                cfg_noise(&eps_cond, &eps_uncond, *scale)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::build_exceptional;
    use ndarray::Array3;

    fn small_dims() -> ToyDims {
        ToyDims {
            image_size: 16,
            ..ToyDims::default()
        }
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = init_toy(0, small_dims());
        let b = init_toy(0, small_dims());
        assert_eq!(a.checksum(), b.checksum());
        let c = init_toy(1, small_dims());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn forward_on_zeros_is_finite() {
        let bb = init_toy(0, small_dims());
        let prompt = build_exceptional(&bb.text_encoder, 7788, 77).unwrap();
        let x = Array3::zeros((12, 8, 8));
        let eps = bb.denoiser.predict_noise(&x, 500, &prompt, None).unwrap();
        assert_eq!(eps.dim(), (12, 8, 8));
        assert!(eps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_autoencoder_is_exact_identity() {
        let dims = ToyDims {
            autoencoder: AeMode::Identity,
            ..small_dims()
        };
        let bb = init_toy(0, dims);
        let img = crate::image_io::toy_image(1, 16, 16);
        let lat = bb.autoencoder.encode(&img).unwrap();
        assert_eq!(lat, img);
        assert_eq!(bb.autoencoder.decode(&lat).unwrap(), img);
    }

    #[test]
    fn conv_autoencoder_roundtrip_within_tolerance() {
        let bb = init_toy(0, small_dims());
        let img = crate::image_io::toy_image(2, 16, 16);
        let lat = bb.autoencoder.encode(&img).unwrap();
        assert_eq!(lat.dim(), (12, 8, 8));
        let back = bb.autoencoder.decode(&lat).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn self_injection_identity_bit_exact() {
        let bb = init_toy(0, small_dims());
        let prompt = build_exceptional(&bb.text_encoder, 7788, 77).unwrap();
        let x = crate::image_io::toy_image(3, 16, 16);
        let lat = bb.autoencoder.encode(&x).unwrap();

        let mut captures = Vec::new();
        let ctx = ForwardContext {
            capture: Some(&mut captures),
            overrides: None,
        };
        let baseline = bb
            .denoiser
            .predict_noise(&lat, 500, &prompt, Some(ctx))
            .unwrap();
        assert_eq!(captures.len(), 3);

        let override_all = AttentionOverride {
            layers: captures
                .iter()
                .map(|c| {
                    Some(LayerOverride {
                        map: c.map.clone(),
                        values: None,
                    })
                })
                .collect(),
        };
        let ctx = ForwardContext {
            capture: None,
            overrides: Some(&override_all),
        };
        let injected = bb
            .denoiser
            .predict_noise(&lat, 500, &prompt, Some(ctx))
            .unwrap();
        assert_eq!(baseline, injected);
    }

    #[test]
    fn captures_do_not_perturb_output() {
        let bb = init_toy(0, small_dims());
        let prompt = build_exceptional(&bb.text_encoder, 7788, 77).unwrap();
        let lat = Array3::from_shape_fn((12, 8, 8), |(c, y, x)| {
            ((c * 64 + y * 8 + x) as f64 * 0.01).sin()
        });
        let plain = bb.denoiser.predict_noise(&lat, 123, &prompt, None).unwrap();
        let mut captures = Vec::new();
        let ctx = ForwardContext {
            capture: Some(&mut captures),
            overrides: None,
        };
        let tapped = bb
            .denoiser
            .predict_noise(&lat, 123, &prompt, Some(ctx))
            .unwrap();
        assert_eq!(plain, tapped);
    }

    #[test]
    fn backbone_attention_rows_sum_to_one() {
        let bb = init_toy(0, small_dims());
        let prompt = build_exceptional(&bb.text_encoder, 7788, 77).unwrap();
        let lat = crate::image_io::toy_image(4, 16, 16);
        let lat = bb.autoencoder.encode(&lat).unwrap();
        let mut captures = Vec::new();
        let ctx = ForwardContext {
            capture: Some(&mut captures),
            overrides: None,
        };
        bb.denoiser
            .predict_noise(&lat, 321, &prompt, Some(ctx))
            .unwrap();
        for cap in &captures {
            for row in cap.map.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn uniform_override_averages_value_rows() {
        let bb = init_toy(0, small_dims());
        let w = &bb.denoiser.blocks[0].self_attn;
        let n = 6;
        let features = Array2::from_shape_fn((n, bb.dims.d_model), |(i, j)| {
            ((i * 31 + j * 7) as f64 * 0.1).sin()
        });
        let uniform = Array2::from_elem((n, n), 1.0 / n as f64);
        let entry = LayerOverride {
            map: uniform,
            values: None,
        };
        let (out, _) = self_attention(&features, w, Some(&entry), false).unwrap();
        let values = features.dot(&w.wv);
        let mean = values.sum_axis(ndarray::Axis(0)) / n as f64;
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn override_geometry_mismatch_names_shapes() {
        let bb = init_toy(0, small_dims());
        let prompt = build_exceptional(&bb.text_encoder, 7788, 77).unwrap();
        let lat = Array3::zeros((12, 8, 8));
        let bad = AttentionOverride {
            layers: vec![
                Some(LayerOverride {
                    map: Array2::from_elem((3, 3), 1.0 / 3.0),
                    values: None,
                }),
                None,
                None,
            ],
        };
        let ctx = ForwardContext {
            capture: None,
            overrides: Some(&bad),
        };
        let err = bb
            .denoiser
            .predict_noise(&lat, 0, &prompt, Some(ctx))
            .unwrap_err();
        assert!(err.to_string().contains("64x64"), "got: {err}");
    }

    #[test]
    fn save_load_roundtrip_preserves_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let bb = init_toy(7, small_dims());
        bb.save(&path).unwrap();
        let loaded = ToyBackbone::load(&path).unwrap();
        assert_eq!(loaded.checksum(), bb.checksum());
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.dims, bb.dims);
    }

    #[test]
    fn corrupted_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let bb = init_toy(7, small_dims());
        bb.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(ToyBackbone::load(&path).is_err());
    }
}
