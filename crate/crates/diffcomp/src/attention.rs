//! Attention algebra: computing, recording, composing, and injecting maps.
//!
//! The composite map is assembled from three row-stochastic constituents
//! computed with shared per-layer projections:
//!
//! ```text
//! A_main  = softmax(q_m k_m^T / sqrt(d))   (n x n)   n = h*w main patches
//! A_ref   = softmax(q_r k_r^T / sqrt(d))   (b x b)   b = h'*w' reference patches
//! A_cross = softmax(q_m k_r^T / sqrt(d))   (n x b)
//! ```
//!
//! Placement follows the patch-index partition: the reference patches occupy
//! a rectangle ("blue") inside the main grid, everything else is "white".
//!
//! - blue  x blue  cell `(blue[i], blue[j])` takes `A_ref[i, j]`
//! - white x blue  cell `(p, blue[j])`       takes `A_cross[p, j]`
//! - blue  x white cell `(blue[i], p)`       takes `A_cross[p, i]` (transpose
//!   placement; optionally a separately computed reverse map `softmax(q_r k_m^T)`)
//! - white x white cell `(p, q)`             takes `A_main[p, q]`
//!
//! Rows of `A_cross` at main indices inside the blue rectangle are never
//! read. Composition happens post-softmax; without `renormalize_rows`, rows
//! spanning multiple sources need not sum to one.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::preprocess::Mask;

/// Scaled dot-product attention map: `softmax(q k^T / sqrt(d))` row-wise.
pub fn attention_maps(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    let d = q.ncols();
    if d == 0 || k.ncols() != d {
        return Err(Error::contract(format!(
            "attention dims mismatch: q is {:?}, k is {:?}",
            q.dim(),
            k.dim()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits *= scale;
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

/// Per-layer projection matrices shared by the main and reference passes.
#[derive(Debug, Clone)]
pub struct SelfAttnWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Patch-index bookkeeping for one layer resolution.
///
/// `blue[i]` is the row-major main-grid position of reference patch `i`;
/// the blue set is the rectangle spanned by the user-mask bounding box at
/// this resolution, enumerated row-major.
#[derive(Debug, Clone)]
pub struct PatchIndexMap {
    pub main_h: usize,
    pub main_w: usize,
    pub ref_h: usize,
    pub ref_w: usize,
    blue: Vec<usize>,
    /// main index -> reference-local index, None for white patches.
    blue_pos: Vec<Option<usize>>,
}

impl PatchIndexMap {
    pub fn from_box(
        main_res: (usize, usize),
        box_top: usize,
        box_left: usize,
        box_h: usize,
        box_w: usize,
    ) -> Result<Self> {
        let (main_h, main_w) = main_res;
        if box_h == 0 || box_w == 0 {
            return Err(Error::contract("index map box must be non-degenerate"));
        }
        if box_top + box_h > main_h || box_left + box_w > main_w {
            return Err(Error::contract(format!(
                "box ({box_top},{box_left})+{box_h}x{box_w} exceeds grid {main_h}x{main_w}"
            )));
        }
        let mut blue = Vec::with_capacity(box_h * box_w);
        let mut blue_pos = vec![None; main_h * main_w];
        for r in box_top..box_top + box_h {
            for c in box_left..box_left + box_w {
                let main_index = r * main_w + c;
                blue_pos[main_index] = Some(blue.len());
                blue.push(main_index);
            }
        }
        Ok(PatchIndexMap {
            main_h,
            main_w,
            ref_h: box_h,
            ref_w: box_w,
            blue,
            blue_pos,
        })
    }

    pub fn main_len(&self) -> usize {
        self.main_h * self.main_w
    }

    pub fn ref_len(&self) -> usize {
        self.blue.len()
    }

    /// Row-major main-grid positions of the reference patches.
    pub fn blue_indices(&self) -> &[usize] {
        &self.blue
    }

    /// Reference-local index of a main patch, None when white.
    pub fn ref_index_of(&self, main_index: usize) -> Option<usize> {
        self.blue_pos[main_index]
    }

    /// Main-grid indices outside the blue rectangle, ascending.
    pub fn white_indices(&self) -> Vec<usize> {
        (0..self.main_len())
            .filter(|&i| self.blue_pos[i].is_none())
            .collect()
    }
}

/// Maps the user mask's bounding box to a layer resolution, rounding the
/// extent outward so the reference never loses patches. Returns `Ok(None)`
/// when the mask is empty (the layer is skipped, not an error).
pub fn build_index_map(
    user_mask_latent: &Mask,
    layer_res: (usize, usize),
) -> Result<Option<PatchIndexMap>> {
    let (mask_h, mask_w) = user_mask_latent.dim();
    let (layer_h, layer_w) = layer_res;
    if layer_h == 0 || layer_w == 0 {
        return Err(Error::contract("layer resolution must be non-zero"));
    }
    let Some((top, left, box_h, box_w)) = user_mask_latent.bounding_box() else {
        return Ok(None);
    };
    let scale_h = layer_h as f64 / mask_h as f64;
    let scale_w = layer_w as f64 / mask_w as f64;
    let top_l = ((top as f64) * scale_h).floor() as usize;
    let left_l = ((left as f64) * scale_w).floor() as usize;
    let bottom_l = (((top + box_h) as f64) * scale_h).ceil() as usize;
    let right_l = (((left + box_w) as f64) * scale_w).ceil() as usize;
    let bottom_l = bottom_l.min(layer_h).max(top_l + 1);
    let right_l = right_l.min(layer_w).max(left_l + 1);
    Ok(Some(PatchIndexMap::from_box(
        layer_res,
        top_l,
        left_l,
        bottom_l - top_l,
        right_l - left_l,
    )?))
}

/// Assembles the composite map from the three constituents.
///
/// `reverse_cross`, when given, fills the blue-row/white-column cells from a
/// separately computed `(b, n)` map instead of transposing `a_cross`.
/// With `renormalize_rows` every output row is rescaled to sum to one.
pub fn compose(
    a_main: &Array2<f64>,
    a_ref: &Array2<f64>,
    a_cross: &Array2<f64>,
    reverse_cross: Option<&Array2<f64>>,
    idx: &PatchIndexMap,
    renormalize_rows: bool,
) -> Result<Array2<f64>> {
    let n = idx.main_len();
    let b = idx.ref_len();
    if a_main.dim() != (n, n) {
        return Err(Error::contract(format!(
            "A_main must be {n}x{n}, got {:?}",
            a_main.dim()
        )));
    }
    if a_ref.dim() != (b, b) {
        return Err(Error::contract(format!(
            "A_ref must be {b}x{b}, got {:?}",
            a_ref.dim()
        )));
    }
    if a_cross.dim() != (n, b) {
        return Err(Error::contract(format!(
            "A_cross must be {n}x{b}, got {:?}",
            a_cross.dim()
        )));
    }
    if let Some(rev) = reverse_cross {
        if rev.dim() != (b, n) {
            return Err(Error::contract(format!(
                "reverse cross map must be {b}x{n}, got {:?}",
                rev.dim()
            )));
        }
    }

    let mut composite = a_main.clone();
    for (i, &bi) in idx.blue_indices().iter().enumerate() {
        for (j, &bj) in idx.blue_indices().iter().enumerate() {
            composite[[bi, bj]] = a_ref[[i, j]];
        }
    }
    for p in 0..n {
        if idx.ref_index_of(p).is_some() {
            continue;
        }
        for (j, &bj) in idx.blue_indices().iter().enumerate() {
            composite[[p, bj]] = a_cross[[p, j]];
            composite[[bj, p]] = match reverse_cross {
                Some(rev) => rev[[j, p]],
                None => a_cross[[p, j]],
            };
        }
    }

    if renormalize_rows {
        for mut row in composite.rows_mut() {
            let sum = row.sum();
            if sum > 0.0 {
                row.mapv_inplace(|v| v / sum);
            }
        }
    }
    Ok(composite)
}

/// Composite value matrix for value injection: reference value rows at blue
/// positions, main value rows elsewhere.
pub fn compose_values(
    v_main: &Array2<f64>,
    v_ref: &Array2<f64>,
    idx: &PatchIndexMap,
) -> Result<Array2<f64>> {
    let n = idx.main_len();
    let b = idx.ref_len();
    if v_main.nrows() != n || v_ref.nrows() != b || v_main.ncols() != v_ref.ncols() {
        return Err(Error::contract(format!(
            "value shapes {:?} / {:?} inconsistent with index map ({n} main, {b} ref)",
            v_main.dim(),
            v_ref.dim()
        )));
    }
    let mut out = v_main.clone();
    for (i, &bi) in idx.blue_indices().iter().enumerate() {
        out.row_mut(bi).assign(&v_ref.row(i));
    }
    Ok(out)
}

/// Discrete injection window. A step is identified by its source grid index
/// `t` (the Algorithm-style loop variable, `num_steps` down to 1 during
/// sampling); the window covers `t > floor(threshold * num_steps)`.
#[derive(Debug, Clone, Copy)]
pub struct InjectionWindow {
    pub threshold: f64,
    pub num_steps: usize,
}

impl InjectionWindow {
    pub fn new(threshold: f64, num_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::config(format!(
                "window threshold must be in [0, 1], got {threshold}"
            )));
        }
        Ok(InjectionWindow {
            threshold,
            num_steps,
        })
    }

    fn cutoff(&self) -> usize {
        (self.threshold * self.num_steps as f64).floor() as usize
    }

    pub fn contains_source(&self, src_grid: usize) -> bool {
        src_grid > self.cutoff()
    }

    /// Source grid indices inside the window, ascending.
    pub fn source_steps(&self) -> impl Iterator<Item = usize> {
        self.cutoff() + 1..=self.num_steps
    }

    pub fn len(&self) -> usize {
        self.num_steps - self.cutoff()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One self-attention layer's capture: the (normed) features entering the
/// q/k/v projections and the map the pass actually used.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub features: Array2<f64>,
    pub map: Array2<f64>,
}

/// All self-attention captures of one denoiser evaluation.
#[derive(Debug, Clone, Default)]
pub struct StepRecord {
    pub layers: Vec<LayerCapture>,
}

/// Write-once store of per-step records, keyed by source grid index.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecordStore {
    steps: BTreeMap<usize, StepRecord>,
}

impl AttentionRecordStore {
    pub fn new() -> Self {
        AttentionRecordStore::default()
    }

    /// Inserts a step record; reuse of a key is a contract error, and every
    /// stored map must be row-stochastic within 1e-6.
    pub fn insert(&mut self, src_grid: usize, record: StepRecord) -> Result<()> {
        if self.steps.contains_key(&src_grid) {
            return Err(Error::contract(format!(
                "attention record for step {src_grid} already stored"
            )));
        }
        for (layer, cap) in record.layers.iter().enumerate() {
            for (row, sum) in cap.map.sum_axis(Axis(1)).iter().enumerate() {
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::contract(format!(
                        "stored map not row-stochastic at layer {layer} step {src_grid} row {row} (sum {sum})"
                    )));
                }
            }
        }
        self.steps.insert(src_grid, record);
        Ok(())
    }

    pub fn get(&self, src_grid: usize) -> Option<&StepRecord> {
        self.steps.get(&src_grid)
    }

    pub fn step_keys(&self) -> Vec<usize> {
        self.steps.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Override for one layer: the composite map, plus composite values when
/// value injection is on.
#[derive(Debug, Clone)]
pub struct LayerOverride {
    pub map: Array2<f64>,
    pub values: Option<Array2<f64>>,
}

/// Per-layer overrides for one denoiser evaluation; `None` entries leave the
/// layer free (degenerate index map at that resolution).
#[derive(Debug, Clone, Default)]
pub struct AttentionOverride {
    pub layers: Vec<Option<LayerOverride>>,
}

/// Composition options mirroring the pipeline flags.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComposeOptions {
    pub reverse_cross: bool,
    pub renormalize_rows: bool,
    pub inject_values: bool,
}

/// Builds the per-step overrides for every window step from the main and
/// reference record stores.
///
/// `index_maps` and `weights` are per self-attention layer (same order as
/// the captures). Reference features are sliced to the blue rectangle
/// before projecting, realizing the `h' x w'` reference geometry on the
/// zero-padded full-frame reconstruction.
pub fn build_override_schedule(
    main: &AttentionRecordStore,
    reference: &AttentionRecordStore,
    index_maps: &[Option<PatchIndexMap>],
    weights: &[&SelfAttnWeights],
    window: &InjectionWindow,
    opts: &ComposeOptions,
) -> Result<BTreeMap<usize, AttentionOverride>> {
    let mut schedule = BTreeMap::new();
    for src in window.source_steps() {
        let main_rec = main.get(src).ok_or_else(|| {
            Error::contract(format!("missing main attention record for step {src}"))
        })?;
        let ref_rec = reference.get(src).ok_or_else(|| {
            Error::contract(format!("missing reference attention record for step {src}"))
        })?;
        if main_rec.layers.len() != index_maps.len() || ref_rec.layers.len() != index_maps.len() {
            return Err(Error::contract(format!(
                "record layer count mismatch at step {src}: main {}, ref {}, expected {}",
                main_rec.layers.len(),
                ref_rec.layers.len(),
                index_maps.len()
            )));
        }

        let mut layers = Vec::with_capacity(index_maps.len());
        for (layer, idx) in index_maps.iter().enumerate() {
            let Some(idx) = idx else {
                layers.push(None);
                continue;
            };
            let w = weights[layer];
            let f_main = &main_rec.layers[layer].features;
            let a_main = &main_rec.layers[layer].map;
            let f_ref_full = &ref_rec.layers[layer].features;
            if f_ref_full.nrows() != idx.main_len() {
                return Err(Error::contract(format!(
                    "layer {layer} step {src}: reference features have {} rows, grid expects {}",
                    f_ref_full.nrows(),
                    idx.main_len()
                )));
            }
            let f_ref = slice_rows(f_ref_full, idx.blue_indices());
            let q_main = f_main.dot(&w.wq);
            let k_ref = f_ref.dot(&w.wk);
            let a_ref = attention_maps(&f_ref.dot(&w.wq), &k_ref)?;
            let a_cross = attention_maps(&q_main, &k_ref)?;
            let reverse = if opts.reverse_cross {
                Some(attention_maps(&f_ref.dot(&w.wq), &f_main.dot(&w.wk))?)
            } else {
                None
            };
            let map = compose(
                a_main,
                &a_ref,
                &a_cross,
                reverse.as_ref(),
                idx,
                opts.renormalize_rows,
            )?;
            let values = if opts.inject_values {
                Some(compose_values(
                    &f_main.dot(&w.wv),
                    &f_ref.dot(&w.wv),
                    idx,
                )?)
            } else {
                None
            };
            layers.push(Some(LayerOverride { map, values }));
        }
        schedule.insert(src, AttentionOverride { layers });
    }
    Ok(schedule)
}

/// Copies the given rows (in order) into a new matrix.
pub fn slice_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{Mask, MaskKind, MaskResolution};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn mask_from_box(h: usize, w: usize, top: usize, left: usize, bh: usize, bw: usize) -> Mask {
        let mut data = Array2::<u8>::zeros((h, w));
        for r in top..top + bh {
            for c in left..left + bw {
                data[[r, c]] = 1;
            }
        }
        Mask::new(data, MaskKind::User, MaskResolution::Latent).unwrap()
    }

    /// Independent cell-by-cell placement oracle for `compose`.
    fn compose_oracle(
        a_main: &Array2<f64>,
        a_ref: &Array2<f64>,
        a_cross: &Array2<f64>,
        idx: &PatchIndexMap,
    ) -> Array2<f64> {
        let n = idx.main_len();
        let mut out = Array2::zeros((n, n));
        for row in 0..n {
            for col in 0..n {
                let rb = idx.ref_index_of(row);
                let cb = idx.ref_index_of(col);
                out[[row, col]] = match (rb, cb) {
                    (Some(i), Some(j)) => a_ref[[i, j]],
                    (None, Some(j)) => a_cross[[row, j]],
                    (Some(i), None) => a_cross[[col, i]],
                    (None, None) => a_main[[row, col]],
                };
            }
        }
        out
    }

    fn sentinel_inputs(idx: &PatchIndexMap) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let n = idx.main_len();
        let b = idx.ref_len();
        let a_main = Array2::from_shape_fn((n, n), |(i, j)| 1000.0 + (i * n + j) as f64);
        let a_ref = Array2::from_shape_fn((b, b), |(i, j)| 2000.0 + (i * b + j) as f64);
        let a_cross = Array2::from_shape_fn((n, b), |(i, j)| 3000.0 + (i * b + j) as f64);
        (a_main, a_ref, a_cross)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let q = Array2::from_shape_fn((3, 4), |_| normal.sample(&mut rng));
        let k = Array2::from_shape_fn((5, 4), |_| normal.sample(&mut rng));
        let map = attention_maps(&q, &k).unwrap();
        assert_eq!(map.dim(), (3, 5));
        for row in map.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_of_single_pair_is_one() {
        let q = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let map = attention_maps(&q, &q).unwrap();
        assert_eq!(map[[0, 0]], 1.0);
    }

    #[test]
    fn orthogonal_query_gives_uniform_row() {
        // q row orthogonal to every k row: equal logits, uniform weights.
        let q = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap();
        let mut k = Array2::zeros((4, 3));
        k[[0, 0]] = 1.0;
        k[[1, 0]] = -2.0;
        k[[2, 1]] = 0.5;
        k[[3, 1]] = 3.0;
        let map = attention_maps(&q, &k).unwrap();
        for v in map.iter() {
            assert!((v - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn index_map_matches_four_by_four_box() {
        let mask = mask_from_box(4, 4, 1, 1, 2, 2);
        let idx = build_index_map(&mask, (4, 4)).unwrap().unwrap();
        assert_eq!(idx.blue_indices(), &[5, 6, 9, 10]);
        assert_eq!((idx.ref_h, idx.ref_w), (2, 2));
        assert_eq!(idx.white_indices().len(), 12);
    }

    #[test]
    fn index_map_full_and_single_cell_boxes() {
        let full = mask_from_box(4, 4, 0, 0, 4, 4);
        let idx = build_index_map(&full, (4, 4)).unwrap().unwrap();
        assert_eq!(idx.ref_len(), 16);
        assert!(idx.white_indices().is_empty());

        let single = mask_from_box(2, 2, 0, 0, 1, 1);
        let idx = build_index_map(&single, (2, 2)).unwrap().unwrap();
        assert_eq!(idx.blue_indices(), &[0]);
        assert_eq!(idx.white_indices(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_mask_skips_layer() {
        let data = Array2::<u8>::zeros((4, 4));
        let mask = Mask::new(data, MaskKind::User, MaskResolution::Latent).unwrap();
        assert!(build_index_map(&mask, (4, 4)).unwrap().is_none());
    }

    #[test]
    fn one_pixel_mask_survives_coarse_resolution() {
        let mask = mask_from_box(16, 16, 7, 7, 1, 1);
        let idx = build_index_map(&mask, (2, 2)).unwrap().unwrap();
        assert!(idx.ref_len() >= 1);
    }

    #[test]
    fn compose_matches_oracle_on_sentinels() {
        let mask = mask_from_box(4, 4, 1, 1, 2, 2);
        let idx = build_index_map(&mask, (4, 4)).unwrap().unwrap();
        let (a_main, a_ref, a_cross) = sentinel_inputs(&idx);
        let got = compose(&a_main, &a_ref, &a_cross, None, &idx, false).unwrap();
        let want = compose_oracle(&a_main, &a_ref, &a_cross, &idx);
        assert_eq!(got, want);
        // Spot-check the corner semantics directly.
        assert_eq!(got[[5, 5]], a_ref[[0, 0]]);
        assert_eq!(got[[0, 5]], a_cross[[0, 0]]);
        assert_eq!(got[[5, 0]], a_cross[[0, 0]]);
        assert_eq!(got[[0, 0]], a_main[[0, 0]]);
    }

    #[test]
    fn compose_degenerate_boxes() {
        let full = build_index_map(&mask_from_box(3, 3, 0, 0, 3, 3), (3, 3))
            .unwrap()
            .unwrap();
        let (a_main, a_ref, a_cross) = sentinel_inputs(&full);
        let got = compose(&a_main, &a_ref, &a_cross, None, &full, false).unwrap();
        assert_eq!(got, a_ref);
    }

    #[test]
    fn block_restriction_recovers_sources() {
        let mask = mask_from_box(5, 5, 2, 1, 2, 3);
        let idx = build_index_map(&mask, (5, 5)).unwrap().unwrap();
        let (a_main, a_ref, a_cross) = sentinel_inputs(&idx);
        let got = compose(&a_main, &a_ref, &a_cross, None, &idx, false).unwrap();
        for (i, &bi) in idx.blue_indices().iter().enumerate() {
            for (j, &bj) in idx.blue_indices().iter().enumerate() {
                assert_eq!(got[[bi, bj]], a_ref[[i, j]]);
            }
        }
        for &p in &idx.white_indices() {
            for &q in &idx.white_indices() {
                assert_eq!(got[[p, q]], a_main[[p, q]]);
            }
        }
    }

    #[test]
    fn renormalized_rows_sum_to_one() {
        let mask = mask_from_box(4, 4, 0, 0, 2, 2);
        let idx = build_index_map(&mask, (4, 4)).unwrap().unwrap();
        let n = idx.main_len();
        let b = idx.ref_len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let soft = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let q = Array2::from_shape_fn((rows, 6), |_| normal.sample(rng));
            let k = Array2::from_shape_fn((cols, 6), |_| normal.sample(rng));
            attention_maps(&q, &k).unwrap()
        };
        let a_main = soft(n, n, &mut rng);
        let a_ref = soft(b, b, &mut rng);
        let a_cross = soft(n, b, &mut rng);
        let raw = compose(&a_main, &a_ref, &a_cross, None, &idx, false).unwrap();
        let renorm = compose(&a_main, &a_ref, &a_cross, None, &idx, true).unwrap();
        // Mixed rows of the raw composite are generally off one.
        let mixed_row_off = raw
            .rows()
            .into_iter()
            .any(|r| (r.sum() - 1.0).abs() > 1e-3);
        assert!(mixed_row_off);
        for row in renorm.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn window_boundaries() {
        let w = InjectionWindow::new(0.4, 20).unwrap();
        let inside: Vec<usize> = w.source_steps().collect();
        assert_eq!(inside, (9..=20).collect::<Vec<_>>());
        assert_eq!(w.len(), 12);
        assert!(!w.contains_source(8));
        assert!(w.contains_source(9));

        let empty = InjectionWindow::new(1.0, 20).unwrap();
        assert!(empty.is_empty());
        let all = InjectionWindow::new(0.0, 20).unwrap();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn record_store_rejects_key_collision_and_bad_rows() {
        let mut store = AttentionRecordStore::new();
        let cap = LayerCapture {
            features: Array2::zeros((2, 2)),
            map: Array2::from_shape_vec((2, 2), vec![0.5, 0.5, 1.0, 0.0]).unwrap(),
        };
        store
            .insert(3, StepRecord { layers: vec![cap.clone()] })
            .unwrap();
        assert!(store.insert(3, StepRecord { layers: vec![cap] }).is_err());

        let bad = LayerCapture {
            features: Array2::zeros((2, 2)),
            map: Array2::from_shape_vec((2, 2), vec![0.7, 0.5, 1.0, 0.0]).unwrap(),
        };
        assert!(store.insert(4, StepRecord { layers: vec![bad] }).is_err());
    }

    proptest! {
        /// Partition totality: on random grids up to 6x6 with random boxes,
        /// every composite cell agrees with the brute-force oracle.
        #[test]
        fn compose_agrees_with_oracle(
            h in 1usize..=6, w in 1usize..=6,
            top_frac in 0.0f64..1.0, left_frac in 0.0f64..1.0,
            bh_frac in 0.0f64..1.0, bw_frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let top = ((h as f64 - 1.0) * top_frac) as usize;
            let left = ((w as f64 - 1.0) * left_frac) as usize;
            let bh = 1 + ((h - top - 1) as f64 * bh_frac) as usize;
            let bw = 1 + ((w - left - 1) as f64 * bw_frac) as usize;
            let idx = PatchIndexMap::from_box((h, w), top, left, bh, bw).unwrap();
            let n = idx.main_len();
            let b = idx.ref_len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let a_main = Array2::from_shape_fn((n, n), |_| normal.sample(&mut rng));
            let a_ref = Array2::from_shape_fn((b, b), |_| normal.sample(&mut rng));
            let a_cross = Array2::from_shape_fn((n, b), |_| normal.sample(&mut rng));
            let got = compose(&a_main, &a_ref, &a_cross, None, &idx, false).unwrap();
            let want = compose_oracle(&a_main, &a_ref, &a_cross, &idx);
            prop_assert_eq!(got, want);
        }
    }
}
