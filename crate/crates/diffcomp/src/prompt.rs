//! Prompt embeddings: normal, null, and exceptional.
//!
//! The exceptional prompt sets every token to one common id and skips the
//! positional table entirely, so the embedding matrix has identical rows and
//! carries no information. In any text cross-attention this forces
//! `k = T W^k` and `v = T W^v` to have identical rows, `q k^T` to have
//! constant rows, and the row-wise softmax to collapse to the uniform map
//! `1/l`; the attention output then shifts every patch embedding by the same
//! vector.
//!
//! The toy text encoder is a fixed-seed random token table plus a sinusoidal
//! positional table. It applies no attention or padding masks anywhere, so
//! the identical-rows property of the exceptional prompt is exact; a real
//! backbone adapter must likewise disable its internal masks to keep it.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::attention_maps;
use crate::error::{Error, Result};

pub const START_TOKEN: u32 = 0;
pub const END_TOKEN: u32 = 1;
pub const PAD_TOKEN: u32 = 2;
const FIRST_WORD_TOKEN: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptFlavor {
    Normal,
    Null,
    Exceptional,
}

/// An `l x d_text` conditioning matrix handed to the denoiser.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub matrix: Array2<f64>,
    pub flavor: PromptFlavor,
    /// Common token id, exceptional flavor only.
    pub token_value: Option<u32>,
    pub positions_applied: bool,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

/// Fixed-seed toy text encoder: token-embedding table + sinusoidal positions.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    token_table: Array2<f64>,
    pos_table: Array2<f64>,
    max_len: usize,
}

impl ToyTextEncoder {
    pub fn seeded(seed: u64, vocab_size: usize, d_text: usize, max_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d_text as f64).sqrt()).unwrap();
        let token_table =
            Array2::from_shape_fn((vocab_size, d_text), |_| normal.sample(&mut rng));
        let pos_table = Array2::from_shape_fn((max_len, d_text), |(p, i)| {
            let rate = (p as f64) / 10_000f64.powf((2 * (i / 2)) as f64 / d_text as f64);
            if i % 2 == 0 {
                rate.sin()
            } else {
                rate.cos()
            }
        });
        ToyTextEncoder {
            token_table,
            pos_table,
            max_len,
        }
    }

    /// Rebuilds an encoder from raw tables (weight-blob loading).
    pub fn from_tables(token_table: Array2<f64>, pos_table: Array2<f64>) -> Self {
        let max_len = pos_table.nrows();
        ToyTextEncoder {
            token_table,
            pos_table,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.nrows()
    }

    pub fn d_text(&self) -> usize {
        self.token_table.ncols()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn token_table(&self) -> &Array2<f64> {
        &self.token_table
    }

    pub fn pos_table(&self) -> &Array2<f64> {
        &self.pos_table
    }

    fn embed_row(&self, token: u32) -> Array1<f64> {
        self.token_table.row(token as usize).to_owned()
    }

    /// Toy word tokenizer: whitespace split, FNV-1a hash into the
    /// non-special id range. Deterministic across runs and platforms.
    pub fn tokenize_word(&self, word: &str) -> u32 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let span = self.vocab_size() as u64 - FIRST_WORD_TOKEN as u64;
        FIRST_WORD_TOKEN + (hash % span) as u32
    }

    fn embed_ids(&self, ids: &[u32]) -> Array2<f64> {
        let mut m = Array2::zeros((ids.len(), self.d_text()));
        for (row, &id) in ids.iter().enumerate() {
            let emb = self.embed_row(id);
            for (col, v) in emb.iter().enumerate() {
                m[[row, col]] = v + self.pos_table[[row, col]];
            }
        }
        m
    }
}

/// Builds the exceptional prompt: `len` copies of one token embedding, no
/// special tokens, no positional addition.
pub fn build_exceptional(
    encoder: &ToyTextEncoder,
    token_value: u32,
    len: usize,
) -> Result<PromptEmbedding> {
    if token_value as usize >= encoder.vocab_size() {
        return Err(Error::config(format!(
            "token value {token_value} outside vocabulary of size {}",
            encoder.vocab_size()
        )));
    }
    if len == 0 {
        return Err(Error::config("prompt length must be >= 1"));
    }
    let row = encoder.embed_row(token_value);
    let mut matrix = Array2::zeros((len, encoder.d_text()));
    for mut r in matrix.rows_mut() {
        r.assign(&row);
    }
    Ok(PromptEmbedding {
        matrix,
        flavor: PromptFlavor::Exceptional,
        token_value: Some(token_value),
        positions_applied: false,
    })
}

/// Builds the null prompt: empty text, i.e. `[start][end][pad]...`, with
/// positions applied.
pub fn build_null(encoder: &ToyTextEncoder) -> PromptEmbedding {
    let mut ids = vec![PAD_TOKEN; encoder.max_len()];
    ids[0] = START_TOKEN;
    if encoder.max_len() > 1 {
        ids[1] = END_TOKEN;
    }
    PromptEmbedding {
        matrix: encoder.embed_ids(&ids),
        flavor: PromptFlavor::Null,
        token_value: None,
        positions_applied: true,
    }
}

/// Builds a normal prompt: `[start] words... [end] [pad]...` with positions.
/// Over-length text is truncated to fit (keeping the end token) with a
/// warning on stderr; empty text delegates to [`build_null`].
pub fn build_normal(encoder: &ToyTextEncoder, text: &str) -> PromptEmbedding {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return build_null(encoder);
    }
    let max_words = encoder.max_len().saturating_sub(2);
    if words.len() > max_words {
        eprintln!(
            "warning: prompt truncated from {} to {} tokens",
            words.len(),
            max_words
        );
    }
    let mut ids = Vec::with_capacity(encoder.max_len());
    ids.push(START_TOKEN);
    for w in words.iter().take(max_words) {
        ids.push(encoder.tokenize_word(w));
    }
    ids.push(END_TOKEN);
    while ids.len() < encoder.max_len() {
        ids.push(PAD_TOKEN);
    }
    PromptEmbedding {
        matrix: encoder.embed_ids(&ids),
        flavor: PromptFlavor::Normal,
        token_value: None,
        positions_applied: true,
    }
}

/// Text cross-attention map under the exceptional prompt.
///
/// `features` is `(s, d1)`, `wq` is `(d1, d1)`, `wk` is `(d_text, d1)`.
/// Returns the `(s, l)` row-stochastic map; with an exceptional prompt every
/// entry equals `1/l` up to rounding. Any other flavor is a contract error:
/// callers wanting general maps should use the backbone's attention path.
pub fn uniform_cross_attention(
    features: &Array2<f64>,
    prompt: &PromptEmbedding,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
) -> Result<Array2<f64>> {
    if prompt.flavor != PromptFlavor::Exceptional {
        return Err(Error::contract(
            "uniform_cross_attention requires an exceptional prompt",
        ));
    }
    let q = features.dot(wq);
    let k = prompt.matrix.dot(wk);
    attention_maps(&q, &k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> ToyTextEncoder {
        ToyTextEncoder::seeded(0, 8192, 16, 77)
    }

    fn rows_identical(m: &Array2<f64>, tol: f64) -> bool {
        let first = m.row(0);
        m.rows()
            .into_iter()
            .all(|r| r.iter().zip(first.iter()).all(|(a, b)| (a - b).abs() <= tol))
    }

    #[test]
    fn exceptional_rows_identical() {
        let enc = encoder();
        let p = build_exceptional(&enc, 7788, 77).unwrap();
        assert_eq!(p.matrix.nrows(), 77);
        assert!(rows_identical(&p.matrix, 0.0));
        assert!(!p.positions_applied);

        let single = build_exceptional(&enc, 0, 1).unwrap();
        assert_eq!(single.matrix.nrows(), 1);
    }

    #[test]
    fn exceptional_differs_by_token_but_rows_stay_identical() {
        let enc = encoder();
        let a = build_exceptional(&enc, 7788, 8).unwrap();
        let b = build_exceptional(&enc, 42, 8).unwrap();
        assert!(a.matrix != b.matrix);
        assert!(rows_identical(&a.matrix, 0.0));
        assert!(rows_identical(&b.matrix, 0.0));
    }

    #[test]
    fn exceptional_rejects_out_of_vocab() {
        let enc = encoder();
        assert!(matches!(
            build_exceptional(&enc, 8192, 77),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn null_prompt_rows_differ_and_deterministic() {
        let enc = encoder();
        let a = build_null(&enc);
        let b = build_null(&enc);
        assert_eq!(a.matrix, b.matrix);
        assert!(!rows_identical(&a.matrix, 1e-9));
        // Row 0 is the start token plus position 0.
        let expected = enc.embed_row(START_TOKEN) + enc.pos_table().row(0).to_owned();
        for (x, y) in a.matrix.row(0).iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn normal_prompt_deterministic_and_empty_delegates_to_null() {
        let enc = encoder();
        let a = build_normal(&enc, "a photo");
        let b = build_normal(&enc, "a photo");
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.flavor, PromptFlavor::Normal);

        let empty = build_normal(&enc, "   ");
        assert_eq!(empty.flavor, PromptFlavor::Null);
        assert_eq!(empty.matrix, build_null(&enc).matrix);
    }

    #[test]
    fn over_length_prompt_truncates_to_max_len() {
        let enc = ToyTextEncoder::seeded(0, 8192, 16, 6);
        let long = "one two three four five six seven eight";
        let p = build_normal(&enc, long);
        assert_eq!(p.matrix.nrows(), 6);
    }

    #[test]
    fn uniform_map_entries_and_token_independence() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let features = Array2::from_shape_fn((12, 10), |_| normal.sample(&mut rng));
        let wq = Array2::from_shape_fn((10, 10), |_| normal.sample(&mut rng));
        let wk = Array2::from_shape_fn((16, 10), |_| normal.sample(&mut rng));

        let p1 = build_exceptional(&enc, 7788, 77).unwrap();
        let map1 = uniform_cross_attention(&features, &p1, &wq, &wk).unwrap();
        for v in map1.iter() {
            assert!((v - 1.0 / 77.0).abs() <= 1e-6);
        }

        let p2 = build_exceptional(&enc, 42, 77).unwrap();
        let map2 = uniform_cross_attention(&features, &p2, &wq, &wk).unwrap();
        for (a, b) in map1.iter().zip(map2.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }

        let single = build_exceptional(&enc, 3, 1).unwrap();
        let wk1 = Array2::from_shape_fn((16, 10), |_| normal.sample(&mut rng));
        let map_single = uniform_cross_attention(&features, &single, &wq, &wk1).unwrap();
        for v in map_single.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn uniform_map_rejects_normal_flavor() {
        let enc = encoder();
        let p = build_normal(&enc, "a cat");
        let features = Array2::zeros((4, 10));
        let wq = Array2::zeros((10, 10));
        let wk = Array2::zeros((16, 10));
        assert!(matches!(
            uniform_cross_attention(&features, &p, &wq, &wk),
            Err(Error::Contract(_))
        ));
    }
}
