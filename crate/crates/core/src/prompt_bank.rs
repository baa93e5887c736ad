//! Dual-category text prompts (tumor foreground vs healthy background) and
//! their aggregation into one unit embedding per category.
//!
//! A bank holds state-level phrases containing `{obj}` (the organ name) and
//! template-level sentences containing `{c}` (a state phrase). Expansion is the
//! cartesian product templates x states for each category.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TagsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub organ_name: String,
    pub fg_states: Vec<String>,
    pub bg_states: Vec<String>,
    pub templates: Vec<String>,
}

impl PromptBank {
    /// Representative default bank for `organ`.
    pub fn default_for(organ: &str) -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        PromptBank {
            organ_name: organ.to_string(),
            fg_states: s(&[
                "{obj} with tumor",
                "lesion present in the {obj}",
                "{obj} with a lesion",
                "abnormal {obj}",
                "tumor in the {obj}",
            ]),
            bg_states: s(&[
                "healthy {obj}",
                "lesion absent in the {obj}",
                "normal {obj}",
                "{obj} without tumor",
                "tumor-free {obj}",
            ]),
            templates: s(&[
                "{c}",
                "a CT scan of {c}.",
                "a cropped CT scan of {c}.",
                "a flipped CT scan of {c}.",
                "a rotated CT scan of {c}.",
                "a zoomed CT scan of {c}.",
                "a CT scan of {c} with shifted intensity.",
            ]),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TagsError::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("prompt bank serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.organ_name.trim().is_empty() {
            return Err(TagsError::PromptBank("organ name is empty".into()));
        }
        if self.templates.is_empty() {
            return Err(TagsError::PromptBank("template list is empty".into()));
        }
        if self.fg_states.is_empty() || self.bg_states.is_empty() {
            return Err(TagsError::PromptBank("each category needs at least one state".into()));
        }
        if let Some(t) = self.templates.iter().find(|t| !t.contains("{c}")) {
            return Err(TagsError::PromptBank(format!("template {t:?} has no {{c}} placeholder")));
        }
        Ok(())
    }

    /// Expands every template against every state, per category.
    pub fn expand(&self) -> Result<(Vec<String>, Vec<String>)> {
        self.validate()?;
        let expand = |states: &[String]| -> Result<Vec<String>> {
            let mut out = Vec::with_capacity(states.len() * self.templates.len());
            for t in &self.templates {
                for s in states {
                    let text = t.replace("{c}", s).replace("{obj}", &self.organ_name);
                    if let Some(i) = text.find('{') {
                        if text[i..].contains('}') {
                            return Err(TagsError::PromptBank(format!("unresolved placeholder in {text:?}")));
                        }
                    }
                    out.push(text);
                }
            }
            Ok(out)
        };
        Ok((expand(&self.fg_states)?, expand(&self.bg_states)?))
    }
}

/// Text encoder backend. Implementations must be deterministic per text.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic stand-in encoder: each distinct string maps to a pseudo-random
/// unit vector seeded from SHA-256 of `(seed, text)`. Only uniform draws and
/// `sqrt` are used, so outputs are bit-identical across platforms.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    pub seed: u64,
    pub width: usize,
}

impl HashTextEncoder {
    pub fn new(seed: u64, width: usize) -> Self {
        HashTextEncoder { seed, width }
    }
}

impl TextEncoder for HashTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.width).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Embeddings exported ahead of time from a pretrained text encoder, stored
/// as a JSON object `{ "width": c, "embeddings": { text: [f64; c] } }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedTextEncoder {
    pub width: usize,
    pub embeddings: HashMap<String, Vec<f64>>,
}

impl PrecomputedTextEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TagsError::io(path, e))?;
        let enc: Self = serde_json::from_str(&text)?;
        if let Some((k, v)) = enc.embeddings.iter().find(|(_, v)| v.len() != enc.width) {
            return Err(TagsError::PromptBank(format!(
                "embedding for {k:?} has width {}, expected {}",
                v.len(),
                enc.width
            )));
        }
        Ok(enc)
    }
}

impl TextEncoder for PrecomputedTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.embeddings
            .get(text)
            .cloned()
            .ok_or_else(|| TagsError::PromptBank(format!("no precomputed embedding for {text:?}")))
    }
}

/// `F_text`: one unit embedding per category, foreground first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingPair {
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

impl TextEmbeddingPair {
    pub fn width(&self) -> usize {
        self.fg.len()
    }

    /// `c x 2` matrix with columns `(fg, bg)`.
    pub fn as_matrix(&self) -> ndarray::Array2<f64> {
        let c = self.width();
        ndarray::Array2::from_shape_fn((c, 2), |(i, j)| if j == 0 { self.fg[i] } else { self.bg[i] })
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn category_embedding(texts: &[String], enc: &dyn TextEncoder) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(TagsError::PromptBank("empty prompt list".into()));
    }
    let c = enc.width();
    // Normalized embeddings are summed in sorted order so the result does not
    // depend on list order.
    let mut units = Vec::with_capacity(texts.len());
    for t in texts {
        let e = enc.encode(t)?;
        if e.len() != c {
            return Err(TagsError::ShapeMismatch(format!(
                "encoder returned width {} for {t:?}, declared {c}",
                e.len()
            )));
        }
        units.push(normalized(&e));
    }
    units.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let mut mean = vec![0.0; c];
    for u in &units {
        for (m, x) in mean.iter_mut().zip(u) {
            *m += x;
        }
    }
    let n = units.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let out = normalized(&mean);
    if out.iter().all(|&x| x == 0.0) {
        return Err(TagsError::PromptBank("category embeddings cancel out".into()));
    }
    Ok(out)
}

/// Normalizes each text embedding, averages per category and re-normalizes.
pub fn encode_dual_category(fg_texts: &[String], bg_texts: &[String], enc: &dyn TextEncoder) -> Result<TextEmbeddingPair> {
    Ok(TextEmbeddingPair {
        fg: category_embedding(fg_texts, enc)?,
        bg: category_embedding(bg_texts, enc)?,
    })
}

/// Expands `bank` and encodes both categories.
pub fn text_features(bank: &PromptBank, enc: &dyn TextEncoder) -> Result<TextEmbeddingPair> {
    let (fg, bg) = bank.expand()?;
    encode_dual_category(&fg, &bg, enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bank() -> PromptBank {
        PromptBank {
            organ_name: "kidney".into(),
            fg_states: vec!["{obj} with tumor".into()],
            bg_states: vec!["healthy {obj}".into()],
            templates: vec!["{c}".into()],
        }
    }

    #[test]
    fn one_by_one_expansion() {
        let (fg, bg) = tiny_bank().expand().unwrap();
        assert_eq!(fg, vec!["kidney with tumor"]);
        assert_eq!(bg, vec!["healthy kidney"]);
    }

    #[test]
    fn expansion_counts_multiply() {
        let b = PromptBank::default_for("liver");
        let (fg, bg) = b.expand().unwrap();
        assert_eq!(fg.len(), b.templates.len() * b.fg_states.len());
        assert_eq!(bg.len(), b.templates.len() * b.bg_states.len());
        assert!(fg.iter().chain(&bg).all(|t| !t.contains('{') && t.contains("liver")));
    }

    #[test]
    fn bad_banks_are_rejected() {
        let mut b = tiny_bank();
        b.templates.clear();
        assert!(b.expand().is_err());
        let mut b = tiny_bank();
        b.fg_states = vec!["{organ} tumor".into()];
        assert!(b.expand().is_err());
        let mut b = tiny_bank();
        b.templates = vec!["no placeholder".into()];
        assert!(b.expand().is_err());
    }

    #[test]
    fn bank_toml_round_trip() {
        let b = PromptBank::default_for("pancreas");
        let back: PromptBank = toml::from_str(&b.to_toml()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn hash_encoder_is_unit_and_deterministic() {
        let e = HashTextEncoder::new(7, 32);
        let a = e.encode("healthy kidney").unwrap();
        assert_eq!(a, e.encode("healthy kidney").unwrap());
        assert_ne!(a, e.encode("kidney with tumor").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, HashTextEncoder::new(8, 32).encode("healthy kidney").unwrap());
    }

    #[test]
    fn single_text_pair_is_the_normalized_embedding() {
        let e = HashTextEncoder::new(1, 16);
        let (fg, bg) = tiny_bank().expand().unwrap();
        let pair = encode_dual_category(&fg, &bg, &e).unwrap();
        let want = e.encode("kidney with tumor").unwrap();
        for (a, b) in pair.fg.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    struct Axes;
    impl TextEncoder for Axes {
        fn width(&self) -> usize {
            3
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>> {
            Ok(match text {
                "a" => vec![2.0, 0.0, 0.0],
                "b" => vec![0.0, 5.0, 0.0],
                _ => vec![0.0, 0.0, 1.0],
            })
        }
    }

    #[test]
    fn orthogonal_pair_mean_has_cosine_one_over_root_two() {
        let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let pair = encode_dual_category(&t(&["a", "b"]), &t(&["c"]), &Axes).unwrap();
        let norm: f64 = pair.fg.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((pair.fg[0] - inv_sqrt2).abs() < 1e-12);
        assert!((pair.fg[1] - inv_sqrt2).abs() < 1e-12);
        // order independence
        let swapped = encode_dual_category(&t(&["b", "a"]), &t(&["c"]), &Axes).unwrap();
        assert_eq!(swapped, pair);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        struct Liar;
        impl TextEncoder for Liar {
            fn width(&self) -> usize {
                4
            }
            fn encode(&self, _: &str) -> Result<Vec<f64>> {
                Ok(vec![1.0; 3])
            }
        }
        let t = vec!["x".to_string()];
        assert!(matches!(encode_dual_category(&t, &t, &Liar), Err(TagsError::ShapeMismatch(_))));
    }

    proptest::proptest! {
        #[test]
        fn category_embedding_ignores_order(
            texts in proptest::collection::vec("[a-z ]{1,12}", 1..8),
            rot in 0usize..8,
        ) {
            let e = HashTextEncoder::new(3, 16);
            let mut shuffled = texts.clone();
            shuffled.reverse();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            let a = encode_dual_category(&texts, &texts, &e).unwrap();
            let b = encode_dual_category(&shuffled, &texts, &e).unwrap();
            for (x, y) in a.fg.iter().zip(&b.fg) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
