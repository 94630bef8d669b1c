//! Attribute taxonomy, identity profiles and key-word captions.
//!
//! The category lists live in `assets/attributes.json`; the token vocabulary in
//! `assets/vocabulary.json` is `<pad>` followed by every `slot:value` word in
//! slot order. Both files are versioned with the crate.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FOREGROUND: usize = 14;
pub const NUM_BACKGROUND: usize = 4;
pub const CAPTION_LEN: usize = NUM_FOREGROUND + NUM_BACKGROUND;
pub const PAD_WORD: &str = "<pad>";
pub const PAD_ID: usize = 0;

pub const ATTRIBUTES_JSON: &str = include_str!("../../assets/attributes.json");
pub const VOCABULARY_JSON: &str = include_str!("../../assets/vocabulary.json");

/// Foreground slot indices, in taxonomy order.
pub mod fg {
    pub const GENDER: usize = 0;
    pub const AGE: usize = 1;
    pub const BUILD: usize = 2;
    pub const HAIR_STYLE: usize = 3;
    pub const HAIR_COLOR: usize = 4;
    pub const HAT: usize = 5;
    pub const UPPER_COLOR: usize = 6;
    pub const UPPER_STYLE: usize = 7;
    pub const SLEEVE: usize = 8;
    pub const LOWER_COLOR: usize = 9;
    pub const LOWER_STYLE: usize = 10;
    pub const SHOES: usize = 11;
    pub const BAG: usize = 12;
    pub const BAG_COLOR: usize = 13;
}

/// Background slot indices.
pub mod bg {
    pub const VIEWPOINT: usize = 0;
    pub const WEATHER: usize = 1;
    pub const ILLUMINATION: usize = 2;
    pub const SCENE: usize = 3;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Slot {
    pub slot: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Taxonomy {
    pub version: u32,
    pub foreground: Vec<Slot>,
    pub background: Vec<Slot>,
}

impl Taxonomy {
    pub fn builtin() -> &'static Taxonomy {
        static TAXONOMY: OnceLock<Taxonomy> = OnceLock::new();
        TAXONOMY.get_or_init(|| {
            serde_json::from_str(ATTRIBUTES_JSON).expect("bundled attributes.json is valid")
        })
    }

    /// Number of distinct foreground tuples.
    pub fn foreground_cardinality(&self) -> u128 {
        self.foreground.iter().map(|s| s.values.len() as u128).product()
    }

    pub fn word(slot: &Slot, value: usize) -> String {
        format!("{}:{}", slot.slot, slot.values[value])
    }

    /// `<pad>` followed by every foreground then background word.
    pub fn vocabulary_words(&self) -> Vec<String> {
        std::iter::once(PAD_WORD.to_string())
            .chain(
                self.foreground
                    .iter()
                    .chain(&self.background)
                    .flat_map(|s| (0..s.values.len()).map(move |v| Self::word(s, v))),
            )
            .collect()
    }
}

/// Closed word list; index is the token id.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| Vocabulary {
            words: serde_json::from_str(VOCABULARY_JSON).expect("bundled vocabulary.json is valid"),
        })
    }

    pub fn from_words(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Data(format!("word `{word}` is not in the vocabulary")))
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeProfile {
    pub identity_id: u32,
    pub foreground: [u8; NUM_FOREGROUND],
    pub background: [u8; NUM_BACKGROUND],
}

impl AttributeProfile {
    pub fn with_background(&self, background: [u8; NUM_BACKGROUND]) -> Self {
        Self {
            background,
            ..self.clone()
        }
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let fg_ok = self
            .foreground
            .iter()
            .zip(&taxonomy.foreground)
            .all(|(&v, s)| (v as usize) < s.values.len());
        let bg_ok = self
            .background
            .iter()
            .zip(&taxonomy.background)
            .all(|(&v, s)| (v as usize) < s.values.len());
        if fg_ok && bg_ok {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "identity {} has a slot value outside its category set",
                self.identity_id
            )))
        }
    }
}

/// Draws `count` identities with pairwise-distinct foreground tuples.
pub fn gen_identities(count: usize, seed: u64) -> Result<Vec<AttributeProfile>> {
    gen_identities_with(Taxonomy::builtin(), count, seed)
}

pub fn gen_identities_with(
    taxonomy: &Taxonomy,
    count: usize,
    seed: u64,
) -> Result<Vec<AttributeProfile>> {
    if count < 2 {
        return Err(Error::Config(format!("need at least 2 identities, got {count}")));
    }
    if taxonomy.foreground.len() != NUM_FOREGROUND || taxonomy.background.len() != NUM_BACKGROUND {
        return Err(Error::Config(format!(
            "taxonomy must have {NUM_FOREGROUND} foreground and {NUM_BACKGROUND} background slots"
        )));
    }
    let capacity = taxonomy.foreground_cardinality();
    if count as u128 > capacity {
        return Err(Error::Config(format!(
            "{count} identities exceed the {capacity} distinct foreground combinations"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut fgv = [0u8; NUM_FOREGROUND];
        for (v, s) in fgv.iter_mut().zip(&taxonomy.foreground) {
            *v = rng.random_range(0..s.values.len()) as u8;
        }
        if !seen.insert(fgv) {
            continue;
        }
        out.push(AttributeProfile {
            identity_id: out.len() as u32,
            foreground: fgv,
            background: [0; NUM_BACKGROUND],
        });
    }
    Ok(out)
}

pub fn random_background<R: Rng + ?Sized>(rng: &mut R) -> [u8; NUM_BACKGROUND] {
    let t = Taxonomy::builtin();
    let mut out = [0u8; NUM_BACKGROUND];
    for (v, s) in out.iter_mut().zip(&t.background) {
        *v = rng.random_range(0..s.values.len()) as u8;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub identity_id: u32,
    pub domain_id: u32,
    pub tokens: Vec<String>,
}

/// Key-word caption: the 14 foreground words then the 4 background words.
pub fn caption_of(profile: &AttributeProfile, background: &[u8; NUM_BACKGROUND], domain_id: u32) -> Caption {
    let t = Taxonomy::builtin();
    let tokens = profile
        .foreground
        .iter()
        .zip(&t.foreground)
        .chain(background.iter().zip(&t.background))
        .map(|(&v, s)| Taxonomy::word(s, v as usize))
        .collect();
    Caption {
        identity_id: profile.identity_id,
        domain_id,
        tokens,
    }
}

/// Inverse of [`caption_of`]: recovers the slot values from a caption.
pub fn parse_caption(tokens: &[String]) -> Result<([u8; NUM_FOREGROUND], [u8; NUM_BACKGROUND])> {
    if tokens.len() != CAPTION_LEN {
        return Err(Error::Data(format!(
            "caption has {} tokens, expected {CAPTION_LEN}",
            tokens.len()
        )));
    }
    let t = Taxonomy::builtin();
    let mut fgv = [0u8; NUM_FOREGROUND];
    let mut bgv = [0u8; NUM_BACKGROUND];
    let slots = t.foreground.iter().chain(&t.background);
    for (i, (tok, slot)) in tokens.iter().zip(slots).enumerate() {
        let value = slot
            .values
            .iter()
            .position(|v| format!("{}:{v}", slot.slot) == *tok)
            .ok_or_else(|| Error::Data(format!("token `{tok}` does not name a `{}` value", slot.slot)))?;
        if i < NUM_FOREGROUND {
            fgv[i] = value as u8;
        } else {
            bgv[i - NUM_FOREGROUND] = value as u8;
        }
    }
    Ok((fgv, bgv))
}
