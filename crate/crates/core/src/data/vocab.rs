//! The mock token vocabulary and the shared "world" that ties raw image parts
//! to words.
//!
//! Every token has a fixed signature in raw patch space. A concept's image
//! parts are noisy copies of its token's signature, and the mock text encoder
//! embeds a token by projecting its signature with the same patch projection
//! the image encoder uses. That is what makes the frozen mock encoders behave
//! like a jointly pretrained pair: matched images and captions land near each
//! other before any training.

use rand_distr::{Distribution, StandardNormal};

use crate::rng;

pub const VOCAB_SIZE: usize = 256;
pub const RAW_PATCH_DIM: usize = 32;

/// Seed of the signature streams. Not configurable: it defines the world.
pub const WORLD_SEED: u64 = 0x00d1_c11b;

pub const THIS: u32 = 0;
pub const IS: u32 = 1;
pub const A: u32 = 2;
pub const PHOTO: u32 = 3;
pub const OF: u32 = 4;
/// Function words used to pad captions.
pub const FILLERS: std::ops::Range<u32> = 5..16;
pub const CONCEPT_BASE: u32 = 16;
pub const MAX_CONCEPTS: usize = VOCAB_SIZE - CONCEPT_BASE as usize;

const FUNCTION_WORD_SCALE: f64 = 0.4;

pub fn concept_token(concept: usize) -> u32 {
    assert!(concept < MAX_CONCEPTS, "concept {concept} out of range");
    CONCEPT_BASE + concept as u32
}

pub fn token_concept(token: u32) -> Option<usize> {
    (CONCEPT_BASE..VOCAB_SIZE as u32)
        .contains(&token)
        .then(|| (token - CONCEPT_BASE) as usize)
}

/// Raw-space signature of a token. Concept tokens have standard normal
/// coordinates; template and filler words are smaller.
pub fn signature(token: u32) -> Vec<f32> {
    let mut s = rng::stream(WORLD_SEED, &format!("world.signature.{token}"));
    let scale = if token >= CONCEPT_BASE {
        1.0
    } else {
        FUNCTION_WORD_SCALE
    };
    (0..RAW_PATCH_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut s);
            (z * scale) as f32
        })
        .collect()
}

pub fn concept_prototype(concept: usize) -> Vec<f32> {
    signature(concept_token(concept))
}

/// Tokens of "This is a photo of a {LABEL}" where the label is the concept
/// whose id equals the class id.
pub fn class_prompt(class: usize) -> Vec<u32> {
    vec![THIS, IS, A, PHOTO, OF, A, concept_token(class)]
}
