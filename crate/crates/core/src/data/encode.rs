//! Turning samples into normalized embedding caches.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::cache::EmbeddingCache;
use crate::data::dataset::Sample;
use crate::data::vocab;
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSplit {
    pub images: EmbeddingCache,
    pub texts: EmbeddingCache,
}

/// L2-normalized global image embeddings, one row per sample, in sample order.
pub fn encode_images(samples: &[Sample], image: &ImageEncoder) -> Result<EmbeddingCache> {
    let d = image.config().embed_dim;
    let rows: Vec<Vec<f32>> = samples
        .par_iter()
        .map_init(
            || image.session(),
            |s, x| Ok(s.embed(&x.parts)?.l2_normalize()?.into_data()),
        )
        .collect::<Result<_>>()?;
    EmbeddingCache::new(d, samples.iter().map(|s| s.id.clone()).collect(), rows.concat())
}

/// L2-normalized caption embeddings, one row per sample, in sample order.
pub fn encode_texts(samples: &[Sample], text: &TextEncoder) -> Result<EmbeddingCache> {
    let d = text.config().embed_dim;
    let rows: Vec<Vec<f32>> = samples
        .par_iter()
        .map_init(
            || text.session(),
            |s, x| Ok(s.encode(&x.tokens)?.embedding.l2_normalize()?.into_data()),
        )
        .collect::<Result<_>>()?;
    EmbeddingCache::new(d, samples.iter().map(|s| s.id.clone()).collect(), rows.concat())
}

pub fn encode_samples(samples: &[Sample], text: &TextEncoder, image: &ImageEncoder) -> Result<EncodedSplit> {
    Ok(EncodedSplit {
        images: encode_images(samples, image)?,
        texts: encode_texts(samples, text)?,
    })
}

/// Writes `{name}_images.dcec` and `{name}_texts.dcec` into `dir`.
pub fn encode_dataset(
    samples: &[Sample],
    text: &TextEncoder,
    image: &ImageEncoder,
    dir: impl AsRef<Path>,
    name: &str,
) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let enc = encode_samples(samples, text, image)?;
    let ip = dir.join(format!("{name}_images.dcec"));
    let tp = dir.join(format!("{name}_texts.dcec"));
    enc.images.write(&ip)?;
    enc.texts.write(&tp)?;
    Ok((ip, tp))
}

/// Normalized embeddings of the class prompts, `num_classes×d`.
pub fn encode_class_prompts(text: &TextEncoder, num_classes: usize) -> Result<Tensor<f32>> {
    if num_classes == 0 || num_classes > vocab::MAX_CONCEPTS {
        return Err(Error::input(format!("cannot build prompts for {num_classes} classes")));
    }
    let mut s = text.session();
    let rows = (0..num_classes)
        .map(|c| Ok(s.encode(&vocab::class_prompt(c))?.embedding.l2_normalize()?.into_data()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}
