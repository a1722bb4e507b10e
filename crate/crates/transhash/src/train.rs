//! The training loop, checkpoints, and batch encoding.
//!
//! Training is single-owner and fully deterministic given the config seed:
//! one ChaCha stream drives parameter init, batch sampling, and
//! augmentation in a fixed order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{augment, AugmentConfig, ByteReader, Dataset};
use crate::dual_stream::{DualStreamConfig, HashVectorSet};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, SimilarityBatch};
use crate::model::{hash_values, quantization_gap, TransHashModel};
use crate::optim::{SgdConfig, SgdOptimizer};
use crate::retrieval::{binarize, parallel_map, HashCode};
use crate::tensor::{Tape, Tensor};

const THCK_MAGIC: &[u8; 4] = b"THCK";
const THCK_VERSION: u16 = 1;

/// Everything a run needs. Every field of every sub-config is addressable
/// from the TOML config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub dual_stream: DualStreamConfig,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            dual_stream: DualStreamConfig::default(),
            loss: LossConfig::default(),
            sgd: SgdConfig::default(),
            batch_size: 16,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dual_stream.validate()?;
        self.loss.validate()?;
        self.sgd.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size must be at least 2 (pairs need two images), got {}",
                self.batch_size
            )));
        }
        if self.dual_stream.feature_dim != self.backbone.embed_dim {
            return Err(Error::config(format!(
                "dual_stream.feature_dim {} must equal backbone.embed_dim {}",
                self.dual_stream.feature_dim, self.backbone.embed_dim
            )));
        }
        self.dual_stream.group_sizes(self.backbone.num_patches())?;
        if self.augment.crop_padding >= self.backbone.image_size {
            return Err(Error::config(format!(
                "augment.crop_padding {} must be smaller than backbone.image_size {}",
                self.augment.crop_padding, self.backbone.image_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialized form, embedded in checkpoints.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────

/// A trained model plus everything needed to reproduce or resume the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config: TrainConfig,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_model(&self) -> Result<TransHashModel> {
        TransHashModel::from_named(
            self.config.backbone.clone(),
            self.config.dual_stream.clone(),
            &self.params,
        )
    }

    // Binary layout: magic "THCK" | u16 version | u32 config length | config
    // TOML bytes | u64 step | 32-byte rng seed | u128 rng word position |
    // u32 tensor count, then per tensor: u16 name length | name | u8 ndim |
    // ndim x u64 dims | numel x f64 (little-endian bit patterns).

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(THCK_MAGIC);
        buf.extend_from_slice(&THCK_VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.shape.len() as u8);
            for &d in &tensor.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &tensor.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        let magic = r.take(4, "magic")?;
        if magic != THCK_MAGIC {
            return Err(r.format_err(0, format!("bad magic {magic:?}, expected {THCK_MAGIC:?}")));
        }
        let version = r.u16("version")?;
        if version != THCK_VERSION {
            return Err(r.format_err(4, format!("unsupported version {version}")));
        }
        let cfg_len = r.u32("config length")? as usize;
        let config_text = String::from_utf8(r.take(cfg_len, "config")?.to_vec())
            .map_err(|e| r.format_err(10, format!("config is not UTF-8: {e}")))?;
        let config = TrainConfig::from_toml(&config_text)?;
        let step = r.u64("step")?;
        let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|e| r.format_err(r.pos as u64, format!("name is not UTF-8: {e}")))?;
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(data, shape)?.with_grad()));
        }
        if r.pos != bytes.len() {
            return Err(r.format_err(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            config_text,
            config,
            step,
            rng_seed,
            rng_word_pos,
            params,
        })
    }
}

// ── Training ────────────────────────────────────────────────────────

/// Per-step log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    /// Bayes (cross-entropy) term, global + local.
    pub loss_bayes: f64,
    /// Quantization term, global + local (logged even when lambda = 0).
    pub loss_quant: f64,
    /// Batch mean of `||h| - 1|` over all hash entries.
    pub quant_gap: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Writes the per-step metric stream as CSV.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("step,lr,loss_bayes,loss_quant,quant_gap\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.step, m.lr, m.loss_bayes, m.loss_quant, m.quant_gap
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Runs the full pairwise training loop over the dataset's train split.
///
/// Each step samples a batch, augments it, forwards every image through the
/// single shared model, builds the similarity structure over all in-batch
/// pairs, and applies one SGD update. A non-finite loss aborts with a
/// diagnostic naming the batch.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.height != cfg.backbone.image_size || dataset.width != cfg.backbone.image_size {
        return Err(Error::config(format!(
            "dataset is {}x{}, backbone.image_size is {}",
            dataset.height, dataset.width, cfg.backbone.image_size
        )));
    }
    let train_indices = dataset.tagged_indices(crate::data::Split::Train);
    if train_indices.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "train split has {} images, batch_size is {}",
            train_indices.len(),
            cfg.batch_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TransHashModel::init(cfg.backbone.clone(), cfg.dual_stream.clone(), &mut rng)?;
    let mut optimizer = SgdOptimizer::new(cfg.sgd.clone());
    let mut metrics = Vec::with_capacity(cfg.sgd.total_steps as usize);

    for step in 1..=cfg.sgd.total_steps {
        // sample a batch of distinct train images
        let batch: Vec<usize> =
            rand::seq::index::sample(&mut rng, train_indices.len(), cfg.batch_size)
                .into_iter()
                .map(|i| train_indices[i])
                .collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut hash_ids = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in &batch {
            let image = augment(&dataset.images[i], &cfg.augment, &mut rng)?;
            hash_ids.push(bound.forward(&mut tape, &image)?);
            labels.push(dataset.labels[i].clone());
        }
        let sim = SimilarityBatch::from_labels(&labels)?;
        let loss = total_loss(&mut tape, &hash_ids, &sim, &cfg.loss)?;
        let total_value = tape.scalar(loss.total)?;
        if !total_value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {total_value} at step {step}; batch indices {batch:?}, \
                 labels {labels:?}, bayes {} quant {}",
                loss.bayes(),
                loss.quant()
            )));
        }

        tape.backward(loss.total)?;
        model.absorb_grads(&tape, &bound)?;
        let mut params = model.named_params_mut();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        optimizer.step(&mut refs, step)?;

        let sets: Vec<HashVectorSet> = hash_ids.iter().map(|h| hash_values(&tape, h)).collect();
        metrics.push(StepMetrics {
            step,
            lr: cfg.sgd.lr_at(step),
            loss_bayes: loss.bayes(),
            loss_quant: loss.quant(),
            quant_gap: quantization_gap(&sets),
        });
    }

    let checkpoint = Checkpoint {
        config_text: cfg.to_canonical_toml(),
        config: cfg.clone(),
        step: cfg.sgd.total_steps,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        params: model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    };
    Ok(TrainOutput { checkpoint, metrics })
}

// ── Encoding ────────────────────────────────────────────────────────

/// A binarized image plus its continuous hash vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub code: HashCode,
    pub vectors: HashVectorSet,
}

/// Encodes images with no augmentation, fanning out across worker threads
/// (capped by `THASH_THREADS`) with deterministic output order.
pub fn encode(model: &TransHashModel, images: &[Tensor]) -> Result<Vec<EncodedImage>> {
    let results = parallel_map(images.len(), |i| -> Result<EncodedImage> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ids = bound.forward(&mut tape, &images[i])?;
        let vectors = hash_values(&tape, &ids);
        let code = binarize(&vectors)?;
        Ok(EncodedImage { code, vectors })
    });
    results.into_iter().collect()
}

/// Encodes a dataset subset into id/label/code triples ready for an index.
pub fn encode_split(
    model: &TransHashModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<(u64, crate::data::LabelSet, EncodedImage)>> {
    let results = parallel_map(indices.len(), |slot| -> Result<_> {
        let i = indices[slot];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ids = bound.forward(&mut tape, &dataset.images[i])?;
        let vectors = hash_values(&tape, &ids);
        let code = binarize(&vectors)?;
        Ok((i as u64, dataset.labels[i].clone(), EncodedImage { code, vectors }))
    });
    results.into_iter().collect()
}
