//! Optimization loop, early stopping, and single-file checkpoints.
//!
//! Batch gradients come from independent per-record tapes (data-parallel when
//! the `parallel` feature is on) and are summed in record order, so training
//! is bit-reproducible for a given seed regardless of thread count.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic  [u8; 8]  = b"HICODECK"
//! u32    version  = 1
//! u64    epoch
//! f64    best validation micro-F1
//! u64    vocabulary digest (FNV-1a over index/token rows)
//! u64    hierarchy digest (FNV-1a over levels and parent maps)
//! u32    config byte length, then that many UTF-8 bytes (key=value lines)
//! u32    parameter count, then per parameter:
//!          u32 name length, name bytes,
//!          u32 ndim, u64 × ndim dims,
//!          f64 × numel values
//! ```

use crate::corpus::Record;
use crate::model::{pad_batch, Model, ModelState};
use crate::parallel;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

/// FNV-1a 64-bit hasher for file digests stored in checkpoints.
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf29ce484222325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without validation micro-F1 improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Decision threshold for F1 during evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-5,
            batch_size: 16,
            patience: 10,
            max_epochs: 200,
            seed: 1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("rates must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0,1)", self.threshold)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "learning_rate={}\nweight_decay={}\nbatch_size={}\npatience={}\nmax_epochs={}\nseed={}\nthreshold={}\n",
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.patience,
            self.max_epochs,
            self.seed,
            self.threshold
        )
    }
}

/// Parse flat `key=value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut out = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("config line {}: missing '='", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// AdamW with decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂+ε) − lr·λ·θ`.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, state: &ModelState) -> Self {
        let m = state.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = state.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently stored on the state.
    pub fn step(&mut self, state: &mut ModelState) -> Result<()> {
        if state.num_params() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..state.num_params() {
            let grads = state.get(i).value.grad_or_zeros();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = state.get_mut(i).value.data_mut();
            for j in 0..grads.len() {
                let g = grads[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon))
                    + self.learning_rate * self.weight_decay * theta[j];
            }
        }
        Ok(())
    }
}

fn batch_gradients_impl(
    model: &Model,
    batch: &[&Record],
    step_seed: u64,
    force_seq: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let padded = pad_batch(batch);
    let mut targets = Vec::with_capacity(batch.len());
    for r in batch {
        targets.push(model.targets_for(&r.gold)?);
    }
    let jobs: Vec<usize> = (0..batch.len()).collect();
    let run = |&i: &usize| -> Result<(f64, Vec<Vec<f64>>)> {
        let (tokens, mask) = &padded[i];
        model.record_loss(tokens, mask, &targets[i], true, splitmix64(step_seed ^ i as u64))
    };
    let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = if force_seq {
        parallel::ordered_map_seq(&jobs, run)
    } else {
        parallel::ordered_map(&jobs, run)
    };

    // Sum in record order; scaling by 1/B averages the loss over the batch.
    let scale = 1.0 / batch.len() as f64;
    let mut mean_loss = 0.0;
    let mut total: Vec<Vec<f64>> = Vec::new();
    for res in results {
        let (loss, grads) = res?;
        mean_loss += loss * scale;
        if total.is_empty() {
            total = grads.into_iter().map(|g| g.iter().map(|v| v * scale).collect()).collect();
        } else {
            for (acc, g) in total.iter_mut().zip(grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
        }
    }
    Ok((mean_loss, total))
}

/// Batch loss and per-parameter gradients (averaged over the batch).
pub fn batch_gradients(model: &Model, batch: &[&Record], step_seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    batch_gradients_impl(model, batch, step_seed, false)
}

/// Sequential twin of [`batch_gradients`] (bench baseline).
pub fn batch_gradients_seq(
    model: &Model,
    batch: &[&Record],
    step_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    batch_gradients_impl(model, batch, step_seed, true)
}

/// One optimizer step over a batch. Returns the mean batch loss.
pub fn step(
    model: &mut Model,
    optimizer: &mut AdamW,
    batch: &[&Record],
    step_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let (loss, grads) = batch_gradients(model, batch, step_seed)?;
    if !loss.is_finite() {
        let norms: Vec<String> = model
            .state
            .iter()
            .map(|p| {
                let n: f64 = p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                format!("{}={n:.3e}", p.name)
            })
            .collect();
        return Err(Error::Contract(format!(
            "non-finite loss {loss}; parameter norms: {}",
            norms.join(" ")
        )));
    }
    model.state.zero_grads();
    for (i, g) in grads.iter().enumerate() {
        model.state.param_mut(i).accumulate_grad(g);
    }
    model.clamp_pad_row();
    optimizer.step(&mut model.state)?;
    model.clamp_pad_row();
    Ok(loss)
}

use crate::tensor::Parameterized;

/// Result of a training run; `model` holds the best-validation parameters.
pub struct FitOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub best_micro_f1: f64,
    pub epochs_run: usize,
}

/// Train with early stopping on final-level validation micro-F1.
///
/// `log` receives one line per epoch and level:
/// `epoch, split, level, macro_auc, micro_auc, macro_f1, micro_f1, p@5, p@8, p@15`.
pub fn fit(
    mut model: Model,
    train: &[Record],
    valid: &[Record],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    for r in train.iter() {
        if r.gold.is_empty() {
            return Err(Error::Config(format!("training record {:?} has an empty gold set", r.id)));
        }
    }
    let mut optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay, &model.state);
    let mut best_state: Option<ModelState> = None;
    let mut best_micro_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_improvement = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = StdRng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64) << 20));
        order.shuffle(&mut shuffle_rng);

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Record> = chunk.iter().map(|&i| &train[i]).collect();
            let step_seed = splitmix64(cfg.seed ^ ((epoch as u64) << 32) ^ b as u64);
            step(&mut model, &mut optimizer, &batch, step_seed)?;
        }

        let report = model.evaluate_records(valid, cfg.threshold)?;
        for m in &report.levels {
            log(&format!(
                "{epoch}, valid, {}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
                m.level,
                m.macro_auc,
                m.micro_auc,
                m.macro_f1,
                m.micro_f1,
                m.p_at[0].1,
                m.p_at[1].1,
                m.p_at[2].1
            ));
        }
        let metric = report.levels.last().unwrap().micro_f1;
        if metric > best_micro_f1 {
            best_micro_f1 = metric;
            best_epoch = epoch;
            best_state = Some(model.state.clone());
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                break;
            }
        }
    }

    if let Some(state) = best_state {
        model.state = state;
    }
    Ok(FitOutcome { model, best_epoch, best_micro_f1, epochs_run })
}

// ── checkpoint ───────────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"HICODECK";
const VERSION: u32 = 1;

/// A saved model: parameters plus enough metadata to verify the sidecar
/// files it was trained against.
pub struct Checkpoint {
    pub epoch: u64,
    pub best_micro_f1: f64,
    pub vocab_digest: u64,
    pub hierarchy_digest: u64,
    /// Flat `key=value` text (model config, train config, level count).
    pub config_text: String,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train_cfg: &TrainConfig, epoch: u64, best_micro_f1: f64) -> Checkpoint {
        let mut config_text = model.config.to_kv();
        config_text.push_str(&train_cfg.to_kv());
        config_text.push_str(&format!("levels={}\n", model.depth()));
        Checkpoint {
            epoch,
            best_micro_f1,
            vocab_digest: model.vocab.digest(),
            hierarchy_digest: model.hierarchy.digest(),
            config_text,
            params: model
                .state
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
                .collect(),
        }
    }

    /// Overwrite a freshly built model's parameters, verifying digests.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if self.vocab_digest != model.vocab.digest() {
            return Err(Error::Config("checkpoint vocabulary digest mismatch".into()));
        }
        if self.hierarchy_digest != model.hierarchy.digest() {
            return Err(Error::Config("checkpoint hierarchy digest mismatch".into()));
        }
        if self.params.len() != model.state.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.state.len()
            )));
        }
        for (i, (name, shape, data)) in self.params.iter().enumerate() {
            let p = model.state.get_mut(i);
            if p.name != *name || p.value.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "checkpoint parameter {i} ({name}) does not match the model's {}",
                    p.name
                )));
            }
            p.value.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_micro_f1.to_le_bytes());
        out.extend_from_slice(&self.vocab_digest.to_le_bytes());
        out.extend_from_slice(&self.hierarchy_digest.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let epoch = cur.u64()?;
        let best_micro_f1 = cur.f64()?;
        let vocab_digest = cur.u64()?;
        let hierarchy_digest = cur.u64()?;
        let cfg_len = cur.u32()? as usize;
        let config_text = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Parse("checkpoint config is not UTF-8".into()))?;
        let n_params = cur.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Parse("checkpoint parameter name is not UTF-8".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }
            params.push((name, shape, data));
        }
        Ok(Checkpoint {
            epoch,
            best_micro_f1,
            vocab_digest,
            hierarchy_digest,
            config_text,
            params,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write a trained model plus its sidecar files into a directory.
pub fn save_model_dir(
    dir: &Path,
    model: &Model,
    train_cfg: &TrainConfig,
    epoch: u64,
    best_micro_f1: f64,
    cograph_tsv: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Checkpoint::from_model(model, train_cfg, epoch, best_micro_f1).save(&dir.join("checkpoint.bin"))?;
    std::fs::write(dir.join("vocab.tsv"), model.vocab.to_tsv())?;
    std::fs::write(dir.join("hierarchy.tsv"), model.hierarchy.export_tsv())?;
    std::fs::write(dir.join("cograph.tsv"), cograph_tsv)?;
    std::fs::write(dir.join("descriptors.tsv"), model.hierarchy.descriptors_tsv())?;
    let mut cfg = std::fs::File::create(dir.join("config.txt"))?;
    cfg.write_all(model.config.to_kv().as_bytes())?;
    cfg.write_all(train_cfg.to_kv().as_bytes())?;
    Ok(())
}

/// Rebuild a model from a directory written by [`save_model_dir`].
pub fn load_model_dir(dir: &Path) -> Result<(Model, Checkpoint)> {
    use crate::cograph::CoGraph;
    use crate::corpus::Vocabulary;
    use crate::hierarchy::Hierarchy;
    use crate::model::ModelConfig;

    let ckpt = Checkpoint::load(&dir.join("checkpoint.bin"))?;
    let kv = parse_kv(&ckpt.config_text)?;
    let config = ModelConfig::from_kv(ModelConfig::standard(), &kv)?;
    let vocab = Vocabulary::from_tsv(&std::fs::read_to_string(dir.join("vocab.tsv"))?)?;
    let mut hierarchy = Hierarchy::from_tsv(&std::fs::read_to_string(dir.join("hierarchy.tsv"))?)?;
    let desc_path = dir.join("descriptors.tsv");
    if desc_path.exists() {
        hierarchy.load_descriptors(&std::fs::read_to_string(desc_path)?)?;
    }
    let cographs: Vec<CoGraph> = if config.use_orl {
        let text = std::fs::read_to_string(dir.join("cograph.tsv"))?;
        (1..=hierarchy.depth())
            .map(|t| CoGraph::from_tsv(&text, &hierarchy, t, config.cograph_sym))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut model = Model::new(config, hierarchy, vocab, &cographs, 0)?;
    ckpt.apply_to(&mut model)?;
    Ok((model, ckpt))
}
