//! Corpus ingestion: tokenization, vocabulary, record encoding, and a
//! synthetic-corpus generator for desk-scale experiments.
//!
//! Corpus files are JSONL, one `{id, text, codes}` object per line. The
//! vocabulary reserves index 0 for padding and 1 for unknown tokens; digit
//! runs collapse to a `<num>` sentinel.

use crate::hierarchy::{normalize_code, CodeId};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NUM_TOKEN: &str = "<num>";
pub const DEFAULT_MAX_LEN: usize = 2500;

/// Lowercase, keep alphanumeric runs, collapse pure-digit runs to `<num>`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    for tok in out.iter_mut() {
        if tok.chars().all(|c| c.is_ascii_digit()) {
            *tok = NUM_TOKEN.to_string();
        }
    }
    out
}

/// Token ↔ index map with reserved padding and unknown slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Count tokens over tokenized docs; tokens seen at least `min_count`
    /// times get indices, ordered by descending count then token text.
    pub fn build(docs: &[Vec<String>], min_count: usize) -> Result<Vocabulary> {
        if min_count < 1 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if docs.is_empty() {
            return Err(Error::Ingestion("cannot build a vocabulary from zero documents".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            for tok in doc {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(|s| s.as_str())
    }

    /// Encode tokens, mapping out-of-vocabulary ones to [`UNK_INDEX`].
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t).unwrap_or(UNK_INDEX)).collect()
    }

    /// TSV rows `index<TAB>token`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Vocabulary> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (idx, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("vocab line {}: missing tab", lineno + 1)))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Parse(format!("vocab line {}: bad index", lineno + 1)))?;
            if idx != tokens.len() {
                return Err(Error::Parse(format!(
                    "vocab line {}: index {idx} out of order",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD_TOKEN || tokens[UNK_INDEX] != UNK_TOKEN {
            return Err(Error::Parse("vocab must start with the reserved tokens".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn digest(&self) -> u64 {
        let mut h = crate::trainer::Fnv64::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(b"\x1f");
        }
        h.finish()
    }
}

/// One raw corpus line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub codes: Vec<String>,
}

/// One encoded admission: token indices plus the finest-level gold set.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<usize>,
    pub gold: BTreeSet<CodeId>,
}

/// Encoding result; `flagged` marks records with zero in-vocabulary tokens.
#[derive(Debug, Clone)]
pub struct EncodedRecord {
    pub record: Record,
    pub flagged: bool,
}

/// Tokenize, encode, and truncate one document to `max_len` (head-first).
pub fn encode_record(doc: &Document, vocab: &Vocabulary, max_len: usize) -> Result<EncodedRecord> {
    let mut toks = tokenize(&doc.text);
    toks.truncate(max_len);
    if toks.is_empty() {
        return Err(Error::Ingestion(format!("document {:?} has no tokens", doc.id)));
    }
    let tokens = vocab.encode(&toks);
    let flagged = tokens.iter().all(|&t| t == UNK_INDEX);
    let mut gold = BTreeSet::new();
    for raw in &doc.codes {
        gold.insert(normalize_code(raw, None)?);
    }
    Ok(EncodedRecord { record: Record { id: doc.id.clone(), tokens, gold }, flagged })
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::Ingestion(format!("{}: empty corpus", path.display())));
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for doc in docs {
        serde_json::to_writer(&mut out, doc)
            .map_err(|e| Error::Ingestion(format!("serialize {}: {e}", doc.id)))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Normalize every document's raw gold codes.
pub fn normalize_docs_codes(docs: &[Document]) -> Result<Vec<BTreeSet<CodeId>>> {
    docs.iter()
        .map(|d| d.codes.iter().map(|raw| normalize_code(raw, None)).collect())
        .collect()
}

/// Encode a corpus, skipping flagged/empty records with a warning count.
pub fn encode_corpus(
    docs: &[Document],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<Record>, usize)> {
    let mut records = Vec::with_capacity(docs.len());
    let mut skipped = 0;
    for doc in docs {
        match encode_record(doc, vocab, max_len) {
            Ok(er) if er.flagged => {
                eprintln!("warning: skipping {:?}: no in-vocabulary tokens", doc.id);
                skipped += 1;
            }
            Ok(er) => records.push(er.record),
            Err(Error::Ingestion(msg)) => {
                eprintln!("warning: skipping record: {msg}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((records, skipped))
}

/// Parse a text word-vector file (`count dim` header, then `token v1..vd`)
/// and return `(vocab index, vector)` pairs for tokens present in `vocab`.
pub fn parse_embeddings_txt(
    text: &str,
    vocab: &Vocabulary,
    expect_dim: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("embeddings: empty file".into()))?;
    let mut parts = header.split_whitespace();
    let _count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("embeddings: bad header count".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("embeddings: bad header dim".into()))?;
    if dim != expect_dim {
        return Err(Error::Config(format!(
            "embedding file dimension {dim} does not match configured {expect_dim}"
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let Some(idx) = vocab.get(token) else { continue };
        if idx == PAD_INDEX {
            continue; // the padding row stays zero
        }
        let vec: Vec<f64> = parts.map(|s| s.parse().unwrap_or(f64::NAN)).collect();
        if vec.len() != dim || vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("embeddings line {}: bad vector", lineno + 2)));
        }
        rows.push((idx, vec));
    }
    Ok(rows)
}

// ── synthetic corpus ─────────────────────────────────────────────────

/// A planted co-occurrence: a reserved code pair appearing together in
/// `together` records and apart (with a third reserved code) in `apart`.
#[derive(Debug, Clone, Copy)]
pub struct PlantedPair {
    pub together: usize,
    pub apart: usize,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Codes per level, coarse to fine, e.g. `[4, 12, 24]`. Each size must
    /// divide the next; at least one ratio must be ≥ 2.
    pub level_sizes: Vec<usize>,
    pub train_docs: usize,
    pub valid_docs: usize,
    /// Upper bound on distinct generated tokens (triggers + noise + sentinels).
    pub vocab_size: usize,
    /// Probability that a trigger token survives; the complement is replaced
    /// by noise.
    pub signal: f64,
    /// Noise tokens appended to every document.
    pub noise_tokens: usize,
    pub triggers_per_code: usize,
    /// How many times each gold code's trigger set is emitted per document.
    pub trigger_repeats: usize,
    /// Power-law exponent for finest-code inclusion probabilities.
    pub alpha: f64,
    /// Inclusion probability of the most frequent code.
    pub max_inclusion: f64,
    pub planted: Vec<PlantedPair>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            level_sizes: vec![4, 12, 24],
            train_docs: 64,
            valid_docs: 32,
            vocab_size: 200,
            signal: 1.0,
            noise_tokens: 6,
            triggers_per_code: 3,
            trigger_repeats: 2,
            alpha: 1.2,
            max_inclusion: 0.7,
            planted: Vec::new(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantReport {
    pub a: String,
    pub b: String,
    pub other: String,
    pub expected_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    /// `code<TAB>descriptor` rows covering every level.
    pub descriptors_tsv: String,
    /// Block table rows when a 4-level hierarchy was generated.
    pub blocks_tsv: Option<String>,
    pub plants: Vec<PlantReport>,
    /// Configured inclusion probability per sampled finest code.
    pub inclusion: Vec<(String, f64)>,
}

struct CodeNode {
    name: String,
    /// This finest code's ancestor chain, coarse to fine, self included;
    /// indices point into the flattened all-level name list.
    chain: Vec<usize>,
}

/// Generate a deterministic synthetic corpus with per-code trigger tokens,
/// a power-law gold distribution, and optional planted co-occurrences.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    validate_synth(cfg)?;
    let depth = cfg.level_sizes.len();
    let finest_n = *cfg.level_sizes.last().unwrap();

    // Code names per level, chosen so that rebuilding the hierarchy from the
    // finest codes by truncation reproduces exactly these levels: a 2-level
    // config uses one-decimal roots with two-decimal children, 3 levels start
    // from 3-digit categories, 4 levels add block ranges over the categories.
    let mut level_names: Vec<Vec<String>> = Vec::new();
    let has_blocks = depth == 4;
    let sizes = if has_blocks { &cfg.level_sizes[1..] } else { &cfg.level_sizes[..] };
    let mut blocks_tsv = None;
    if sizes.len() == 2 {
        let roots: Vec<String> =
            (0..sizes[0]).map(|i| format!("{}.{}", 401 + i / 10, i % 10)).collect();
        let per = sizes[1] / sizes[0];
        let leaves =
            roots.iter().flat_map(|p| (0..per).map(move |d| format!("{p}{d}"))).collect();
        level_names.push(roots);
        level_names.push(leaves);
    } else {
        let n_categories = sizes[0];
        let categories: Vec<String> = (0..n_categories).map(|i| format!("{}", 401 + i)).collect();
        if has_blocks {
            let n_blocks = cfg.level_sizes[0];
            let per_block = n_categories / n_blocks;
            let mut names = Vec::new();
            let mut tsv = String::new();
            for b in 0..n_blocks {
                let lo = &categories[b * per_block];
                let hi = &categories[(b + 1) * per_block - 1];
                names.push(format!("{lo}-{hi}"));
                tsv.push_str(&format!("{lo}-{hi}\tsynthetic block {b}\n"));
            }
            level_names.push(names);
            blocks_tsv = Some(tsv);
        }
        let per1 = sizes[1] / sizes[0];
        let one_dec: Vec<String> = categories
            .iter()
            .flat_map(|c| (0..per1).map(move |d| format!("{c}.{d}")))
            .collect();
        let per2 = sizes[2] / sizes[1];
        let full =
            one_dec.iter().flat_map(|p| (0..per2).map(move |d| format!("{p}{d}"))).collect();
        level_names.push(categories);
        level_names.push(one_dec);
        level_names.push(full);
    }

    // Flatten for trigger assignment. Every code at every level owns a
    // disjoint trigger set.
    let all_names: Vec<String> = level_names.iter().flatten().cloned().collect();
    let trigger_of = |code_idx: usize, j: usize| format!("k{code_idx}t{j}");

    let mut level_offsets = Vec::new();
    let mut offset = 0;
    for names in &level_names {
        level_offsets.push(offset);
        offset += names.len();
    }
    let finest_names = level_names.last().unwrap().clone();
    let finest_nodes: Vec<CodeNode> = (0..finest_n)
        .map(|i| {
            let mut chain = Vec::new();
            let mut idx = i;
            for depth_idx in (0..level_names.len()).rev() {
                chain.push(level_offsets[depth_idx] + idx);
                if depth_idx > 0 {
                    let ratio = level_names[depth_idx].len() / level_names[depth_idx - 1].len();
                    idx /= ratio;
                }
            }
            chain.reverse();
            CodeNode { name: finest_names[i].clone(), chain }
        })
        .collect();

    // Descriptors: each code's descriptor is its trigger tokens.
    let mut descriptors = String::new();
    for (idx, name) in all_names.iter().enumerate() {
        let toks: Vec<String> = (0..cfg.triggers_per_code).map(|j| trigger_of(idx, j)).collect();
        descriptors.push_str(&format!("{name}\t{}\n", toks.join(" ")));
    }

    let noise_budget =
        cfg.vocab_size.saturating_sub(all_names.len() * cfg.triggers_per_code + 2);
    let noise_pool: Vec<String> = (0..noise_budget).map(|j| format!("noise{j}x")).collect();

    // Reserve the tail of the finest level for planted pairs.
    let reserved = cfg.planted.len() * 3;
    let sampled_n = finest_n - reserved;
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let inclusion: Vec<(String, f64)> = (0..sampled_n)
        .map(|r| {
            let p = (cfg.max_inclusion / ((r + 1) as f64).powf(cfg.alpha)).min(1.0);
            (finest_nodes[r].name.clone(), p)
        })
        .collect();

    let make_split = |docs: usize, tag: &str, rng: &mut StdRng| -> Vec<Document> {
        if docs == 0 {
            return Vec::new();
        }
        let mut golds: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); docs];
        // Quota dealing keeps empirical frequencies on the configured curve.
        let mut occurrences: Vec<usize> = Vec::new();
        for (r, (_, p)) in inclusion.iter().enumerate() {
            let quota = ((p * docs as f64).round() as usize).clamp(1, docs);
            occurrences.extend(std::iter::repeat(r).take(quota));
        }
        // If there are fewer occurrences than docs, repeat the multiset
        // proportionally so every doc can receive at least one code.
        let base_len = occurrences.len();
        while occurrences.len() < docs {
            let k = occurrences.len() - base_len;
            occurrences.push(occurrences[k % base_len]);
        }
        occurrences.shuffle(rng);
        for (pos, &code) in occurrences.iter().enumerate() {
            if pos < docs {
                // Dealing the first `docs` occurrences one per doc keeps
                // every gold set nonempty without skewing the curve.
                golds[pos].insert(code);
            } else {
                // First doc (scanning from a random start) not yet holding it.
                let start = rng.random_range(0..docs);
                for step in 0..docs {
                    let d = (start + step) % docs;
                    if golds[d].insert(code) {
                        break;
                    }
                }
            }
        }
        golds
            .into_iter()
            .enumerate()
            .map(|(d, gold)| {
                render_doc(
                    cfg,
                    &finest_nodes,
                    &noise_pool,
                    &trigger_of,
                    gold,
                    &format!("{tag}-{d:04}"),
                    rng,
                )
            })
            .collect()
    };

    let mut train = make_split(cfg.train_docs, "train", &mut rng);
    let valid = make_split(cfg.valid_docs, "valid", &mut rng);

    // Planted pairs live in dedicated extra train records so their
    // co-occurrence ratios are exact.
    let mut plants = Vec::new();
    for (p_idx, plant) in cfg.planted.iter().enumerate() {
        let a = sampled_n + p_idx * 3;
        let b = a + 1;
        let other = a + 2;
        for k in 0..plant.together {
            let gold: BTreeSet<usize> = [a, b].into_iter().collect();
            train.push(render_doc(
                cfg,
                &finest_nodes,
                &noise_pool,
                &trigger_of,
                gold,
                &format!("plant{p_idx}-ab-{k:03}"),
                &mut rng,
            ));
        }
        for k in 0..plant.apart {
            let gold: BTreeSet<usize> = [a, other].into_iter().collect();
            train.push(render_doc(
                cfg,
                &finest_nodes,
                &noise_pool,
                &trigger_of,
                gold,
                &format!("plant{p_idx}-ac-{k:03}"),
                &mut rng,
            ));
        }
        plants.push(PlantReport {
            a: finest_nodes[a].name.clone(),
            b: finest_nodes[b].name.clone(),
            other: finest_nodes[other].name.clone(),
            expected_ratio: plant.together as f64 / (plant.together + plant.apart) as f64,
        });
    }

    Ok(SynthCorpus { train, valid, descriptors_tsv: descriptors, blocks_tsv, plants, inclusion })
}

fn render_doc(
    cfg: &SynthConfig,
    finest: &[CodeNode],
    noise_pool: &[String],
    trigger_of: &impl Fn(usize, usize) -> String,
    gold: BTreeSet<usize>,
    id: &str,
    rng: &mut StdRng,
) -> Document {
    let mut toks: Vec<String> = Vec::new();
    for &g in &gold {
        for &code_idx in &finest[g].chain {
            for _ in 0..cfg.trigger_repeats {
                for j in 0..cfg.triggers_per_code {
                    if cfg.signal >= 1.0 || rng.random::<f64>() < cfg.signal {
                        toks.push(trigger_of(code_idx, j));
                    } else if !noise_pool.is_empty() {
                        toks.push(noise_pool[rng.random_range(0..noise_pool.len())].clone());
                    }
                }
            }
        }
    }
    for _ in 0..cfg.noise_tokens {
        if !noise_pool.is_empty() {
            toks.push(noise_pool[rng.random_range(0..noise_pool.len())].clone());
        }
    }
    toks.shuffle(rng);
    Document {
        id: id.to_string(),
        text: toks.join(" "),
        codes: gold.iter().map(|&g| finest[g].name.clone()).collect(),
    }
}

fn validate_synth(cfg: &SynthConfig) -> Result<()> {
    let sizes = &cfg.level_sizes;
    if !(2..=4).contains(&sizes.len()) {
        return Err(Error::Config("synthetic hierarchy needs 2..=4 levels".into()));
    }
    let mut has_split = false;
    for w in sizes.windows(2) {
        if w[0] == 0 || w[1] % w[0] != 0 {
            return Err(Error::Config(format!(
                "level sizes must divide evenly, got {} then {}",
                w[0], w[1]
            )));
        }
        if w[1] / w[0] > 10 {
            return Err(Error::Config("at most 10 children per parent (one decimal digit)".into()));
        }
        if w[1] / w[0] >= 2 {
            has_split = true;
        }
    }
    if !has_split {
        return Err(Error::Config("at least one level must have ≥2 siblings".into()));
    }
    let finest = *sizes.last().unwrap();
    if cfg.planted.len() * 3 >= finest {
        return Err(Error::Config("not enough finest codes to reserve for planted pairs".into()));
    }
    if cfg.planted.iter().any(|p| p.together + p.apart == 0) {
        return Err(Error::Config("a planted pair needs at least one record".into()));
    }
    let total_codes: usize = sizes.iter().sum::<usize>();
    let trigger_tokens = total_codes * cfg.triggers_per_code;
    let needs_noise = cfg.noise_tokens > 0 || cfg.signal < 1.0;
    if trigger_tokens + 2 + usize::from(needs_noise) > cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocab size {} too small for {trigger_tokens} disjoint trigger tokens",
            cfg.vocab_size
        )));
    }
    if cfg.train_docs == 0 {
        return Err(Error::Config("train_docs must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.signal) {
        return Err(Error::Config("signal strength must lie in [0,1]".into()));
    }
    Ok(())
}
