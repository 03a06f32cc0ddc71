//! The assembled model: embedding matrix, document encoder, per-level code
//! representations (ontology means, optionally propagated over the co-graph),
//! and the hierarchical prediction head.
//!
//! Parameters live in a [`ModelState`] with a stable registration order; every
//! forward pass registers them on a fresh tape, so per-record passes can run
//! concurrently and their gradients are summed in record order afterwards.

use crate::cograph::{CoGraph, SymMode};
use crate::corpus::{tokenize, Record, Vocabulary};
use crate::encoder::{self, FilterNodes};
use crate::gcn;
use crate::hierarchy::{CodeId, Hierarchy};
use crate::hpm::{self, DepOverride, LevelNodes};
use crate::metrics::{self, EvalReport};
use crate::parallel;
use crate::tensor::{NodeId, Parameterized, Tape, Tensor};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_e: usize,
    pub kernel_widths: Vec<usize>,
    /// Convolution feature width.
    pub d_c: usize,
    /// Residual block output width.
    pub d_r: usize,
    /// GCN hidden width.
    pub d_g: usize,
    pub gcn_layers: usize,
    /// Code-specific attention width.
    pub d_a: usize,
    /// Dependency vector width.
    pub d_dep: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Propagate code embeddings over the co-graph; when false the attention
    /// queries are the raw ontology embeddings.
    pub use_orl: bool,
    /// Thread the dependency gate between levels.
    pub use_dpu: bool,
    pub cograph_sym: SymMode,
}

impl ModelConfig {
    /// Full-scale defaults.
    pub fn standard() -> Self {
        ModelConfig {
            d_e: 100,
            kernel_widths: vec![3, 5, 9, 15, 19, 25],
            d_c: 100,
            d_r: 50,
            d_g: 300,
            gcn_layers: 1,
            d_a: 300,
            d_dep: 500,
            dropout: 0.4,
            max_len: 2500,
            use_orl: true,
            use_dpu: true,
            cograph_sym: SymMode::Avg,
        }
    }

    /// Desk-scale defaults for synthetic corpora.
    pub fn small() -> Self {
        ModelConfig {
            d_e: 24,
            kernel_widths: vec![3, 5],
            d_c: 24,
            d_r: 12,
            d_g: 24,
            gcn_layers: 1,
            d_a: 24,
            d_dep: 16,
            dropout: 0.1,
            max_len: 2500,
            use_orl: true,
            use_dpu: true,
            cograph_sym: SymMode::Avg,
        }
    }

    /// Tiny configuration for gradient-oracle runs.
    pub fn toy() -> Self {
        ModelConfig {
            d_e: 6,
            kernel_widths: vec![3, 5],
            d_c: 3,
            d_r: 3,
            d_g: 4,
            gcn_layers: 1,
            d_a: 4,
            d_dep: 3,
            dropout: 0.0,
            max_len: 2500,
            use_orl: true,
            use_dpu: true,
            cograph_sym: SymMode::Avg,
        }
    }

    pub fn d_res(&self) -> usize {
        self.kernel_widths.len() * self.d_r
    }

    /// Width of the code representations feeding ontology-guided attention.
    pub fn d_query(&self) -> usize {
        if self.use_orl {
            self.d_g
        } else {
            self.d_e
        }
    }

    /// Flat `key=value` lines covering every field.
    pub fn to_kv(&self) -> String {
        let widths: Vec<String> = self.kernel_widths.iter().map(|w| w.to_string()).collect();
        let sym = match self.cograph_sym {
            SymMode::Avg => "avg",
            SymMode::Max => "max",
            SymMode::None => "none",
        };
        format!(
            "d_e={}\nkernel_widths={}\nd_c={}\nd_r={}\nd_g={}\ngcn_layers={}\nd_a={}\nd_dep={}\ndropout={}\nmax_len={}\nuse_orl={}\nuse_dpu={}\ncograph_sym={}\n",
            self.d_e,
            widths.join(","),
            self.d_c,
            self.d_r,
            self.d_g,
            self.gcn_layers,
            self.d_a,
            self.d_dep,
            self.dropout,
            self.max_len,
            self.use_orl,
            self.use_dpu,
            sym,
        )
    }

    /// Parse the output of [`ModelConfig::to_kv`]; missing keys keep the
    /// base value.
    pub fn from_kv(base: ModelConfig, kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let mut cfg = base;
        let field = |key: &str, out: &mut usize| -> Result<()> {
            if let Some(v) = kv.get(key) {
                *out = v
                    .parse()
                    .map_err(|_| Error::Parse(format!("config key {key}: bad value {v:?}")))?;
            }
            Ok(())
        };
        field("d_e", &mut cfg.d_e)?;
        field("d_c", &mut cfg.d_c)?;
        field("d_r", &mut cfg.d_r)?;
        field("d_g", &mut cfg.d_g)?;
        field("gcn_layers", &mut cfg.gcn_layers)?;
        field("d_a", &mut cfg.d_a)?;
        field("d_dep", &mut cfg.d_dep)?;
        field("max_len", &mut cfg.max_len)?;
        if let Some(v) = kv.get("kernel_widths") {
            cfg.kernel_widths = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse(format!("config kernel_widths: bad value {v:?}")))?;
        }
        if let Some(v) = kv.get("dropout") {
            cfg.dropout =
                v.parse().map_err(|_| Error::Parse(format!("config dropout: bad value {v:?}")))?;
        }
        if let Some(v) = kv.get("use_orl") {
            cfg.use_orl =
                v.parse().map_err(|_| Error::Parse(format!("config use_orl: bad value {v:?}")))?;
        }
        if let Some(v) = kv.get("use_dpu") {
            cfg.use_dpu =
                v.parse().map_err(|_| Error::Parse(format!("config use_dpu: bad value {v:?}")))?;
        }
        if let Some(v) = kv.get("cograph_sym") {
            cfg.cograph_sym = v.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        encoder::EncoderConfig {
            d_e: self.d_e,
            kernel_widths: self.kernel_widths.clone(),
            d_c: self.d_c,
            d_r: self.d_r,
        }
        .validate()?;
        gcn::GcnConfig { layers: self.gcn_layers, d_g: self.d_g }.validate()?;
        if self.d_a == 0 || self.d_dep == 0 {
            return Err(Error::Config("attention/dependency widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// All learnable parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    params: Vec<Param>,
}

impl ModelState {
    fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param { name: name.into(), value: value.with_grad() });
        self.params.len() - 1
    }

    #[cfg(test)]
    pub(crate) fn push_for_tests(&mut self, name: &str, value: Tensor) -> usize {
        self.push(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.value.zero_grad();
        }
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

impl Parameterized for ModelState {
    fn num_params(&self) -> usize {
        self.params.len()
    }
    fn param_name(&self, i: usize) -> String {
        self.params[i].name.clone()
    }
    fn param(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }
}

#[derive(Debug, Clone, Copy)]
struct FilterIds {
    width: usize,
    conv_w: usize,
    conv_b: usize,
    res_w1: usize,
    res_b1: usize,
    res_w2: usize,
    res_b2: usize,
    res_w3: usize,
    res_b3: usize,
}

#[derive(Debug, Clone, Copy)]
struct LevelIds {
    attn_onto_w: usize,
    attn_onto_b: usize,
    attn_code_w: usize,
    attn_code_b: usize,
    attn_query: usize,
    cls_w: usize,
    cls_b: usize,
    dpu: Option<(usize, usize)>,
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub hierarchy: Hierarchy,
    pub vocab: Vocabulary,
    pub state: ModelState,
    /// Per-level code order (the hierarchy's level order).
    level_codes: Vec<Vec<CodeId>>,
    level_index: Vec<BTreeMap<CodeId, usize>>,
    /// Per-level descriptor token ids.
    descriptor_tokens: Vec<Vec<Vec<usize>>>,
    /// Per-level propagation matrices (row-major square), present iff
    /// `use_orl`.
    props: Option<Vec<Vec<f64>>>,
    emb: usize,
    filters: Vec<FilterIds>,
    gcn_weights: Vec<(usize, usize)>,
    levels: Vec<LevelIds>,
}

/// Options for one forward pass.
#[derive(Default)]
pub struct ForwardOpts {
    pub train: bool,
    /// Seed for dropout masks; required when `train` and dropout > 0.
    pub dropout_seed: u64,
    /// Force specific dependency vectors (intervention testing).
    pub dep_override: Option<DepOverride>,
}

/// A completed forward pass, ready for loss attachment and backward.
pub struct ForwardPass {
    pub tape: Tape,
    pub param_nodes: Vec<NodeId>,
    pub levels: Vec<hpm::LevelForward>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        hierarchy: Hierarchy,
        vocab: Vocabulary,
        cographs: &[CoGraph],
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let depth = hierarchy.depth();
        let level_codes: Vec<Vec<CodeId>> =
            (1..=depth).map(|t| hierarchy.level(t).to_vec()).collect();
        let level_index: Vec<BTreeMap<CodeId, usize>> = level_codes
            .iter()
            .map(|codes| codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect())
            .collect();

        let props = if config.use_orl {
            if cographs.len() != depth {
                return Err(Error::Config(format!(
                    "{} co-graphs for {depth} levels",
                    cographs.len()
                )));
            }
            let mut props = Vec::with_capacity(depth);
            for (t, g) in cographs.iter().enumerate() {
                if g.codes != level_codes[t] {
                    return Err(Error::Config(format!(
                        "co-graph at level {} does not match the hierarchy's code order",
                        t + 1
                    )));
                }
                props.push(g.propagation.clone());
            }
            Some(props)
        } else {
            None
        };

        // Descriptor token ids; the tokenizer fallback keeps these nonempty.
        let mut descriptor_tokens = Vec::with_capacity(depth);
        for codes in &level_codes {
            let mut per_level = Vec::with_capacity(codes.len());
            for code in codes {
                let toks = tokenize(&hierarchy.descriptor(code));
                if toks.is_empty() {
                    return Err(Error::Config(format!("code {code}: empty descriptor")));
                }
                per_level.push(vocab.encode(&toks));
            }
            descriptor_tokens.push(per_level);
        }

        // Parameter initialization, fixed registration order.
        let mut rng = StdRng::seed_from_u64(seed);
        let mut state = ModelState::default();
        let mut emb_t = Tensor::uniform(vocab.len(), config.d_e, 0.25, &mut rng);
        emb_t.data_mut()[..config.d_e].fill(0.0); // padding row stays zero
        let emb = state.push("embedding", emb_t);

        let mut filters = Vec::new();
        for (k, &w) in config.kernel_widths.iter().enumerate() {
            let (d_e, d_c, d_r) = (config.d_e, config.d_c, config.d_r);
            filters.push(FilterIds {
                width: w,
                conv_w: state
                    .push(format!("enc.conv{k}.w"), Tensor::kaiming(w * d_e, d_c, w * d_e, &mut rng)),
                conv_b: state.push(format!("enc.conv{k}.b"), Tensor::zeros(1, d_c)),
                res_w1: state
                    .push(format!("enc.res{k}.w1"), Tensor::kaiming(w * d_c, d_r, w * d_c, &mut rng)),
                res_b1: state.push(format!("enc.res{k}.b1"), Tensor::zeros(1, d_r)),
                res_w2: state
                    .push(format!("enc.res{k}.w2"), Tensor::kaiming(w * d_r, d_r, w * d_r, &mut rng)),
                res_b2: state.push(format!("enc.res{k}.b2"), Tensor::zeros(1, d_r)),
                res_w3: state.push(format!("enc.res{k}.w3"), Tensor::kaiming(d_c, d_r, d_c, &mut rng)),
                res_b3: state.push(format!("enc.res{k}.b3"), Tensor::zeros(1, d_r)),
            });
        }

        let mut gcn_weights = Vec::new();
        if config.use_orl {
            for l in 0..config.gcn_layers {
                let d_in = if l == 0 { config.d_e } else { config.d_g };
                gcn_weights.push((
                    state.push(format!("gcn.{l}.w"), Tensor::kaiming(d_in, config.d_g, d_in, &mut rng)),
                    state.push(format!("gcn.{l}.b"), Tensor::zeros(1, config.d_g)),
                ));
            }
        }

        let d_res = config.d_res();
        let d_q = config.d_query();
        let mut levels = Vec::with_capacity(depth);
        for (t0, codes) in level_codes.iter().enumerate() {
            let t = t0 + 1;
            let k_t = codes.len();
            let dpu = if config.use_dpu && t < depth {
                Some((
                    state.push(
                        format!("lvl{t}.dpu.w"),
                        Tensor::kaiming(k_t + config.d_dep, config.d_dep, k_t + config.d_dep, &mut rng),
                    ),
                    state.push(format!("lvl{t}.dpu.b"), Tensor::zeros(1, config.d_dep)),
                ))
            } else {
                None
            };
            levels.push(LevelIds {
                attn_onto_w: state
                    .push(format!("lvl{t}.attn_onto.w"), Tensor::kaiming(d_q, d_res, d_res, &mut rng)),
                attn_onto_b: state.push(format!("lvl{t}.attn_onto.b"), Tensor::zeros(d_q, 1)),
                attn_code_w: state.push(
                    format!("lvl{t}.attn_code.w"),
                    Tensor::kaiming(config.d_a, d_res, d_res, &mut rng),
                ),
                attn_code_b: state.push(format!("lvl{t}.attn_code.b"), Tensor::zeros(config.d_a, 1)),
                attn_query: state.push(
                    format!("lvl{t}.attn_code.query"),
                    Tensor::kaiming(k_t, config.d_a, config.d_a, &mut rng),
                ),
                cls_w: state.push(
                    format!("lvl{t}.cls.w"),
                    Tensor::kaiming(config.d_dep + 2 * d_res, 1, config.d_dep + 2 * d_res, &mut rng),
                ),
                cls_b: state.push(format!("lvl{t}.cls.b"), Tensor::zeros(1, 1)),
                dpu,
            });
        }

        Ok(Model {
            config,
            hierarchy,
            vocab,
            state,
            level_codes,
            level_index,
            descriptor_tokens,
            props,
            emb,
            filters,
            gcn_weights,
            levels,
        })
    }

    pub fn depth(&self) -> usize {
        self.level_codes.len()
    }

    pub fn level_codes(&self, t: usize) -> &[CodeId] {
        &self.level_codes[t - 1]
    }

    /// Multi-hot targets per level for a finest-level gold set.
    pub fn targets_for(&self, gold: &BTreeSet<CodeId>) -> Result<Vec<Vec<f64>>> {
        let expanded = self.hierarchy.expand_labels(gold)?;
        Ok(expanded
            .iter()
            .enumerate()
            .map(|(t0, set)| {
                let mut row = vec![0.0; self.level_codes[t0].len()];
                for c in set {
                    row[self.level_index[t0][c]] = 1.0;
                }
                row
            })
            .collect())
    }

    /// Boolean gold rows per level (metrics input).
    pub fn gold_rows(&self, gold: &BTreeSet<CodeId>) -> Result<Vec<Vec<bool>>> {
        Ok(self
            .targets_for(gold)?
            .into_iter()
            .map(|row| row.into_iter().map(|v| v == 1.0).collect())
            .collect())
    }

    /// One forward pass over a (possibly padded) token sequence.
    pub fn forward(&self, tokens: &[usize], mask: &[bool], opts: &ForwardOpts) -> Result<ForwardPass> {
        if tokens.is_empty() || tokens.len() != mask.len() {
            return Err(Error::Contract(format!(
                "{} tokens vs {} mask entries",
                tokens.len(),
                mask.len()
            )));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> =
            self.state.iter().map(|p| tape.input(&p.value)).collect();
        let emb_node = param_nodes[self.emb];
        let mut dropout_rng = StdRng::seed_from_u64(opts.dropout_seed);
        let do_dropout = opts.train && self.config.dropout > 0.0;

        // Document path.
        let mut x = encoder::embed_document(&mut tape, emb_node, tokens)?;
        if do_dropout {
            x = tape.dropout(x, self.config.dropout, &mut dropout_rng)?;
        }
        let filter_nodes: Vec<FilterNodes> = self
            .filters
            .iter()
            .map(|f| FilterNodes {
                width: f.width,
                conv_w: param_nodes[f.conv_w],
                conv_b: param_nodes[f.conv_b],
                res_w1: param_nodes[f.res_w1],
                res_b1: param_nodes[f.res_b1],
                res_w2: param_nodes[f.res_w2],
                res_b2: param_nodes[f.res_b2],
                res_w3: param_nodes[f.res_w3],
                res_b3: param_nodes[f.res_b3],
            })
            .collect();
        let mut xres = encoder::encode(&mut tape, x, &filter_nodes, mask)?;
        if do_dropout {
            xres = tape.dropout(xres, self.config.dropout, &mut dropout_rng)?;
        }

        // Code representations per level.
        let gcn_nodes: Vec<(NodeId, NodeId)> = self
            .gcn_weights
            .iter()
            .map(|&(w, b)| (param_nodes[w], param_nodes[b]))
            .collect();
        let mut reps = Vec::with_capacity(self.depth());
        for t0 in 0..self.depth() {
            let v = encoder::ontology_embed(&mut tape, emb_node, &self.descriptor_tokens[t0])?;
            let rep = match &self.props {
                Some(props) => {
                    let k = self.level_codes[t0].len();
                    let prop = tape.constant(k, k, props[t0].clone());
                    gcn::forward(&mut tape, prop, v, &gcn_nodes)?
                }
                None => v,
            };
            reps.push(rep);
        }

        let level_nodes: Vec<LevelNodes> = self
            .levels
            .iter()
            .map(|l| LevelNodes {
                attn_onto_w: param_nodes[l.attn_onto_w],
                attn_onto_b: param_nodes[l.attn_onto_b],
                attn_code_w: param_nodes[l.attn_code_w],
                attn_code_b: param_nodes[l.attn_code_b],
                attn_query: param_nodes[l.attn_query],
                cls_w: param_nodes[l.cls_w],
                cls_b: param_nodes[l.cls_b],
                dpu: l.dpu.map(|(w, b)| (param_nodes[w], param_nodes[b])),
            })
            .collect();

        let levels = hpm::hpl_forward(
            &mut tape,
            xres,
            &reps,
            &level_nodes,
            mask,
            self.config.d_dep,
            self.config.use_dpu,
            opts.dep_override.as_ref(),
        )?;
        Ok(ForwardPass { tape, param_nodes, levels })
    }

    /// Forward + loss + backward for one record; returns the loss value and
    /// one gradient buffer per parameter (registration order).
    pub fn record_loss(
        &self,
        tokens: &[usize],
        mask: &[bool],
        targets: &[Vec<f64>],
        train: bool,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut fwd = self.forward(
            tokens,
            mask,
            &ForwardOpts { train, dropout_seed, dep_override: None },
        )?;
        let loss = hpm::loss_sum(&mut fwd.tape, &fwd.levels, targets)?;
        let value = fwd.tape.value_scalar(loss);
        fwd.tape.backward(loss)?;
        let grads = fwd.param_nodes.iter().map(|&id| fwd.tape.grad_or_zeros(id)).collect();
        Ok((value, grads))
    }

    /// Evaluation-mode probabilities per level for one record.
    pub fn predict_record(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mask = vec![true; tokens.len()];
        let fwd = self.forward(tokens, &mask, &ForwardOpts::default())?;
        Ok(fwd
            .levels
            .iter()
            .map(|lvl| fwd.tape.value(lvl.probs).to_vec())
            .collect())
    }

    /// Probabilities per level for many records (data-parallel, input order).
    pub fn score_records(&self, records: &[Record]) -> Result<Vec<Vec<Vec<f64>>>> {
        parallel::ordered_map(records, |r| self.predict_record(&r.tokens))
            .into_iter()
            .collect()
    }

    /// Full per-level evaluation of a record set.
    pub fn evaluate_records(&self, records: &[Record], threshold: f64) -> Result<EvalReport> {
        if records.is_empty() {
            return Err(Error::Config("cannot evaluate an empty split".into()));
        }
        let scored = self.score_records(records)?;
        let mut levels = Vec::with_capacity(self.depth());
        for t0 in 0..self.depth() {
            let scores: Vec<Vec<f64>> = scored.iter().map(|s| s[t0].clone()).collect();
            let mut gold = Vec::with_capacity(records.len());
            for r in records {
                gold.push(self.gold_rows(&r.gold)?[t0].clone());
            }
            levels.push(metrics::evaluate_level(t0 + 1, &scores, &gold, threshold)?);
        }
        Ok(EvalReport { levels })
    }

    /// Zero the padding row's embedding gradient so the reserved row stays
    /// exactly zero under training.
    pub fn clamp_pad_row(&mut self) {
        let d_e = self.config.d_e;
        let emb = &mut self.state.get_mut(self.emb).value;
        if let Some(g) = emb.grad.as_mut() {
            g[..d_e].fill(0.0);
        }
        emb.data_mut()[..d_e].fill(0.0);
    }

    /// Overwrite embedding rows from an imported word-vector table.
    pub fn load_embedding_rows(&mut self, rows: &[(usize, Vec<f64>)]) -> Result<usize> {
        let d_e = self.config.d_e;
        let emb = &mut self.state.get_mut(self.emb).value;
        let n_rows = emb.rows();
        for (idx, vec) in rows {
            if *idx >= n_rows || vec.len() != d_e {
                return Err(Error::Config(format!("embedding row {idx} out of range")));
            }
            emb.data_mut()[idx * d_e..(idx + 1) * d_e].copy_from_slice(vec);
        }
        Ok(rows.len())
    }

    /// Closed-form parameter count for a configuration and level sizes.
    pub fn expected_param_count(config: &ModelConfig, vocab_len: usize, level_sizes: &[usize]) -> usize {
        let d_res = config.d_res();
        let d_q = config.d_query();
        let mut total = vocab_len * config.d_e;
        for &w in &config.kernel_widths {
            total += w * config.d_e * config.d_c + config.d_c;
            total += w * config.d_c * config.d_r + config.d_r;
            total += w * config.d_r * config.d_r + config.d_r;
            total += config.d_c * config.d_r + config.d_r;
        }
        if config.use_orl {
            for l in 0..config.gcn_layers {
                let d_in = if l == 0 { config.d_e } else { config.d_g };
                total += d_in * config.d_g + config.d_g;
            }
        }
        let depth = level_sizes.len();
        for (t0, &k_t) in level_sizes.iter().enumerate() {
            total += d_q * d_res + d_q;
            total += config.d_a * d_res + config.d_a;
            total += k_t * config.d_a;
            total += config.d_dep + 2 * d_res + 1;
            if config.use_dpu && t0 + 1 < depth {
                total += (k_t + config.d_dep) * config.d_dep + config.d_dep;
            }
        }
        total
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_codes.iter().map(|c| c.len()).collect()
    }
}

impl Parameterized for Model {
    fn num_params(&self) -> usize {
        self.state.num_params()
    }
    fn param_name(&self, i: usize) -> String {
        self.state.param_name(i)
    }
    fn param(&self, i: usize) -> &Tensor {
        self.state.param(i)
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        self.state.param_mut(i)
    }
}

/// Whole-model gradient oracle: mean loss over a fixture batch (dropout off)
/// checked against central finite differences on sampled coordinates.
pub fn gradient_check(
    model: &mut Model,
    batch: &[(Vec<usize>, Vec<Vec<f64>>)],
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<crate::tensor::GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Config("gradient check needs at least one record".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    grad_check_impl(model, batch, eps, coords_per_param, seed, scale)
}

fn grad_check_impl(
    model: &mut Model,
    batch: &[(Vec<usize>, Vec<Vec<f64>>)],
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    scale: f64,
) -> Result<crate::tensor::GradCheckReport> {
    crate::tensor::grad_check(
        model,
        |m: &mut Model, with_grad| {
            let mut total = 0.0;
            for (tokens, targets) in batch {
                let mask = vec![true; tokens.len()];
                let (value, grads) = m.record_loss(tokens, &mask, targets, false, 0)?;
                total += value * scale;
                if with_grad {
                    for (i, g) in grads.iter().enumerate() {
                        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                        m.state.param_mut(i).accumulate_grad(&scaled);
                    }
                }
            }
            Ok(total)
        },
        eps,
        coords_per_param,
        seed,
    )
}

/// Pad a batch of records to its longest sequence, producing masks.
pub fn pad_batch(records: &[&Record]) -> Vec<(Vec<usize>, Vec<bool>)> {
    let max_len = records.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    records
        .iter()
        .map(|r| {
            let mut toks = r.tokens.clone();
            let mut mask = vec![true; toks.len()];
            toks.resize(max_len, crate::corpus::PAD_INDEX);
            mask.resize(max_len, false);
            (toks, mask)
        })
        .collect()
}
