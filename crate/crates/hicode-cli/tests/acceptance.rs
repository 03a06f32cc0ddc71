//! Acceptance suite: one criterion per section, one PASS/FAIL line each.
//!
//! Run with `cargo test --test acceptance` (or `cargo test --workspace`).
//! The process exits nonzero if any criterion fails.

use hicode_core::cograph::{build_cograph, SymMode};
use hicode_core::corpus::{
    self, encode_corpus, synth_corpus, PlantedPair, Record, SynthConfig, Vocabulary,
};
use hicode_core::hierarchy::{normalize_code, BlockTable, CodeId, Hierarchy};
use hicode_core::model::{self, Model, ModelConfig, ForwardOpts};
use hicode_core::trainer::{fit, TrainConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::BTreeSet;
use std::time::Instant;

fn main() {
    let criteria: Vec<(&str, fn() -> Result<String, String>)> = vec![
        ("gradient oracle (toy model vs central differences)", c1_gradient_oracle),
        ("synthetic overfit (final-level validation micro-F1)", c2_synthetic_overfit),
        ("co-graph correctness (planted ratios, row sums, symmetry)", c3_cograph),
        ("hierarchy oracle (expand vs brute-force ancestor walk)", c4_hierarchy_oracle),
        ("metrics oracle (P@K, F1 exact; AUC vs pairwise)", c5_metrics_oracle),
        ("attention invariants (row sums, padded positions)", c6_attention_invariants),
        ("dependency-gate test (ablated vs enabled coupling)", c7_dpu_dependency),
        ("hierarchy benefit (full vs flat twin over 5 seeds)", c8_hierarchy_benefit),
        ("level-count sweep (CLI over depths 1..3)", c9_level_sweep),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => {
                println!("PASS  {name} [{:.1?}] {detail}", started.elapsed());
            }
            Ok(Err(reason)) => {
                println!("FAIL  {name} [{:.1?}] {reason}", started.elapsed());
                failures += 1;
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL  {name} [{:.1?}] panicked: {msg}", started.elapsed());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

// ── shared fixture plumbing ──────────────────────────────────────────

struct Fixture {
    model: Model,
    train: Vec<Record>,
    valid: Vec<Record>,
}

fn build_fixture(synth_cfg: &SynthConfig, config: ModelConfig, seed: u64, depth: usize) -> Fixture {
    let synth = synth_corpus(synth_cfg).expect("synth");
    let tokenized: Vec<Vec<String>> =
        synth.train.iter().map(|d| corpus::tokenize(&d.text)).collect();
    let vocab = Vocabulary::build(&tokenized, 1).expect("vocab");
    let finest: BTreeSet<CodeId> = synth
        .train
        .iter()
        .flat_map(|d| d.codes.iter())
        .map(|c| normalize_code(c, None).unwrap())
        .collect();
    let blocks = synth.blocks_tsv.as_deref().map(|t| BlockTable::parse(t).unwrap());
    let mut hierarchy = if depth == 1 {
        Hierarchy::build(&finest, 2, None).unwrap().last_levels(1).unwrap()
    } else {
        Hierarchy::build(&finest, depth, blocks.as_ref()).unwrap()
    };
    hierarchy.load_descriptors(&synth.descriptors_tsv).unwrap();
    let (train, _) = encode_corpus(&synth.train, &vocab, config.max_len).unwrap();
    let (valid, _) = encode_corpus(&synth.valid, &vocab, config.max_len).unwrap();
    let cographs: Vec<_> = (1..=hierarchy.depth())
        .map(|t| build_cograph(&train, &hierarchy, t, config.cograph_sym).unwrap())
        .collect();
    let model = Model::new(config, hierarchy, vocab, &cographs, seed).unwrap();
    Fixture { model, train, valid }
}

fn overfit_model_config() -> ModelConfig {
    ModelConfig {
        d_e: 32,
        d_c: 32,
        d_a: 32,
        d_g: 32,
        dropout: 0.3,
        ..ModelConfig::small()
    }
}

// ── criterion 1 ──────────────────────────────────────────────────────

fn c1_gradient_oracle() -> Result<String, String> {
    let started = Instant::now();
    let synth_cfg = SynthConfig {
        level_sizes: vec![2, 4],
        train_docs: 6,
        valid_docs: 0,
        vocab_size: 30,
        noise_tokens: 2,
        triggers_per_code: 1,
        trigger_repeats: 2,
        seed: 17,
        ..SynthConfig::default()
    };
    let f = build_fixture(&synth_cfg, ModelConfig::toy(), 17, 2);
    let mut model = f.model;
    let batch: Vec<(Vec<usize>, Vec<Vec<f64>>)> = f
        .train
        .iter()
        .take(2)
        .map(|r| (r.tokens.clone(), model.targets_for(&r.gold).unwrap()))
        .collect();
    let report = model::gradient_check(&mut model, &batch, 1e-5, 12, 17)
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    if report.max_rel_err >= 1e-4 {
        return Err(format!(
            "max relative error {:.3e} >= 1e-4 at {}[{}]",
            report.max_rel_err, report.worst_param, report.worst_coord
        ));
    }
    if elapsed.as_secs() >= 30 {
        return Err(format!("took {elapsed:.1?}, budget 30 s"));
    }
    Ok(format!(
        "max rel err {:.3e} over {} coordinates",
        report.max_rel_err, report.coords_checked
    ))
}

// ── criterion 2 ──────────────────────────────────────────────────────

fn c2_synthetic_overfit() -> Result<String, String> {
    let started = Instant::now();
    let synth_cfg = SynthConfig {
        level_sizes: vec![4, 12, 24],
        train_docs: 64,
        valid_docs: 32,
        vocab_size: 200,
        signal: 1.0,
        noise_tokens: 10,
        trigger_repeats: 4,
        alpha: 0.5,
        max_inclusion: 0.8,
        seed: 8,
        ..SynthConfig::default()
    };
    let f = build_fixture(&synth_cfg, overfit_model_config(), 1, 3);
    let train_cfg = TrainConfig {
        learning_rate: 0.01,
        weight_decay: 5e-4,
        batch_size: 4,
        patience: 200,
        max_epochs: 200,
        seed: 1,
        threshold: 0.5,
    };
    // The runtime budget is stated for one thread; use a dedicated
    // single-thread pool so the measurement is honest.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let outcome = pool
        .install(|| fit(f.model, &f.train, &f.valid, &train_cfg, &mut |_| {}))
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    if outcome.best_micro_f1 < 0.95 {
        return Err(format!(
            "validation micro-F1 {:.4} < 0.95 (best epoch {})",
            outcome.best_micro_f1, outcome.best_epoch
        ));
    }
    if elapsed.as_secs() >= 300 {
        return Err(format!("took {elapsed:.1?}, budget 5 min single-threaded"));
    }
    Ok(format!(
        "micro-F1 {:.4} at epoch {} of {}, {elapsed:.1?} on one thread",
        outcome.best_micro_f1, outcome.best_epoch, outcome.epochs_run
    ))
}

// ── criterion 3 ──────────────────────────────────────────────────────

fn c3_cograph() -> Result<String, String> {
    let synth_cfg = SynthConfig {
        level_sizes: vec![4, 12, 24],
        train_docs: 40,
        valid_docs: 0,
        vocab_size: 220,
        planted: vec![PlantedPair { together: 2, apart: 1 }],
        seed: 23,
        ..SynthConfig::default()
    };
    let synth = synth_corpus(&synth_cfg).map_err(|e| e.to_string())?;
    let finest: BTreeSet<CodeId> = synth
        .train
        .iter()
        .flat_map(|d| d.codes.iter())
        .map(|c| normalize_code(c, None).unwrap())
        .collect();
    let h = Hierarchy::build(&finest, 3, None).map_err(|e| e.to_string())?;
    let records: Vec<Record> = synth
        .train
        .iter()
        .map(|d| Record {
            id: d.id.clone(),
            tokens: vec![1],
            gold: d.codes.iter().map(|c| normalize_code(c, None).unwrap()).collect(),
        })
        .collect();
    let g = build_cograph(&records, &h, 3, SymMode::Avg).map_err(|e| e.to_string())?;
    let k = g.node_count();

    // Planted ratio is exact.
    let plant = &synth.plants[0];
    let idx = |name: &str| {
        let code = normalize_code(name, None).unwrap();
        g.codes.iter().position(|c| *c == code).unwrap()
    };
    let (a, b) = (idx(&plant.a), idx(&plant.b));
    let got = g.weights[a * k + b];
    if got != plant.expected_ratio {
        return Err(format!("e(a,b) = {got}, planted {}", plant.expected_ratio));
    }

    // Non-isolated rows sum to one.
    for i in 0..k {
        let row: f64 = g.weights[i * k..(i + 1) * k].iter().sum();
        if row != 0.0 && (row - 1.0).abs() > 1e-9 {
            return Err(format!("row {i} sums to {row}"));
        }
    }
    // The propagation matrix is symmetric.
    for i in 0..k {
        for j in 0..k {
            if (g.propagation[i * k + j] - g.propagation[j * k + i]).abs() > 1e-12 {
                return Err(format!("P asymmetric at ({i},{j})"));
            }
        }
    }
    Ok(format!("planted e(a,b) = {got} exactly; {k} nodes checked"))
}

// ── criterion 4 ──────────────────────────────────────────────────────

fn c4_hierarchy_oracle() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(29);
    let blocks = BlockTable::builtin();
    for fixture_idx in 0..1000 {
        // Random finest codes across kinds.
        let n = rng.random_range(2..10);
        let mut finest: BTreeSet<CodeId> = BTreeSet::new();
        while finest.len() < n {
            let kind = rng.random_range(0..3);
            let raw = match kind {
                0 => format!(
                    "{:03}.{}{}",
                    rng.random_range(1..999),
                    rng.random_range(0..10),
                    if rng.random::<f64>() < 0.5 {
                        rng.random_range(0..10).to_string()
                    } else {
                        String::new()
                    }
                ),
                1 => format!("E{:03}.{}", rng.random_range(0..999), rng.random_range(0..10)),
                _ => format!("V{:02}.{}", rng.random_range(1..91), rng.random_range(0..10)),
            };
            finest.insert(normalize_code(&raw, None).unwrap());
        }
        let depth = rng.random_range(2..=4usize);
        let h = Hierarchy::build(&finest, depth, Some(&blocks)).map_err(|e| e.to_string())?;

        // Random gold subset at the finest level.
        let gold: BTreeSet<CodeId> =
            finest.iter().filter(|_| rng.random::<f64>() < 0.5).cloned().collect();
        let expanded = h.expand_labels(&gold).map_err(|e| e.to_string())?;

        // Independent oracle: per-code ancestor walk via string truncation.
        let oracle_ancestors = |code: &CodeId| -> Vec<CodeId> {
            let rendered = code.render();
            let (stem, dec) = match rendered.split_once('.') {
                Some((s, d)) => (s.to_string(), d.to_string()),
                None => (rendered.clone(), String::new()),
            };
            let one_dec = if dec.is_empty() {
                stem.clone()
            } else {
                format!("{stem}.{}", &dec[..1])
            };
            let mut chain = vec![
                normalize_code(&rendered, Some(code.kind())).unwrap(),
                normalize_code(&one_dec, Some(code.kind())).unwrap(),
                normalize_code(&stem, Some(code.kind())).unwrap(),
            ];
            chain.truncate(depth);
            if depth == 4 {
                let cat = normalize_code(&stem, Some(code.kind())).unwrap();
                chain.push(blocks.block_of(&cat).unwrap());
            }
            chain.reverse(); // coarse → fine
            chain
        };
        let mut want: Vec<BTreeSet<CodeId>> = vec![BTreeSet::new(); depth];
        for g in &gold {
            for (lvl, anc) in oracle_ancestors(g).into_iter().enumerate() {
                want[lvl].insert(anc);
            }
        }
        if expanded != want {
            return Err(format!("fixture {fixture_idx}: expansion mismatch"));
        }
        // Per-record set sizes never shrink with depth.
        for w in expanded.windows(2) {
            if w[0].len() > w[1].len() {
                return Err(format!("fixture {fixture_idx}: level sizes decreased"));
            }
        }
    }
    Ok("1000 random fixtures matched exactly".into())
}

// ── criterion 5 ──────────────────────────────────────────────────────

fn c5_metrics_oracle() -> Result<String, String> {
    use hicode_core::metrics::{auc, f1, precision_at_k, Mode};
    let mut rng = StdRng::seed_from_u64(31);
    for trial in 0..100 {
        let records = rng.random_range(2..10);
        let codes = rng.random_range(2..9);
        let scores: Vec<Vec<f64>> = (0..records)
            .map(|_| (0..codes).map(|_| (rng.random_range(0..12) as f64) / 12.0).collect())
            .collect();
        let mut gold: Vec<Vec<bool>> = (0..records)
            .map(|_| (0..codes).map(|_| rng.random::<f64>() < 0.35).collect())
            .collect();
        gold[0][0] = true;
        gold[records - 1][0] = false;

        // P@K against repeated max extraction.
        let k = rng.random_range(1..=codes);
        let (got_p, _) = precision_at_k(&scores, &gold, k).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for r in 0..records {
            let mut remaining: Vec<usize> = (0..codes).collect();
            let mut hits = 0;
            for _ in 0..k {
                let best_pos = (0..remaining.len())
                    .min_by(|&x, &y| {
                        scores[r][remaining[y]]
                            .partial_cmp(&scores[r][remaining[x]])
                            .unwrap()
                            .then(remaining[x].cmp(&remaining[y]))
                    })
                    .unwrap();
                let c = remaining.remove(best_pos);
                if gold[r][c] {
                    hits += 1;
                }
            }
            total += hits as f64 / k as f64;
        }
        if got_p != total / records as f64 {
            return Err(format!("trial {trial}: P@{k} mismatch"));
        }

        // Micro F1 against a pooled confusion matrix.
        let got_f1 = f1(&scores, &gold, 0.5, Mode::Micro).map_err(|e| e.to_string())?.value;
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for r in 0..records {
            for c in 0..codes {
                let pred = scores[r][c] >= 0.5;
                match (pred, gold[r][c]) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
        }
        let want_f1 =
            if 2.0 * tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        if got_f1 != want_f1 {
            return Err(format!("trial {trial}: micro F1 {got_f1} vs {want_f1}"));
        }

        // Micro AUC against the O(n²) pairwise statistic.
        let got_auc = auc(&scores, &gold, Mode::Micro).map_err(|e| e.to_string())?.value;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for r in 0..records {
            for c in 0..codes {
                if gold[r][c] {
                    pos.push(scores[r][c]);
                } else {
                    neg.push(scores[r][c]);
                }
            }
        }
        let mut acc = 0.0;
        for &p in &pos {
            for &q in &neg {
                acc += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let want_auc = acc / (pos.len() as f64 * neg.len() as f64);
        if (got_auc - want_auc).abs() > 1e-12 {
            return Err(format!("trial {trial}: AUC {got_auc} vs {want_auc}"));
        }
    }
    Ok("100 random fixtures per metric matched".into())
}

// ── criterion 6 ──────────────────────────────────────────────────────

fn c6_attention_invariants() -> Result<String, String> {
    let synth_cfg = SynthConfig {
        level_sizes: vec![2, 4],
        train_docs: 12,
        valid_docs: 0,
        vocab_size: 40,
        seed: 37,
        ..SynthConfig::default()
    };
    let f = build_fixture(&synth_cfg, ModelConfig::toy(), 37, 2);
    let mut rng = StdRng::seed_from_u64(41);
    let mut rows_checked = 0usize;
    for batch_idx in 0..10 {
        // Randomized padded batch.
        let picks: Vec<&Record> =
            (0..4).map(|_| &f.train[rng.random_range(0..f.train.len())]).collect();
        let padded = model::pad_batch(&picks);
        for (tokens, mask) in &padded {
            let fwd = f
                .model
                .forward(tokens, mask, &ForwardOpts::default())
                .map_err(|e| e.to_string())?;
            let n = tokens.len();
            for lvl in &fwd.levels {
                for att in [&lvl.att_onto, &lvl.att_code] {
                    for row in att.chunks(n) {
                        rows_checked += 1;
                        let sum: f64 = row.iter().sum();
                        if (sum - 1.0).abs() > 1e-9 {
                            return Err(format!("batch {batch_idx}: row sums to {sum}"));
                        }
                        for (j, &a) in row.iter().enumerate() {
                            if !mask[j] && a != 0.0 {
                                return Err(format!(
                                    "batch {batch_idx}: mass {a} on padded position {j}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{rows_checked} attention rows over randomized padded batches"))
}

// ── criterion 7 ──────────────────────────────────────────────────────

fn c7_dpu_dependency() -> Result<String, String> {
    let synth_cfg = SynthConfig {
        level_sizes: vec![2, 4],
        train_docs: 8,
        valid_docs: 0,
        vocab_size: 40,
        seed: 43,
        ..SynthConfig::default()
    };
    let f = build_fixture(&synth_cfg, ModelConfig::toy(), 43, 2);
    let record = &f.train[0];
    let mask = vec![true; record.tokens.len()];

    let final_probs = |m: &Model| -> Vec<f64> {
        let fwd = m.forward(&record.tokens, &mask, &ForwardOpts::default()).unwrap();
        fwd.tape.value(fwd.levels.last().unwrap().probs).to_vec()
    };
    // Perturb every level-1 parameter.
    let perturbed = |base: &Model| -> Model {
        let mut m = base.clone();
        for i in 0..m.state.len() {
            if m.state.get(i).name.starts_with("lvl1.") {
                for v in m.state.get_mut(i).value.data_mut() {
                    *v += 0.05;
                }
            }
        }
        m
    };

    let mut gated = f.model.clone();
    gated.config.use_dpu = true;
    let mut ablated = f.model.clone();
    ablated.config.use_dpu = false;

    let base_abl = final_probs(&ablated);
    let pert_abl = final_probs(&perturbed(&ablated));
    if base_abl != pert_abl {
        return Err("ablated: final level reacted to earlier-level parameters".into());
    }
    let base_gate = final_probs(&gated);
    let pert_gate = final_probs(&perturbed(&gated));
    if base_gate == pert_gate {
        return Err("enabled: final level ignored earlier-level parameters".into());
    }
    Ok("ablated twin bit-identical under perturbation; gated twin differs".into())
}



// ── criterion 8 ──────────────────────────────────────────────────────

fn c8_hierarchy_benefit() -> Result<String, String> {
    let mut full_scores = Vec::new();
    let mut flat_scores = Vec::new();
    for seed in 1..=5u64 {
        let synth_cfg = SynthConfig {
            level_sizes: vec![4, 12, 24],
            train_docs: 48,
            valid_docs: 24,
            vocab_size: 200,
            signal: 1.0,
            noise_tokens: 10,
            trigger_repeats: 4,
            alpha: 1.2,
            max_inclusion: 0.8,
            seed: 100 + seed,
            ..SynthConfig::default()
        };
        let train_cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            batch_size: 4,
            patience: 60,
            max_epochs: 60,
            seed,
            threshold: 0.5,
        };
        for (depth, scores) in [(3usize, &mut full_scores), (1usize, &mut flat_scores)] {
            let f = build_fixture(&synth_cfg, overfit_model_config(), seed, depth);
            let outcome =
                fit(f.model, &f.train, &f.valid, &train_cfg, &mut |_| {}).map_err(|e| e.to_string())?;
            let report = outcome
                .model
                .evaluate_records(&f.valid, train_cfg.threshold)
                .map_err(|e| e.to_string())?;
            scores.push(report.levels.last().unwrap().macro_f1);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (full, flat) = (mean(&full_scores), mean(&flat_scores));
    let gap = full - flat;
    let detail = format!(
        "final-level macro-F1: full {:.4} vs flat twin {:.4}, gap {:+.4} over 5 seeds (full {:?}, flat {:?})",
        full,
        flat,
        gap,
        full_scores.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        flat_scores.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
    );
    if full < flat {
        return Err(detail);
    }
    Ok(detail)
}

// ── criterion 9 ──────────────────────────────────────────────────────

fn c9_level_sweep() -> Result<String, String> {
    use std::process::Command;
    let dir = std::env::temp_dir().join(format!("hicode-sweep-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_hicode");
    let corpus = dir.join("corpus");
    let run = |args: &[&str]| -> Result<String, String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "hicode {:?} failed: {}",
                args,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    run(&[
        "synth", "--out", corpus.to_str().unwrap(), "--seed", "9",
        "--train-docs", "32", "--valid-docs", "16", "--noise", "10",
        "--trigger-repeats", "4", "--alpha", "0.5", "--max-inclusion", "0.8",
    ])?;
    let mut table = String::from(
        "depth | macro_auc micro_auc macro_f1 micro_f1 (final level, validation)\n",
    );
    for depth in 1..=3usize {
        let model_dir = dir.join(format!("model-t{depth}"));
        let stdout = run(&[
            "train",
            "--train", corpus.join("train.jsonl").to_str().unwrap(),
            "--valid", corpus.join("valid.jsonl").to_str().unwrap(),
            "--out", model_dir.to_str().unwrap(),
            "--levels", &depth.to_string(),
            "--lr", "0.01", "--weight-decay", "5e-4", "--batch-size", "4",
            "--max-epochs", "15", "--patience", "15", "--seed", "1",
        ])?;
        // The final epoch's last-level metric line.
        let line = stdout
            .lines()
            .filter(|l| l.contains(", valid, "))
            .last()
            .ok_or("no metric lines logged")?
            .to_string();
        let fields: Vec<&str> = line.split(", ").collect();
        if fields.len() != 10 {
            return Err(format!("malformed metric line: {line}"));
        }
        table.push_str(&format!(
            "{depth:>5} | {:>9} {:>9} {:>8} {:>8}\n",
            fields[3], fields[4], fields[5], fields[6]
        ));
    }
    print!("{table}");
    let _ = std::fs::remove_dir_all(&dir);
    Ok("depths 1..3 trained and logged".into())
}
