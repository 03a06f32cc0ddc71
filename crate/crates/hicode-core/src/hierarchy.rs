//! Diagnosis-code normalization and the per-level inheritance structure.
//!
//! Codes are ICD-9 style: a stem plus optional decimal digits. The hierarchy
//! runs from coarse to fine over up to four levels: block range (from an
//! external table), category (the undotted stem), one-decimal truncation, and
//! the full code. A hierarchy built with `levels = n` keeps the last `n` of
//! those, renumbered 1..=n; the finest level always equals the set of codes
//! observed in training data.

use crate::{Error, Result};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodeKind {
    Diagnosis,
    Procedure,
    ECode,
    VCode,
    /// Level-1 range label such as `401-405`; never produced by
    /// [`normalize_code`], only by the block table.
    Block,
}

/// A canonical code: dotted form plus its kind.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodeId {
    stem: String,
    decimals: String,
    kind: CodeKind,
}

impl CodeId {
    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn stem(&self) -> &str {
        &self.stem
    }

    /// Canonical dotted rendering, e.g. `405.01`.
    pub fn render(&self) -> String {
        if self.decimals.is_empty() {
            self.stem.clone()
        } else {
            format!("{}.{}", self.stem, self.decimals)
        }
    }

    fn block(label: &str) -> CodeId {
        CodeId { stem: label.to_string(), decimals: String::new(), kind: CodeKind::Block }
    }

    /// Truncate to at most one decimal digit.
    fn one_decimal(&self) -> CodeId {
        CodeId {
            stem: self.stem.clone(),
            decimals: self.decimals.chars().take(1).collect(),
            kind: self.kind,
        }
    }

    /// The undotted category.
    fn category(&self) -> CodeId {
        CodeId { stem: self.stem.clone(), decimals: String::new(), kind: self.kind }
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

/// Normalize a raw code (dotted or undotted) into canonical form.
///
/// Stem lengths: diagnosis 3 digits, V codes `V` + 2 digits, E codes `E` + 3
/// digits, procedures 2 digits. Decimal digits: up to 2 (1 for E codes).
/// Without a hint the kind is inferred from the leading character; a bare
/// digit string is a diagnosis code.
pub fn normalize_code(raw: &str, hint: Option<CodeKind>) -> Result<CodeId> {
    let reject = |why: &str| Error::RejectedCode(format!("{raw:?}: {why}"));
    let raw_trim = raw.trim();
    if raw_trim.is_empty() {
        return Err(reject("empty"));
    }
    let upper = raw_trim.to_ascii_uppercase();
    let kind = match hint {
        Some(CodeKind::Block) => return Err(reject("block ranges are not normalizable codes")),
        Some(k) => k,
        None => match upper.chars().next().unwrap() {
            'E' => CodeKind::ECode,
            'V' => CodeKind::VCode,
            c if c.is_ascii_digit() => CodeKind::Diagnosis,
            _ => return Err(reject("unrecognized leading character")),
        },
    };
    let (prefix, stem_digits, max_dec) = match kind {
        CodeKind::Diagnosis => ("", 3, 2),
        CodeKind::Procedure => ("", 2, 2),
        CodeKind::VCode => ("V", 2, 2),
        CodeKind::ECode => ("E", 3, 1),
        CodeKind::Block => unreachable!(),
    };
    let body = upper.strip_prefix(prefix).ok_or_else(|| reject("kind prefix missing"))?;

    let (stem_body, decimals) = match body.split_once('.') {
        Some((s, d)) => (s, d),
        None => {
            if body.len() < stem_digits {
                return Err(reject("too short for its kind"));
            }
            body.split_at(stem_digits)
        }
    };
    if stem_body.len() != stem_digits || !stem_body.chars().all(|c| c.is_ascii_digit()) {
        return Err(reject("malformed stem"));
    }
    if decimals.len() > max_dec || !decimals.chars().all(|c| c.is_ascii_digit()) {
        return Err(reject("malformed decimal part"));
    }
    Ok(CodeId { stem: format!("{prefix}{stem_body}"), decimals: decimals.to_string(), kind })
}

/// One `lo-hi` range from the block table.
#[derive(Debug, Clone)]
struct BlockRange {
    lo: String,
    hi: String,
    kind: CodeKind,
    label: String,
}

/// Level-1 block ranges.
#[derive(Debug, Clone, Default)]
pub struct BlockTable {
    ranges: Vec<BlockRange>,
}

impl BlockTable {
    /// Parse `lo-hi<TAB>label` lines.
    pub fn parse(text: &str) -> Result<BlockTable> {
        let mut ranges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (range, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("blocks line {}: missing tab", lineno + 1)))?;
            let (lo, hi) = range
                .split_once('-')
                .ok_or_else(|| Error::Parse(format!("blocks line {}: missing '-'", lineno + 1)))?;
            // Two-digit numeric stems are procedure ranges.
            let hint = |s: &str| {
                if s.len() == 2 && s.chars().all(|c| c.is_ascii_digit()) {
                    Some(CodeKind::Procedure)
                } else {
                    None
                }
            };
            let lo_code = normalize_code(lo, hint(lo))?;
            let hi_code = normalize_code(hi, hint(hi))?;
            if lo_code.kind != hi_code.kind {
                return Err(Error::Parse(format!(
                    "blocks line {}: range mixes code kinds",
                    lineno + 1
                )));
            }
            ranges.push(BlockRange {
                lo: lo_code.stem,
                hi: hi_code.stem,
                kind: lo_code.kind,
                label: label.trim().to_string(),
            });
        }
        Ok(BlockTable { ranges })
    }

    pub fn load(path: &Path) -> Result<BlockTable> {
        BlockTable::parse(&std::fs::read_to_string(path)?)
    }

    /// The bundled chapter-level table for standard code ranges.
    pub fn builtin() -> BlockTable {
        BlockTable::parse(include_str!("data/blocks.tsv")).expect("bundled block table parses")
    }

    /// The block range covering a category code.
    pub fn block_of(&self, category: &CodeId) -> Result<CodeId> {
        self.lookup(category).map(|(code, _)| code)
    }

    fn lookup(&self, category: &CodeId) -> Result<(CodeId, String)> {
        for r in &self.ranges {
            if r.kind == category.kind
                && category.stem.as_str() >= r.lo.as_str()
                && category.stem.as_str() <= r.hi.as_str()
            {
                return Ok((CodeId::block(&format!("{}-{}", r.lo, r.hi)), r.label.clone()));
            }
        }
        Err(Error::Config(format!("no block range covers code {category}")))
    }
}

/// The inheritance structure: per-level code lists plus child→parent maps.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    /// `levels[t-1]` is the sorted code list of level t; the last entry is
    /// exactly the finest codes seen in training data.
    levels: Vec<Vec<CodeId>>,
    /// `parents[t-1]` maps a level-(t+1) code to its level-t parent.
    parents: Vec<BTreeMap<CodeId, CodeId>>,
    /// Descriptor text per code (all levels).
    descriptors: BTreeMap<CodeId, String>,
}

impl Hierarchy {
    /// Build from the finest-level code set.
    ///
    /// `levels` must be in 2..=4; level 4 requires a block table. The last
    /// level is `finest`; walking up applies one-decimal truncation, then the
    /// category, then the block range.
    pub fn build(
        finest: &BTreeSet<CodeId>,
        levels: usize,
        blocks: Option<&BlockTable>,
    ) -> Result<Hierarchy> {
        if !(2..=4).contains(&levels) {
            return Err(Error::Config(format!("hierarchy levels must be 2..=4, got {levels}")));
        }
        if levels == 4 && blocks.is_none() {
            return Err(Error::Config(
                "a 4-level hierarchy requires a block table for level 1".into(),
            ));
        }
        if finest.is_empty() {
            return Err(Error::Config("cannot build a hierarchy from zero codes".into()));
        }
        if finest.iter().any(|c| c.kind == CodeKind::Block) {
            return Err(Error::Config("block ranges cannot appear as finest codes".into()));
        }

        let mut block_labels: BTreeMap<CodeId, String> = BTreeMap::new();
        let mut level_sets: Vec<BTreeSet<CodeId>> = vec![BTreeSet::new(); levels];
        let mut parent_maps: Vec<BTreeMap<CodeId, CodeId>> = vec![BTreeMap::new(); levels - 1];

        for code in finest {
            // Fine-to-coarse chain, finest first.
            let mut chain: Vec<CodeId> = vec![code.clone(), code.one_decimal(), code.category()];
            if levels == 4 {
                let (block, label) = blocks.unwrap().lookup(&code.category())?;
                block_labels.insert(block.clone(), label);
                chain.push(block);
            }
            chain.truncate(levels);
            for (depth, c) in chain.iter().enumerate() {
                level_sets[levels - 1 - depth].insert(c.clone());
            }
            for (depth, pair) in chain.windows(2).enumerate() {
                let (child, parent) = (&pair[0], &pair[1]);
                let t = levels - 1 - depth; // child sits at level t+1 (1-based)
                parent_maps[t - 1].insert(child.clone(), parent.clone());
            }
        }

        let mut h = Hierarchy {
            levels: level_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            parents: parent_maps,
            descriptors: BTreeMap::new(),
        };
        // Block labels double as descriptors when nothing better is loaded.
        h.descriptors.extend(block_labels);
        Ok(h)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Codes of level `t` (1-based), sorted.
    pub fn level(&self, t: usize) -> &[CodeId] {
        &self.levels[t - 1]
    }

    pub fn finest(&self) -> &[CodeId] {
        self.levels.last().unwrap()
    }

    /// Parent of a level-`t` code at level `t−1`.
    pub fn parent(&self, t: usize, code: &CodeId) -> Option<&CodeId> {
        self.parents.get(t.checked_sub(2)?).and_then(|m| m.get(code))
    }

    /// Keep only the last `n` levels, renumbered 1..=n.
    pub fn last_levels(&self, n: usize) -> Result<Hierarchy> {
        if n == 0 || n > self.depth() {
            return Err(Error::Config(format!(
                "cannot take last {n} levels of a depth-{} hierarchy",
                self.depth()
            )));
        }
        let skip = self.depth() - n;
        Ok(Hierarchy {
            levels: self.levels[skip..].to_vec(),
            parents: self.parents[skip..].to_vec(),
            descriptors: self.descriptors.clone(),
        })
    }

    /// Expand a finest-level gold set into per-level label sets
    /// (`result[t-1]` is the level-t set).
    pub fn expand_labels(&self, gold: &BTreeSet<CodeId>) -> Result<Vec<BTreeSet<CodeId>>> {
        let finest: BTreeSet<&CodeId> = self.finest().iter().collect();
        for c in gold {
            if !finest.contains(c) {
                return Err(Error::RejectedCode(format!(
                    "{c} is not in the finest hierarchy level"
                )));
            }
        }
        let mut out: Vec<BTreeSet<CodeId>> = vec![BTreeSet::new(); self.depth()];
        out[self.depth() - 1] = gold.clone();
        for t in (1..self.depth()).rev() {
            // Level t (1-based) from level t+1: ancestors via the parent map.
            let (coarser, finer) = {
                let (a, b) = out.split_at_mut(t);
                (&mut a[t - 1], &b[0])
            };
            for c in finer {
                let p = self.parents[t - 1]
                    .get(c)
                    .ok_or_else(|| Error::RejectedCode(format!("{c} has no recorded parent")))?;
                coarser.insert(p.clone());
            }
        }
        Ok(out)
    }

    /// Descriptor text for a code; falls back to the code string itself.
    pub fn descriptor(&self, code: &CodeId) -> String {
        self.descriptors.get(code).cloned().unwrap_or_else(|| code.render())
    }

    pub fn set_descriptor(&mut self, code: CodeId, text: String) {
        self.descriptors.insert(code, text);
    }

    /// Load `code<TAB>descriptor` lines, normalizing the code column.
    pub fn load_descriptors(&mut self, text: &str) -> Result<usize> {
        let mut loaded = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (code, desc) = line.split_once('\t').ok_or_else(|| {
                Error::Parse(format!("descriptors line {}: missing tab", lineno + 1))
            })?;
            // Block-range keys (contain '-') are stored verbatim.
            let key = if code.contains('-') {
                CodeId::block(code.trim())
            } else {
                normalize_code(code, None)?
            };
            self.descriptors.insert(key, desc.trim().to_string());
            loaded += 1;
        }
        Ok(loaded)
    }

    /// TSV rows `code<TAB>descriptor` for every stored descriptor.
    pub fn descriptors_tsv(&self) -> String {
        let mut out = String::new();
        for (code, text) in &self.descriptors {
            out.push_str(&format!("{code}\t{text}\n"));
        }
        out
    }

    /// Stable digest over levels and parent maps, for checkpoint integrity.
    pub fn digest(&self) -> u64 {
        let mut h = crate::trainer::Fnv64::new();
        for (t, level) in self.levels.iter().enumerate() {
            h.write(&[t as u8]);
            for c in level {
                h.write(c.render().as_bytes());
                h.write(b"\x1f");
            }
        }
        for m in &self.parents {
            for (c, p) in m {
                h.write(c.render().as_bytes());
                h.write(b">");
                h.write(p.render().as_bytes());
                h.write(b"\x1f");
            }
        }
        h.finish()
    }

    /// Rebuild a hierarchy from [`Hierarchy::export_tsv`] rows.
    pub fn from_tsv(text: &str) -> Result<Hierarchy> {
        let mut levels: Vec<Vec<CodeId>> = Vec::new();
        let mut parents: Vec<BTreeMap<CodeId, CodeId>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "hierarchy line {}: want 3 fields",
                    lineno + 1
                )));
            }
            let t: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("hierarchy line {}: bad level", lineno + 1)))?;
            if t == 0 || t > levels.len() + 1 {
                return Err(Error::Parse(format!(
                    "hierarchy line {}: level {t} out of order",
                    lineno + 1
                )));
            }
            if t == levels.len() + 1 {
                levels.push(Vec::new());
                if t > 1 {
                    parents.push(BTreeMap::new());
                }
            }
            let parse_node = |s: &str| -> Result<CodeId> {
                if s.contains('-') {
                    Ok(CodeId::block(s))
                } else {
                    normalize_code(s, None)
                }
            };
            let code = parse_node(fields[1])?;
            levels[t - 1].push(code.clone());
            if !fields[2].is_empty() {
                let parent = parse_node(fields[2])?;
                parents[t - 2].insert(code, parent);
            }
        }
        if levels.is_empty() {
            return Err(Error::Parse("hierarchy file has no rows".into()));
        }
        for level in levels.iter_mut() {
            level.sort();
        }
        Ok(Hierarchy { levels, parents, descriptors: BTreeMap::new() })
    }

    /// TSV rows `level<TAB>code<TAB>parent` (parent blank at level 1).
    pub fn export_tsv(&self) -> String {
        let mut out = String::new();
        for t in 1..=self.depth() {
            for code in self.level(t) {
                let parent = self.parent(t, code).map(|p| p.render()).unwrap_or_default();
                out.push_str(&format!("{t}\t{code}\t{parent}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(raw: &str) -> CodeId {
        normalize_code(raw, None).unwrap()
    }

    fn set(raws: &[&str]) -> BTreeSet<CodeId> {
        raws.iter().map(|r| code(r)).collect()
    }

    #[test]
    fn normalize_diagnosis_dot_after_three() {
        assert_eq!(code("40501").render(), "405.01");
        assert_eq!(code("486").render(), "486");
        assert_eq!(code("038"), code("038.")); // trailing empty decimal collapses
    }

    #[test]
    fn normalize_e_code_dot_after_four() {
        let c = code("E8470");
        assert_eq!(c.render(), "E847.0");
        assert_eq!(c.kind(), CodeKind::ECode);
    }

    #[test]
    fn normalize_v_code() {
        let c = code("V3000");
        assert_eq!(c.render(), "V30.00");
        assert_eq!(c.kind(), CodeKind::VCode);
    }

    #[test]
    fn normalize_procedure_needs_hint() {
        let c = normalize_code("0151", Some(CodeKind::Procedure)).unwrap();
        assert_eq!(c.render(), "01.51");
        // Without the hint the same digits parse as a diagnosis code.
        assert_eq!(code("0151").render(), "015.1");
    }

    #[test]
    fn normalize_rejects_garbage() {
        for raw in ["", "40", "X12", "405.012", "E84700", "4o5"] {
            let e = normalize_code(raw, None);
            assert!(e.is_err(), "{raw:?} should be rejected");
            assert!(e.unwrap_err().to_string().contains("rejected code"));
        }
    }

    #[test]
    fn normalize_round_trips_canonical_form() {
        for raw in ["405.01", "486", "E847.0", "V30.00", "038.42"] {
            let c = code(raw);
            assert_eq!(normalize_code(&c.render(), Some(c.kind())).unwrap(), c);
        }
    }

    #[test]
    fn build_three_levels_from_siblings() {
        let h = Hierarchy::build(&set(&["405.01", "405.11"]), 3, None).unwrap();
        assert_eq!(h.depth(), 3);
        assert_eq!(h.level(1), &[code("405")]);
        assert_eq!(h.level(2), &[code("405.0"), code("405.1")]);
        assert_eq!(h.level(3), &[code("405.01"), code("405.11")]);
        assert_eq!(h.parent(3, &code("405.01")), Some(&code("405.0")));
        assert_eq!(h.parent(2, &code("405.0")), Some(&code("405")));
    }

    #[test]
    fn single_chain_has_one_code_per_level() {
        let h = Hierarchy::build(&set(&["486"]), 3, None).unwrap();
        for t in 1..=3 {
            assert_eq!(h.level(t), &[code("486")], "level {t}");
        }
    }

    #[test]
    fn sibling_fixture_grows_strictly() {
        // Two siblings per parent at each split.
        let finest = set(&[
            "401.01", "401.02", "401.11", "401.12", "402.01", "402.02", "402.11", "402.12",
        ]);
        let h = Hierarchy::build(&finest, 3, None).unwrap();
        assert!(h.level(1).len() < h.level(2).len());
        assert!(h.level(2).len() < h.level(3).len());
    }

    #[test]
    fn level_sizes_never_decrease() {
        let finest = set(&["405.01", "405.11", "486", "038.42", "E847.0", "V30.00"]);
        let h = Hierarchy::build(&finest, 4, Some(&BlockTable::builtin())).unwrap();
        for t in 1..h.depth() {
            assert!(h.level(t).len() <= h.level(t + 1).len());
        }
    }

    #[test]
    fn four_levels_without_blocks_is_config_error() {
        let err = Hierarchy::build(&set(&["405.01"]), 4, None);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn expand_labels_matches_sibling_example() {
        let h = Hierarchy::build(&set(&["405.01", "405.11"]), 3, None).unwrap();
        let expanded = h.expand_labels(&set(&["405.01", "405.11"])).unwrap();
        assert_eq!(expanded[0], set(&["405"]));
        assert_eq!(expanded[1], set(&["405.0", "405.1"]));
        assert_eq!(expanded[2], set(&["405.01", "405.11"]));
    }

    #[test]
    fn expand_empty_gold_is_empty_everywhere() {
        let h = Hierarchy::build(&set(&["405.01"]), 3, None).unwrap();
        let expanded = h.expand_labels(&BTreeSet::new()).unwrap();
        assert!(expanded.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn expand_rejects_unknown_code() {
        let h = Hierarchy::build(&set(&["405.01"]), 3, None).unwrap();
        assert!(h.expand_labels(&set(&["486"])).is_err());
    }

    #[test]
    fn rebuild_from_own_finest_is_identical() {
        let finest = set(&["405.01", "405.11", "486", "E847.0"]);
        let h = Hierarchy::build(&finest, 3, None).unwrap();
        let again: BTreeSet<CodeId> = h.finest().iter().cloned().collect();
        let h2 = Hierarchy::build(&again, 3, None).unwrap();
        for t in 1..=3 {
            assert_eq!(h.level(t), h2.level(t));
        }
    }

    #[test]
    fn last_levels_renumbers() {
        let h = Hierarchy::build(&set(&["405.01", "405.11"]), 3, None).unwrap();
        let tail = h.last_levels(1).unwrap();
        assert_eq!(tail.depth(), 1);
        assert_eq!(tail.level(1), h.level(3));
        let two = h.last_levels(2).unwrap();
        assert_eq!(two.parent(2, &code("405.01")), Some(&code("405.0")));
    }

    #[test]
    fn tsv_round_trip_preserves_structure() {
        let finest = set(&["405.01", "405.11", "486", "E847.0"]);
        let h = Hierarchy::build(&finest, 3, None).unwrap();
        let back = Hierarchy::from_tsv(&h.export_tsv()).unwrap();
        assert_eq!(h.digest(), back.digest());
        for t in 1..=3 {
            assert_eq!(h.level(t), back.level(t));
        }
    }

    #[test]
    fn builtin_blocks_cover_common_codes() {
        let table = BlockTable::builtin();
        for raw in ["486", "038", "V30", "E847"] {
            let c = code(raw);
            assert!(table.lookup(&c).is_ok(), "{raw} uncovered");
        }
    }

    #[test]
    fn descriptor_fallback_is_code_string() {
        let h = Hierarchy::build(&set(&["405.01"]), 2, None).unwrap();
        assert_eq!(h.descriptor(&code("405.01")), "405.01");
    }

    #[test]
    fn descriptors_load_without_touching_digest() {
        let mut h = Hierarchy::build(&set(&["405.01"]), 2, None).unwrap();
        let before = h.digest();
        h.load_descriptors("405.01\tmalignant renovascular hypertension\n").unwrap();
        assert_eq!(h.descriptor(&code("405.01")), "malignant renovascular hypertension");
        // Digest covers structure, not descriptors.
        assert_eq!(h.digest(), before);
    }
}
