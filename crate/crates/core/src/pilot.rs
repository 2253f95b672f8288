//! Evaluator-head detection.
//!
//! Probe prompts carry a known evidence span. For each probe the final
//! attention row of every head is summed over the evidence positions, the
//! per-probe matrices are averaged into a heads x layers evidence-score
//! matrix, and the evaluator heads are the top-`k` heads of the layer with
//! the largest total score.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, Error, Result};
use crate::trace::AttentionTrace;

pub use crate::presets::load_preset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseKind {
    Qa,
    MultiHop,
}

/// One synthetic probe prompt with the positions of its evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotCase {
    pub token_ids: Vec<u32>,
    /// Sorted evidence positions.
    pub evidence: Vec<usize>,
    /// Insertion depth of each inserted span, in insertion order.
    pub depths: Vec<f64>,
    pub question_len: usize,
    pub kind: CaseKind,
}

fn check_depth(depth: f64) -> Result<()> {
    if (0.0..=1.0).contains(&depth) {
        Ok(())
    } else {
        arg(format!("depth {depth} not in [0, 1]"))
    }
}

/// Start index of a span of `span_len` tokens placed at `depth` inside a
/// region of `region_len` tokens.
pub fn placement(depth: f64, region_len: usize, span_len: usize) -> usize {
    let free = region_len.saturating_sub(span_len);
    ((depth * free as f64).floor() as usize).min(free)
}

/// Fills every `None` slot by cycling through `filler`.
fn fill(slots: Vec<Option<u32>>, filler: &[u32]) -> Result<Vec<u32>> {
    let mut cycle = filler.iter().copied().cycle();
    slots
        .into_iter()
        .map(|slot| match slot {
            Some(t) => Ok(t),
            None => cycle
                .next()
                .ok_or_else(|| Error::Argument("filler is empty but the haystack needs filling".into())),
        })
        .collect()
}

/// Needle-in-a-haystack probe: `needle` placed at `depth` within the filler,
/// `question` occupying the final positions.
pub fn synthesize_haystack(
    filler: &[u32],
    needle: &[u32],
    question: &[u32],
    target_len: usize,
    depth: f64,
) -> Result<PilotCase> {
    check_depth(depth)?;
    if needle.is_empty() {
        return arg("needle is empty");
    }
    if needle.len() + question.len() > target_len {
        return arg(format!(
            "needle ({}) plus question ({}) exceed target length {target_len}",
            needle.len(),
            question.len()
        ));
    }
    let context_len = target_len - question.len();
    let start = placement(depth, context_len, needle.len());
    let mut slots = vec![None; target_len];
    for (slot, &t) in slots[start..].iter_mut().zip(needle) {
        *slot = Some(t);
    }
    for (slot, &t) in slots[context_len..].iter_mut().zip(question) {
        *slot = Some(t);
    }
    Ok(PilotCase {
        token_ids: fill(slots, filler)?,
        evidence: (start..start + needle.len()).collect(),
        depths: vec![depth],
        question_len: question.len(),
        kind: CaseKind::Qa,
    })
}

/// A variable traced through a chain of assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainVariable {
    pub name: Vec<u32>,
    pub value: Vec<u32>,
    pub hops: usize,
}

fn ascii(s: &str) -> impl Iterator<Item = u32> + '_ {
    s.bytes().map(u32::from)
}

/// Hop statements of one chain as byte-token patterns:
/// `NAME_0 = VALUE`, `NAME_1 = NAME_0`, ..., `NAME_{hops-1} = NAME_{hops-2}`.
pub fn chain_statements(var: &ChainVariable) -> Vec<Vec<u32>> {
    let label = |i: usize| -> Vec<u32> {
        var.name
            .iter()
            .copied()
            .chain(ascii("_"))
            .chain(ascii(&i.to_string()))
            .collect()
    };
    (0..var.hops)
        .map(|i| {
            let rhs = if i == 0 { var.value.clone() } else { label(i - 1) };
            label(i).into_iter().chain(ascii(" = ")).chain(rhs).collect()
        })
        .collect()
}

/// Multi-hop probe. Statements from all variables, in order, are placed at
/// the matching entry of `depths` within the context region; the evidence is
/// the union of all statement spans.
pub fn synthesize_chain_case(
    variables: &[ChainVariable],
    filler: &[u32],
    question: &[u32],
    target_len: usize,
    depths: &[f64],
) -> Result<PilotCase> {
    let statements: Vec<Vec<u32>> = variables.iter().flat_map(chain_statements).collect();
    if statements.is_empty() {
        return arg("chain case needs at least one hop");
    }
    if statements.len() != depths.len() {
        return arg(format!(
            "{} hop statements but {} depths",
            statements.len(),
            depths.len()
        ));
    }
    for &d in depths {
        check_depth(d)?;
    }
    let total: usize = statements.iter().map(Vec::len).sum();
    if total + question.len() > target_len {
        return arg(format!(
            "chain statements ({total}) plus question ({}) exceed target length {target_len}",
            question.len()
        ));
    }

    let context_len = target_len - question.len();
    let mut slots = vec![None; target_len];
    let mut evidence = Vec::with_capacity(total);
    for (stmt, &depth) in statements.iter().zip(depths) {
        let start = placement(depth, context_len, stmt.len());
        for (offset, &t) in stmt.iter().enumerate() {
            let slot = &mut slots[start + offset];
            if slot.is_some() {
                return Err(Error::Placement(format!(
                    "statement at depth {depth} (start {start}) overlaps position {}",
                    start + offset
                )));
            }
            *slot = Some(t);
            evidence.push(start + offset);
        }
    }
    for (slot, &t) in slots[context_len..].iter_mut().zip(question) {
        *slot = Some(t);
    }
    evidence.sort_unstable();
    Ok(PilotCase {
        token_ids: fill(slots, filler)?,
        evidence,
        depths: depths.to_vec(),
        question_len: question.len(),
        kind: CaseKind::MultiHop,
    })
}

/// Heads x layers evidence scores. Only layers in `layers_present` carry
/// data; other columns are zero and ignored by selection.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceScoreMatrix {
    pub num_heads: usize,
    pub num_layers: usize,
    pub layers_present: Vec<usize>,
    /// Row-major, `scores[head * num_layers + layer]`.
    pub scores: Vec<f64>,
    pub cases_averaged: usize,
}

impl EvidenceScoreMatrix {
    /// Fully-covered matrix from `rows[head][layer]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_heads = rows.len();
        let num_layers = rows.first().map_or(0, Vec::len);
        if num_heads == 0 || num_layers == 0 || rows.iter().any(|r| r.len() != num_layers) {
            return arg("score rows must be non-empty and rectangular");
        }
        Ok(EvidenceScoreMatrix {
            num_heads,
            num_layers,
            layers_present: (0..num_layers).collect(),
            scores: rows.concat(),
            cases_averaged: 1,
        })
    }

    pub fn get(&self, head: usize, layer: usize) -> Option<f64> {
        if head < self.num_heads && self.layers_present.binary_search(&layer).is_ok() {
            Some(self.scores[head * self.num_layers + layer])
        } else {
            None
        }
    }

    /// Total score of one layer over all heads.
    pub fn layer_total(&self, layer: usize) -> f64 {
        (0..self.num_heads)
            .map(|h| self.scores[h * self.num_layers + layer])
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        EvidenceScoreMatrix {
            scores: self.scores.iter().map(|s| s * factor).collect(),
            ..self.clone()
        }
    }

    /// Short content hash used as head-set provenance.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for dim in [self.num_heads, self.num_layers, self.cases_averaged] {
            hasher.update((dim as u64).to_le_bytes());
        }
        for &l in &self.layers_present {
            hasher.update((l as u64).to_le_bytes());
        }
        for s in &self.scores {
            hasher.update(s.to_bits().to_le_bytes());
        }
        hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// CSV with one row per head and one column per layer; absent layers are
    /// left blank.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["head".to_string()];
        header.extend((0..self.num_layers).map(|l| format!("layer_{l}")));
        w.write_record(&header).map_err(csv_err)?;
        for head in 0..self.num_heads {
            let mut record = vec![head.to_string()];
            record.extend(
                (0..self.num_layers).map(|l| self.get(head, l).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Stream(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Accumulated evidence score of every captured head: the sum of its final
/// attention row over the evidence positions.
pub fn accumulate_evidence(trace: &AttentionTrace, evidence: &[usize]) -> Result<EvidenceScoreMatrix> {
    let n = trace.seq_len;
    if trace.window == 0 {
        return arg("trace carries no attention rows");
    }
    if let Some(&bad) = evidence.iter().find(|&&j| j >= n) {
        return arg(format!("evidence index {bad} outside [0, {n})"));
    }
    let mut positions = evidence.to_vec();
    positions.sort_unstable();
    positions.dedup();

    let (heads, layers) = (trace.num_heads, trace.num_layers);
    let mut scores = vec![0.0; heads * layers];
    for &layer in &trace.layers_present {
        for head in 0..heads {
            let row = trace
                .last_row(layer, head)
                .ok_or_else(|| Error::Mismatch(format!("trace has no row for layer {layer} head {head}")))?;
            scores[head * layers + layer] = positions.iter().map(|&j| row[j] as f64).sum();
        }
    }
    Ok(EvidenceScoreMatrix {
        num_heads: heads,
        num_layers: layers,
        layers_present: trace.layers_present.clone(),
        scores,
        cases_averaged: 1,
    })
}

/// Elementwise mean of per-case matrices.
pub fn build_matrix(per_case: &[EvidenceScoreMatrix]) -> Result<EvidenceScoreMatrix> {
    let first = per_case
        .first()
        .ok_or_else(|| Error::Argument("no pilot cases to average".into()))?;
    for (i, m) in per_case.iter().enumerate().skip(1) {
        if m.num_heads != first.num_heads
            || m.num_layers != first.num_layers
            || m.layers_present != first.layers_present
        {
            return Err(Error::Mismatch(format!(
                "case {i} is {}x{} over layers {:?}, case 0 is {}x{} over layers {:?}",
                m.num_heads, m.num_layers, m.layers_present, first.num_heads, first.num_layers, first.layers_present
            )));
        }
    }
    let count = per_case.len() as f64;
    let scores = (0..first.scores.len())
        .map(|i| per_case.iter().map(|m| m.scores[i]).sum::<f64>() / count)
        .collect();
    Ok(EvidenceScoreMatrix {
        scores,
        cases_averaged: per_case.len(),
        ..first.clone()
    })
}

/// Evaluator heads of one layer, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorHeadSet {
    pub layer: usize,
    pub heads: Vec<usize>,
    pub k: usize,
    pub provenance: String,
}

impl EvaluatorHeadSet {
    /// Structural checks; `num_heads` additionally bounds the head indices.
    pub fn check(&self, num_heads: Option<usize>) -> Result<()> {
        if self.heads.is_empty() {
            return arg("head set is empty");
        }
        if self.k != self.heads.len() {
            return arg(format!("k = {} but {} heads listed", self.k, self.heads.len()));
        }
        let mut sorted = self.heads.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return arg(format!("duplicate head in {:?}", self.heads));
        }
        if let Some(h) = num_heads {
            if let Some(&bad) = self.heads.iter().find(|&&x| x >= h) {
                return arg(format!("head {bad} outside [0, {h})"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("head set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: EvaluatorHeadSet =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("heads JSON: {e}")))?;
        set.check(None)?;
        Ok(set)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Picks the layer with the largest column total, then its `k` highest
/// scoring heads. Ties go to the lower layer and the lower head index.
pub fn select_heads(matrix: &EvidenceScoreMatrix, k: usize) -> Result<EvaluatorHeadSet> {
    if k == 0 || k > matrix.num_heads {
        return arg(format!("k = {k} not in [1, {}]", matrix.num_heads));
    }
    let mut best: Option<(usize, f64)> = None;
    for &layer in &matrix.layers_present {
        let total = matrix.layer_total(layer);
        if best.is_none_or(|(_, b)| total > b) {
            best = Some((layer, total));
        }
    }
    let (layer, _) = best.ok_or_else(|| Error::Coverage("evidence matrix covers no layers".into()))?;

    let mut heads: Vec<usize> = (0..matrix.num_heads).collect();
    let score = |h: usize| matrix.scores[h * matrix.num_layers + layer];
    heads.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    heads.truncate(k);
    Ok(EvaluatorHeadSet {
        layer,
        heads,
        k,
        provenance: format!("evidence-matrix:{}", matrix.fingerprint()),
    })
}

/// One entry of a pilot trace manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Trace file, relative to the manifest's directory.
    pub trace: PathBuf,
    /// Evidence positions in the trace's token coordinates.
    pub evidence: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// `manifest.json` of a pilot trace directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PilotManifest {
    pub cases: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl PilotManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
