//! Mapping between semantic attribute records and integer label sequences.
//!
//! A [`MappingTable`] enumerates (group, value) pairs onto labels `1..=K`.
//! Label 0 is reserved twice over, in disjoint spaces: as the CTC blank on
//! the alignment side and as the decoder pad/end-of-sequence class on the
//! vocabulary side. The decoder start marker defaults to 100 and is remapped
//! to `K + 1` whenever `K >= 100`, so it never collides with a real label.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

pub type Label = u32;

/// CTC blank symbol (alignment space).
pub const BLANK: Label = 0;
/// Decoder pad symbol, doubling as end-of-sequence (vocabulary space).
pub const PAD: Label = 0;
/// Default decoder start marker; see [`MappingTable::start_symbol`].
pub const DEFAULT_START: Label = 100;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("unknown attribute group `{0}`")]
    UnknownGroup(String),
    #[error("unknown value `{value}` for group `{group}`")]
    UnknownValue { group: String, value: String },
    #[error("empty record: a label sequence needs at least one assigned group")]
    EmptyRecord,
    #[error("label {0} outside 1..={1}")]
    LabelOutOfRange(Label, usize),
    #[error("labels repeat group `{0}`")]
    DuplicateGroup(String),
    #[error("sequence length {got} must stay below max_len {max_len}")]
    TooLong { got: usize, max_len: usize },
    #[error("mapping table: {0}")]
    Table(String),
    #[error("mapping table line {line}: {msg}")]
    TableLine { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Group {
    name: String,
    values: Vec<String>,
}

/// Global enumeration of (attribute group, value) pairs onto labels `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingTable {
    groups: Vec<Group>,
    /// label -> (group index, value index); slot 0 unused (blank/pad).
    by_label: Vec<Option<(usize, usize)>>,
    /// (group name, value name) -> label
    by_pair: HashMap<(String, String), Label>,
}

impl MappingTable {
    /// Builds a table assigning labels sequentially in group/value order.
    pub fn from_groups(groups: &[(&str, &[&str])]) -> Result<Self, CodecError> {
        let mut rows = Vec::new();
        let mut label = 1u32;
        for (g, values) in groups {
            for v in *values {
                rows.push((g.to_string(), v.to_string(), label));
                label += 1;
            }
        }
        Self::from_rows(rows)
    }

    /// Builds a table from explicit (group, value, label) rows, validating
    /// that the labels are a bijection onto 1..=K.
    pub fn from_rows(rows: Vec<(String, String, Label)>) -> Result<Self, CodecError> {
        if rows.is_empty() {
            return Err(CodecError::Table("no rows".into()));
        }
        let k = rows.len();
        let mut groups: Vec<Group> = Vec::new();
        let mut by_label: Vec<Option<(usize, usize)>> = vec![None; k + 1];
        let mut by_pair = HashMap::new();
        for (group, value, label) in rows {
            if label == 0 || label as usize > k {
                return Err(CodecError::Table(format!(
                    "label {label} for {group}/{value} outside 1..={k}"
                )));
            }
            if by_label[label as usize].is_some() {
                return Err(CodecError::Table(format!("label {label} assigned twice")));
            }
            let gidx = match groups.iter().position(|g| g.name == group) {
                Some(i) => i,
                None => {
                    groups.push(Group {
                        name: group.clone(),
                        values: Vec::new(),
                    });
                    groups.len() - 1
                }
            };
            if groups[gidx].values.iter().any(|v| v == &value) {
                return Err(CodecError::Table(format!(
                    "pair {group}/{value} listed twice"
                )));
            }
            groups[gidx].values.push(value.clone());
            by_label[label as usize] = Some((gidx, groups[gidx].values.len() - 1));
            by_pair.insert((group, value), label);
        }
        // bijectivity: every slot 1..=K filled
        if let Some(missing) = by_label[1..].iter().position(|s| s.is_none()) {
            return Err(CodecError::Table(format!("label {} unassigned", missing + 1)));
        }
        Ok(Self {
            groups,
            by_label,
            by_pair,
        })
    }

    /// Total label count K.
    pub fn k(&self) -> usize {
        self.by_label.len() - 1
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn values_of(&self, group: &str) -> Option<&[String]> {
        self.groups
            .iter()
            .find(|g| g.name == group)
            .map(|g| g.values.as_slice())
    }

    pub fn label_for(&self, group: &str, value: &str) -> Result<Label, CodecError> {
        if !self.groups.iter().any(|g| g.name == group) {
            return Err(CodecError::UnknownGroup(group.to_string()));
        }
        self.by_pair
            .get(&(group.to_string(), value.to_string()))
            .copied()
            .ok_or_else(|| CodecError::UnknownValue {
                group: group.to_string(),
                value: value.to_string(),
            })
    }

    /// (group name, value name) for a label in 1..=K.
    pub fn pair_of(&self, label: Label) -> Option<(&str, &str)> {
        let (g, v) = (*self.by_label.get(label as usize)?)?;
        Some((self.groups[g].name.as_str(), self.groups[g].values[v].as_str()))
    }

    pub fn group_of(&self, label: Label) -> Option<usize> {
        (*self.by_label.get(label as usize)?).map(|(g, _)| g)
    }

    /// Decoder start marker: 100 unless K >= 100 collides, then K + 1.
    /// The remapping is table metadata rather than a guess about the intent
    /// of the literal constant.
    pub fn start_symbol(&self) -> Label {
        if self.k() < DEFAULT_START as usize {
            DEFAULT_START
        } else {
            self.k() as Label + 1
        }
    }

    /// Decoder vocabulary size: labels 1..=K plus pad/EOS 0 plus start.
    pub fn vocab_size(&self) -> usize {
        self.k() + 2
    }

    /// Embedding/logit row of the start marker.
    pub fn start_class(&self) -> usize {
        self.k() + 1
    }

    /// Mean per-group chance accuracy of uniform guessing.
    pub fn chance_level(&self) -> f64 {
        let sum: f64 = self
            .groups
            .iter()
            .map(|g| 1.0 / g.values.len() as f64)
            .sum();
        sum / self.groups.len() as f64
    }

    /// Same pairs with groups reordered; labels are reassigned sequentially.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, CodecError> {
        if order.len() != self.groups.len() {
            return Err(CodecError::Table("permutation length mismatch".into()));
        }
        let mut seen = vec![false; order.len()];
        for &i in order {
            if i >= order.len() || seen[i] {
                return Err(CodecError::Table("not a permutation".into()));
            }
            seen[i] = true;
        }
        let mut rows = Vec::new();
        let mut label = 1u32;
        for &gi in order {
            let g = &self.groups[gi];
            for v in &g.values {
                rows.push((g.name.clone(), v.clone(), label));
                label += 1;
            }
        }
        Self::from_rows(rows)
    }

    /// Same table minus one group; labels are reassigned sequentially.
    pub fn without_group(&self, group: &str) -> Result<Self, CodecError> {
        if !self.groups.iter().any(|g| g.name == group) {
            return Err(CodecError::UnknownGroup(group.to_string()));
        }
        if self.groups.len() == 1 {
            return Err(CodecError::Table("cannot drop the only group".into()));
        }
        let mut rows = Vec::new();
        let mut label = 1u32;
        for g in self.groups.iter().filter(|g| g.name != group) {
            for v in &g.values {
                rows.push((g.name.clone(), v.clone(), label));
                label += 1;
            }
        }
        Self::from_rows(rows)
    }

    /// Serializes as `group<TAB>value<TAB>label` lines.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# mapping table: group\tvalue\tlabel\n");
        out.push_str(&format!("# start symbol: {}\n", self.start_symbol()));
        for (gi, g) in self.groups.iter().enumerate() {
            for (vi, v) in g.values.iter().enumerate() {
                let label = self
                    .by_pair
                    .get(&(g.name.clone(), v.clone()))
                    .copied()
                    .expect("pair indexed");
                let _ = (gi, vi);
                out.push_str(&format!("{}\t{}\t{}\n", g.name, v, label));
            }
        }
        out
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), CodecError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, CodecError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (group, value, label) = match (parts.next(), parts.next(), parts.next()) {
                (Some(g), Some(v), Some(l)) => (g, v, l),
                _ => {
                    return Err(CodecError::TableLine {
                        line: i + 1,
                        msg: "expected group<TAB>value<TAB>label".into(),
                    })
                }
            };
            let label: Label = label.parse().map_err(|_| CodecError::TableLine {
                line: i + 1,
                msg: format!("bad label `{label}`"),
            })?;
            rows.push((group.to_string(), value.to_string(), label));
        }
        Self::from_rows(rows)
    }
}

/// A person's attributes: at most one value per group, plus an identity when
/// the record came from a dataset (decoded predictions carry none).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributeRecord {
    pub identity: Option<u32>,
    assignments: BTreeMap<String, String>,
}

impl AttributeRecord {
    pub fn new(identity: Option<u32>) -> Self {
        Self {
            identity,
            assignments: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, group: &str, value: &str) {
        self.assignments.insert(group.to_string(), value.to_string());
    }

    pub fn with(mut self, group: &str, value: &str) -> Self {
        self.set(group, value);
        self
    }

    pub fn get(&self, group: &str) -> Option<&str> {
        self.assignments.get(group).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Drops groups the table does not know (used by the drop-attribute
    /// ablation, where manifests still carry the removed column).
    pub fn restricted_to(&self, table: &MappingTable) -> Self {
        let mut out = Self::new(self.identity);
        for name in table.group_names() {
            if let Some(v) = self.get(name) {
                out.set(name, v);
            }
        }
        out
    }

    /// Equality on assignments only (identity ignored).
    pub fn same_attributes(&self, other: &Self) -> bool {
        self.assignments == other.assignments
    }
}

impl fmt::Display for AttributeRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .assignments
            .iter()
            .map(|(g, v)| format!("{g}={v}"))
            .collect();
        write!(f, "{}", parts.join(", "))
    }
}

/// Ordered labels, each in 1..=K, at most one per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    labels: Vec<Label>,
}

impl LabelSequence {
    pub fn new(labels: Vec<Label>, table: &MappingTable) -> Result<Self, CodecError> {
        if labels.is_empty() {
            return Err(CodecError::EmptyRecord);
        }
        let mut seen_groups = Vec::new();
        for &l in &labels {
            let gidx = table
                .group_of(l)
                .ok_or(CodecError::LabelOutOfRange(l, table.k()))?;
            if seen_groups.contains(&gidx) {
                return Err(CodecError::DuplicateGroup(
                    table.group_names()[gidx].to_string(),
                ));
            }
            seen_groups.push(gidx);
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One label per assigned group, in the table's group order; unassigned
/// groups are omitted. Unknown groups or values are codec errors.
pub fn encode_record(
    record: &AttributeRecord,
    table: &MappingTable,
) -> Result<LabelSequence, CodecError> {
    for group in record.assignments.keys() {
        if !table.group_names().contains(&group.as_str()) {
            return Err(CodecError::UnknownGroup(group.clone()));
        }
    }
    let mut labels = Vec::new();
    for group in table.group_names() {
        if let Some(value) = record.get(group) {
            labels.push(table.label_for(group, value)?);
        }
    }
    if labels.is_empty() {
        return Err(CodecError::EmptyRecord);
    }
    Ok(LabelSequence { labels })
}

/// Total inverse of [`encode_record`] over raw model output: the first label
/// of each group wins, later duplicates and out-of-range labels are ignored.
pub fn decode_sequence(raw: &[Label], table: &MappingTable) -> AttributeRecord {
    let mut record = AttributeRecord::new(None);
    let mut seen = vec![false; table.group_count()];
    for &l in raw {
        if let Some(gidx) = table.group_of(l) {
            if !seen[gidx] {
                seen[gidx] = true;
                let (g, v) = table.pair_of(l).expect("label within range");
                record.set(g, v);
            }
        }
    }
    record
}

/// Blank-extension for CTC: blanks interleaved and flanking, length 2U+1.
pub fn extend_with_blanks(labels: &[Label]) -> Vec<Label> {
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(BLANK);
    for &l in labels {
        out.push(l);
        out.push(BLANK);
    }
    out
}

/// Teacher-forcing preparation: the target is `y` padded with 0 to
/// `max_len`; the input is the target shifted one right with the start
/// marker in front (last element dropped).
pub fn prepare_decoder_io(
    y: &LabelSequence,
    table: &MappingTable,
    max_len: usize,
) -> Result<(Vec<Label>, Vec<Label>), CodecError> {
    if y.len() >= max_len {
        return Err(CodecError::TooLong {
            got: y.len(),
            max_len,
        });
    }
    let mut target = y.labels().to_vec();
    target.resize(max_len, PAD);
    let mut input = Vec::with_capacity(max_len);
    input.push(table.start_symbol());
    input.extend_from_slice(&target[..max_len - 1]);
    Ok((input, target))
}
