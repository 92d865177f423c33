//! Datasets, environment partitions, and the canonical on-disk dataset format.

use std::io::{Read, Write};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Soft assignments strictly above this value harden to environment 1.
pub const HARDEN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Binary,
    Multiclass(usize),
}

impl Task {
    /// Number of model outputs the task expects.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Regression | Task::Binary => 1,
            Task::Multiclass(k) => k,
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, Task::Regression)
    }

    fn num_classes(self) -> Option<usize> {
        match self {
            Task::Regression => None,
            Task::Binary => Some(2),
            Task::Multiclass(k) => Some(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Real(Vec<f64>),
    Class(Vec<u32>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match self {
            Labels::Real(v) => Some(v),
            Labels::Class(_) => None,
        }
    }

    pub fn as_class(&self) -> Option<&[u32]> {
        match self {
            Labels::Class(v) => Some(v),
            Labels::Real(_) => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Optional per-sample ground truth carried alongside the features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta {
    pub env_id: Option<Vec<i32>>,
    /// True spurious variable (background or colour index).
    pub spurious_id: Option<Vec<i32>>,
    /// True causal variable (digit class).
    pub causal_id: Option<Vec<i32>>,
    pub is_shuffled: Option<Vec<bool>>,
}

impl Meta {
    fn select(&self, idx: &[usize]) -> Meta {
        fn pick<T: Copy>(v: &Option<Vec<T>>, idx: &[usize]) -> Option<Vec<T>> {
            v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect())
        }
        Meta {
            env_id: pick(&self.env_id, idx),
            spurious_id: pick(&self.spurious_id, idx),
            causal_id: pick(&self.causal_id, idx),
            is_shuffled: pick(&self.is_shuffled, idx),
        }
    }

    fn lengths(&self) -> impl Iterator<Item = (&'static str, usize)> + '_ {
        [
            ("env_id", self.env_id.as_ref().map(Vec::len)),
            ("spurious_id", self.spurious_id.as_ref().map(Vec::len)),
            ("causal_id", self.causal_id.as_ref().map(Vec::len)),
            ("is_shuffled", self.is_shuffled.as_ref().map(Vec::len)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Labels,
    task: Task,
    meta: Meta,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Labels, task: Task, meta: Meta) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        if d == 0 {
            return Err(Error::InvalidDataset("dataset has no feature columns".into()));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        match (&labels, task.num_classes()) {
            (Labels::Real(_), None) => {}
            (Labels::Class(c), Some(k)) => {
                if let Some(bad) = c.iter().find(|&&c| c as usize >= k) {
                    return Err(Error::InvalidDataset(format!(
                        "class index {bad} out of range for {k} classes"
                    )));
                }
            }
            _ => {
                return Err(Error::TaskMismatch(format!(
                    "labels do not match task {task:?}"
                )))
            }
        }
        for (name, len) in meta.lengths() {
            if len != n {
                return Err(Error::InvalidDataset(format!(
                    "metadata `{name}` has {len} entries for {n} rows"
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            task,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut Meta {
        &mut self.meta
    }

    pub fn class_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_class()
            .ok_or_else(|| Error::TaskMismatch("expected class labels".into()))
    }

    pub fn is_shuffled(&self) -> Result<&[bool]> {
        self.meta
            .is_shuffled
            .as_deref()
            .ok_or(Error::MissingMetadata("is_shuffled"))
    }

    pub fn spurious_id(&self) -> Result<&[i32]> {
        self.meta
            .spurious_id
            .as_deref()
            .ok_or(Error::MissingMetadata("spurious_id"))
    }

    pub fn causal_id(&self) -> Result<&[i32]> {
        self.meta
            .causal_id
            .as_deref()
            .ok_or(Error::MissingMetadata("causal_id"))
    }

    /// Rows at `idx`, in the given order. `idx` must be non-empty.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::EmptySubset);
        }
        Ok(Dataset {
            features: self.features.select(Axis(0), idx),
            labels: self.labels.select(idx),
            task: self.task,
            meta: self.meta.select(idx),
        })
    }

    /// Rows where `mask` is true, order preserved.
    pub fn subset(&self, mask: &[bool]) -> Result<Dataset> {
        if mask.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "mask",
                expected: self.len(),
                got: mask.len(),
            });
        }
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        self.select(&idx)
    }

    /// Stacks datasets row-wise. Tasks and metadata presence must agree.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidDataset("nothing to concatenate".into()))?;
        for p in parts {
            if p.task != first.task {
                return Err(Error::TaskMismatch("concatenating different tasks".into()));
            }
            if p.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    what: "feature columns",
                    expected: first.dim(),
                    got: p.dim(),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidDataset(e.to_string()))?;
        let labels = match &first.labels {
            Labels::Real(_) => Labels::Real(
                parts
                    .iter()
                    .flat_map(|p| p.labels.as_real().unwrap_or(&[]).iter().copied())
                    .collect(),
            ),
            Labels::Class(_) => Labels::Class(
                parts
                    .iter()
                    .flat_map(|p| p.labels.as_class().unwrap_or(&[]).iter().copied())
                    .collect(),
            ),
        };
        fn cat<T: Copy>(parts: &[&Dataset], f: impl Fn(&Meta) -> &Option<Vec<T>>) -> Option<Vec<T>> {
            let mut out = Vec::new();
            for p in parts {
                out.extend_from_slice(f(&p.meta).as_ref()?);
            }
            Some(out)
        }
        let meta = Meta {
            env_id: cat(parts, |m| &m.env_id),
            spurious_id: cat(parts, |m| &m.spurious_id),
            causal_id: cat(parts, |m| &m.causal_id),
            is_shuffled: cat(parts, |m| &m.is_shuffled),
        };
        Dataset::new(features, labels, first.task, meta)
    }

    /// Copy with `env_id` set to `env` for every row.
    pub fn with_env_id(mut self, env: i32) -> Dataset {
        self.meta.env_id = Some(vec![env; self.len()]);
        self
    }
}

/// Binary environment assignment: soft probabilities of environment 1 and
/// their hardened labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPartition {
    soft_q: Vec<f64>,
    hard: Vec<u8>,
}

impl EnvPartition {
    pub fn from_soft(soft_q: Vec<f64>) -> Result<Self> {
        if let Some(q) = soft_q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::InvalidSpec(format!("soft assignment {q} outside [0, 1]")));
        }
        let hard = soft_q
            .iter()
            .map(|&q| u8::from(q > HARDEN_THRESHOLD))
            .collect();
        Ok(EnvPartition { soft_q, hard })
    }

    pub fn from_hard(hard: Vec<u8>) -> Result<Self> {
        if hard.iter().any(|&h| h > 1) {
            return Err(Error::InvalidSpec("hard labels must be 0 or 1".into()));
        }
        let soft_q = hard.iter().map(|&h| f64::from(h)).collect();
        Ok(EnvPartition { soft_q, hard })
    }

    pub fn soft_q(&self) -> &[f64] {
        &self.soft_q
    }

    pub fn hard(&self) -> &[u8] {
        &self.hard
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    /// (size of environment 0, size of environment 1)
    pub fn sizes(&self) -> (usize, usize) {
        let ones = self.hard.iter().filter(|&&h| h == 1).count();
        (self.hard.len() - ones, ones)
    }

    /// True when one of the two environments is empty.
    pub fn is_degenerate(&self) -> bool {
        let (a, b) = self.sizes();
        a == 0 || b == 0
    }

    pub fn mask(&self, env: u8) -> Vec<bool> {
        self.hard.iter().map(|&h| h == env).collect()
    }

    /// Same split with environment labels exchanged.
    pub fn swapped(&self) -> EnvPartition {
        EnvPartition {
            soft_q: self.soft_q.iter().map(|q| 1.0 - q).collect(),
            hard: self.hard.iter().map(|h| 1 - h).collect(),
        }
    }
}

/// Environment 0 and environment 1 of a split; either side may be empty.
#[derive(Debug, Clone)]
pub struct PartitionSplit {
    pub env0: Option<Dataset>,
    pub env1: Option<Dataset>,
}

impl PartitionSplit {
    pub fn sizes(&self) -> (usize, usize) {
        (
            self.env0.as_ref().map_or(0, Dataset::len),
            self.env1.as_ref().map_or(0, Dataset::len),
        )
    }
}

pub fn split_by_partition(data: &Dataset, p: &EnvPartition) -> Result<PartitionSplit> {
    if p.len() != data.len() {
        return Err(Error::DimensionMismatch {
            what: "partition",
            expected: data.len(),
            got: p.len(),
        });
    }
    let side = |env: u8| match data.subset(&p.mask(env)) {
        Ok(d) => Ok(Some(d)),
        Err(Error::EmptySubset) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(PartitionSplit {
        env0: side(0)?,
        env1: side(1)?,
    })
}

/// Inverse of [`split_by_partition`]: interleaves rows back by original index.
pub fn merge_by_partition(split: &PartitionSplit, p: &EnvPartition) -> Result<Dataset> {
    let (n0, n1) = p.sizes();
    if split.sizes() != (n0, n1) {
        return Err(Error::InvalidSpec("split sizes do not match partition".into()));
    }
    let parts: Vec<&Dataset> = [&split.env0, &split.env1].into_iter().flatten().collect();
    let stacked = Dataset::concat(&parts)?;
    let (mut next0, mut next1) = (0usize, n0);
    let order: Vec<usize> = p
        .hard()
        .iter()
        .map(|&h| {
            let slot = if h == 0 { &mut next0 } else { &mut next1 };
            *slot += 1;
            *slot - 1
        })
        .collect();
    stacked.select(&order)
}

// ---------------------------------------------------------------------------
// Canonical serialization
// ---------------------------------------------------------------------------

const FORMAT_NAME: &str = "reiil-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    rows: usize,
    cols: usize,
    task: Task,
    meta: MetaFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFlags {
    env_id: bool,
    spurious_id: bool,
    causal_id: bool,
    is_shuffled: bool,
}

/// Writes `data` as: u32 LE header length, JSON header, f32 LE feature rows,
/// then one 32-bit column each for labels and every present metadata field.
pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        rows: data.len(),
        cols: data.dim(),
        task: data.task,
        meta: MetaFlags {
            env_id: data.meta.env_id.is_some(),
            spurious_id: data.meta.spurious_id.is_some(),
            causal_id: data.meta.causal_id.is_some(),
            is_shuffled: data.meta.is_shuffled.is_some(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(4 + json.len() + 4 * data.len() * (data.dim() + 5));
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for &x in data.features.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    match &data.labels {
        Labels::Real(v) => v
            .iter()
            .for_each(|&y| buf.extend_from_slice(&(y as f32).to_le_bytes())),
        Labels::Class(v) => v.iter().for_each(|&y| buf.extend_from_slice(&y.to_le_bytes())),
    }
    for col in [&data.meta.env_id, &data.meta.spurious_id, &data.meta.causal_id]
        .into_iter()
        .flatten()
    {
        col.iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    if let Some(s) = &data.meta.is_shuffled {
        s.iter()
            .for_each(|&b| buf.extend_from_slice(&u32::from(b).to_le_bytes()));
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format {} v{}",
            header.format, header.version
        )));
    }
    let (n, d) = (header.rows, header.cols);
    let feat: Vec<f64> = (0..n * d)
        .map(|_| cur.f32().map(f64::from))
        .collect::<Result<_>>()?;
    let features = Array2::from_shape_vec((n, d), feat)
        .map_err(|e| Error::Format(e.to_string()))?;
    let labels = if header.task.is_classification() {
        Labels::Class((0..n).map(|_| cur.u32()).collect::<Result<_>>()?)
    } else {
        Labels::Real((0..n).map(|_| cur.f32().map(f64::from)).collect::<Result<_>>()?)
    };
    let mut i32_col = |present: bool| -> Result<Option<Vec<i32>>> {
        if !present {
            return Ok(None);
        }
        (0..n).map(|_| cur.u32().map(|v| v as i32)).collect::<Result<_>>().map(Some)
    };
    let env_id = i32_col(header.meta.env_id)?;
    let spurious_id = i32_col(header.meta.spurious_id)?;
    let causal_id = i32_col(header.meta.causal_id)?;
    let is_shuffled = i32_col(header.meta.is_shuffled)?
        .map(|v| v.into_iter().map(|b| b != 0).collect());
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after dataset payload",
            bytes.len() - cur.pos
        )));
    }
    Dataset::new(
        features,
        labels,
        header.task,
        Meta {
            env_id,
            spurious_id,
            causal_id,
            is_shuffled,
        },
    )
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(k)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("dataset file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        self.u32().map(f32::from_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(n: usize) -> Dataset {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        Dataset::new(
            features,
            Labels::Class((0..n as u32).map(|i| i % 2).collect()),
            Task::Binary,
            Meta {
                env_id: Some((0..n as i32).collect()),
                is_shuffled: Some((0..n).map(|i| i % 3 == 0).collect()),
                ..Meta::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn all_true_mask_is_identity() {
        let d = toy(5);
        assert_eq!(d.subset(&[true; 5]).unwrap(), d);
    }

    #[test]
    fn subset_keeps_order() {
        let d = toy(3);
        let s = d.subset(&[true, false, true]).unwrap();
        assert_eq!(s.features(), &array![[0.0, 1.0], [4.0, 5.0]]);
        assert_eq!(s.meta().env_id.as_deref(), Some(&[0, 2][..]));
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(toy(3).subset(&[false; 3]), Err(Error::EmptySubset)));
    }

    #[test]
    fn nested_subset_matches_conjunction() {
        let d = toy(10);
        let m1: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
        let inner = d.subset(&m1).unwrap();
        let m2: Vec<bool> = (0..inner.len()).map(|i| i % 2 == 0).collect();
        let nested = inner.subset(&m2).unwrap();
        // re-index m2 onto the original rows
        let mut k = 0;
        let conj: Vec<bool> = m1
            .iter()
            .map(|&a| {
                if a {
                    k += 1;
                    m2[k - 1]
                } else {
                    false
                }
            })
            .collect();
        assert_eq!(nested, d.subset(&conj).unwrap());
    }

    #[test]
    fn all_zero_partition_leaves_env1_empty() {
        let d = toy(4);
        let p = EnvPartition::from_hard(vec![0; 4]).unwrap();
        let s = split_by_partition(&d, &p).unwrap();
        assert_eq!(s.sizes(), (4, 0));
        assert!(s.env1.is_none());
        assert!(p.is_degenerate());
    }

    #[test]
    fn alternating_partition_halves() {
        let d = toy(4);
        let p = EnvPartition::from_hard(vec![0, 1, 0, 1]).unwrap();
        assert_eq!(split_by_partition(&d, &p).unwrap().sizes(), (2, 2));
    }

    #[test]
    fn tie_hardens_to_env0() {
        let p = EnvPartition::from_soft(vec![0.5, 0.5000001, 0.2]).unwrap();
        assert_eq!(p.hard(), &[0, 1, 0]);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let r = Dataset::new(
            Array2::zeros((2, 1)),
            Labels::Real(vec![0.0, 1.0]),
            Task::Binary,
            Meta::default(),
        );
        assert!(matches!(r, Err(Error::TaskMismatch(_))));
        let r = Dataset::new(
            Array2::zeros((2, 1)),
            Labels::Class(vec![0, 3]),
            Task::Multiclass(3),
            Meta::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn serialization_round_trips_f32_data() {
        let d = toy(7);
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        assert_eq!(decode_dataset(&buf).unwrap(), d);
        assert!(decode_dataset(&buf[..buf.len() - 1]).is_err());
    }
}
