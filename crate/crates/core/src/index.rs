//! Per-class barcode buckets with exhaustive Hamming kNN search.

use std::collections::{BTreeMap, BinaryHeap, HashSet};

use thiserror::Error;

use crate::barcode::{BarcodeShape, RadonBarcode};
use crate::codec::{DecodeError, Reader, Writer};
use crate::eval::{IrmaCode, CODE_LEN};
use crate::imaging::RadonConfig;

const INDEX_MAGIC: &[u8; 4] = b"RBCI";
const INDEX_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("record {id:?}: barcode shape {found} does not match index {expected}")]
    ConfigMismatch {
        id: String,
        expected: BarcodeShape,
        found: BarcodeShape,
    },
    #[error("query barcode shape {found} does not match index {expected}")]
    QueryMismatch {
        expected: BarcodeShape,
        found: BarcodeShape,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("record {0:?} has an empty class label")]
    EmptyClass(String),
    #[error("record {id:?}: {field} is longer than 65535 bytes")]
    FieldTooLong { id: String, field: &'static str },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("malformed index file: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedImage {
    pub id: String,
    pub class_label: String,
    pub irma_code: Option<IrmaCode>,
    pub barcode: RadonBarcode,
}

/// One ranked hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbor {
    pub id: String,
    pub class_label: String,
    pub irma_code: Option<IrmaCode>,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedResult {
    pub entries: Vec<Neighbor>,
    pub k_requested: usize,
}

impl RankedResult {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distances(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.distance).collect()
    }

    pub fn first(&self) -> Option<&Neighbor> {
        self.entries.first()
    }
}

/// Immutable once built; buckets are keyed (and ordered) by class label and
/// keep their insertion order, which decides ties.
#[derive(Debug, Clone, PartialEq)]
pub struct BarcodeIndex {
    config: RadonConfig,
    buckets: BTreeMap<String, Bucket>,
    total: usize,
}

/// Records of one class plus a contiguous copy of their barcode words, so a
/// scan streams through memory instead of following one pointer per record.
#[derive(Debug, Clone, PartialEq, Default)]
struct Bucket {
    records: Vec<IndexedImage>,
    words: Vec<u64>,
}

impl Bucket {
    fn push(&mut self, rec: IndexedImage) {
        self.words.extend_from_slice(rec.barcode.words());
        self.records.push(rec);
    }
}

fn shape_of(cfg: &RadonConfig) -> BarcodeShape {
    BarcodeShape::new(cfg.projections() as u16, cfg.side() as u16)
}

pub fn build_index(records: Vec<IndexedImage>, cfg: &RadonConfig) -> Result<BarcodeIndex, IndexError> {
    let shape = shape_of(cfg);
    let mut seen = HashSet::with_capacity(records.len());
    let mut buckets: BTreeMap<String, Bucket> = BTreeMap::new();
    let total = records.len();
    for rec in records {
        if rec.barcode.shape() != shape {
            return Err(IndexError::ConfigMismatch {
                id: rec.id,
                expected: shape,
                found: rec.barcode.shape(),
            });
        }
        if rec.class_label.is_empty() {
            return Err(IndexError::EmptyClass(rec.id));
        }
        for (field, len) in [("id", rec.id.len()), ("class label", rec.class_label.len())] {
            if len > u16::MAX as usize {
                return Err(IndexError::FieldTooLong { id: rec.id, field });
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(IndexError::DuplicateId(rec.id));
        }
        buckets.entry(rec.class_label.clone()).or_default().push(rec);
    }
    Ok(BarcodeIndex {
        config: cfg.clone(),
        buckets,
        total,
    })
}

impl BarcodeIndex {
    pub fn config(&self) -> &RadonConfig {
        &self.config
    }

    pub fn shape(&self) -> BarcodeShape {
        shape_of(&self.config)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn class_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.buckets.keys().map(String::as_str)
    }

    pub fn contains_class(&self, class_label: &str) -> bool {
        self.buckets.contains_key(class_label)
    }

    pub fn bucket(&self, class_label: &str) -> Option<&[IndexedImage]> {
        self.buckets.get(class_label).map(|b| b.records.as_slice())
    }

    /// Records in class order, then insertion order.
    pub fn records(&self) -> impl Iterator<Item = &IndexedImage> {
        self.buckets.values().flat_map(|b| &b.records)
    }

    fn check_query(&self, query: &RadonBarcode, k: usize) -> Result<(), IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.shape() != self.shape() {
            return Err(IndexError::QueryMismatch {
                expected: self.shape(),
                found: query.shape(),
            });
        }
        Ok(())
    }

    /// The `k` nearest records of one class. An unknown class yields an empty
    /// result rather than an error.
    pub fn knn_within_class(
        &self,
        class_label: &str,
        query: &RadonBarcode,
        k: usize,
    ) -> Result<RankedResult, IndexError> {
        self.check_query(query, k)?;
        Ok(scan(self.buckets.get(class_label).into_iter(), query, k))
    }

    /// The `k` nearest records across every class.
    pub fn knn_direct(&self, query: &RadonBarcode, k: usize) -> Result<RankedResult, IndexError> {
        self.check_query(query, k)?;
        Ok(scan(self.buckets.values(), query, k))
    }

    /// Serialized form, little-endian: `"RBCI"`, version `u8`, `n_p u16`,
    /// `N u16`, record count `u32`, then per record `u16`-prefixed id and class,
    /// an IRMA-code presence byte (followed by 13 ASCII bytes when set), and
    /// the `ceil(n_p·N/8)`-byte MSB-first barcode.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(INDEX_MAGIC);
        w.u8(INDEX_VERSION);
        w.u16(self.config.projections() as u16);
        w.u16(self.config.side() as u16);
        w.u32(self.total as u32);
        for rec in self.records() {
            w.string(&rec.id);
            w.string(&rec.class_label);
            match &rec.irma_code {
                Some(code) => {
                    w.u8(1);
                    w.bytes(code.as_bytes());
                }
                None => w.u8(0),
            }
            w.bytes(&rec.barcode.to_packed());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        r.version(INDEX_VERSION)?;
        let at = r.offset();
        let projections = r.u16("projection count")? as usize;
        let side = r.u16("side")? as usize;
        let cfg = RadonConfig::new(projections, side)
            .map_err(|e| r.invalid(at, "Radon layout", e.to_string()))?;
        let shape = shape_of(&cfg);
        let count = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let at = r.offset();
            let id = r.string("image id")?;
            let class_label = r.string("class label")?;
            let code_at = r.offset();
            let irma_code = match r.u8("IRMA code flag")? {
                0 => None,
                1 => {
                    let raw: [u8; CODE_LEN] = r.take(CODE_LEN, "IRMA code")?.try_into().unwrap();
                    Some(
                        IrmaCode::from_bytes(raw)
                            .map_err(|e| r.invalid(code_at + 1, "IRMA code", e.to_string()))?,
                    )
                }
                flag => return Err(r.invalid(code_at, "IRMA code flag", format!("{flag}")).into()),
            };
            let packed = r.take(shape.packed_len(), "barcode")?;
            let barcode = RadonBarcode::from_packed(shape, packed).expect("length checked by take");
            if class_label.is_empty() {
                return Err(r.invalid(at, "record", format!("{id:?} has an empty class label")).into());
            }
            records.push((at, IndexedImage {
                id,
                class_label,
                irma_code,
                barcode,
            }));
        }
        r.finish()?;
        let mut seen = HashSet::with_capacity(records.len());
        for (at, rec) in &records {
            if !seen.insert(rec.id.as_str()) {
                return Err(DecodeError::Invalid {
                    offset: *at,
                    what: "record",
                    reason: format!("duplicate id {:?}", rec.id),
                }
                .into());
            }
        }
        build_index(records.into_iter().map(|(_, rec)| rec).collect(), &cfg)
    }
}

/// Heap entry ordered by `(distance, scan position)`. The scan position is
/// unique, so the ranking is total and deterministic.
struct Hit<'a> {
    distance: u32,
    pos: usize,
    record: &'a IndexedImage,
}

impl Hit<'_> {
    fn key(&self) -> (u32, usize) {
        (self.distance, self.pos)
    }
}

impl PartialEq for Hit<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Hit<'_> {}

impl PartialOrd for Hit<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Bounded max-heap over the buckets in order; `pos` counts records across
/// buckets so ties resolve by scan order.
fn scan<'a>(buckets: impl Iterator<Item = &'a Bucket>, query: &RadonBarcode, k: usize) -> RankedResult {
    let q = query.words();
    let stride = q.len();
    let mut heap: BinaryHeap<Hit<'a>> = BinaryHeap::with_capacity(k + 1);
    let mut pos = 0;
    for bucket in buckets {
        for (record, words) in bucket.records.iter().zip(bucket.words.chunks_exact(stride)) {
            let distance: u32 = q.iter().zip(words).map(|(a, b)| (a ^ b).count_ones()).sum();
            if heap.len() < k {
                heap.push(Hit { distance, pos, record });
            } else if heap.peek().is_some_and(|top| (distance, pos) < top.key()) {
                heap.pop();
                heap.push(Hit { distance, pos, record });
            }
            pos += 1;
        }
    }
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|hit| Neighbor {
            id: hit.record.id.clone(),
            class_label: hit.record.class_label.clone(),
            irma_code: hit.record.irma_code,
            distance: hit.distance,
        })
        .collect();
    RankedResult {
        entries,
        k_requested: k,
    }
}
