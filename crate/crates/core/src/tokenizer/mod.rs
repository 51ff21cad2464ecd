//! Two-level semantic IDs from residual K-means over fused item embeddings.

pub mod kmeans;
mod reassign;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::{ItemCatalog, ItemId, ModalityId};
use crate::error::{Error, Result};
use crate::rng::{PortableRng, Stream};

pub use reassign::greedy_reassign;

/// Row-normalized item embeddings aligned with `item_ids`.
#[derive(Debug, Clone)]
pub struct FusedEmbeddingMatrix {
    pub vectors: Array2<f64>,
    pub item_ids: Vec<ItemId>,
}

impl FusedEmbeddingMatrix {
    /// Wraps an externally produced embedding matrix, normalizing its rows.
    pub fn from_external(item_ids: Vec<ItemId>, mut vectors: Array2<f64>) -> Result<Self> {
        if item_ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                item_ids.len(),
                vectors.nrows()
            )));
        }
        for mut row in vectors.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        Ok(Self { vectors, item_ids })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn fallback_vector(item_id: ItemId, dim: usize) -> Array1<f64> {
    let mut rng = PortableRng::with_index(0, Stream::FuseFallback, item_id);
    let mut v = Array1::from_shape_fn(dim, |_| rng.normal());
    let n = v.dot(&v).sqrt();
    v /= n;
    v
}

/// Normalized mean of each item's present modality vectors (each first
/// L2-normalized and zero-padded to the widest modality). Items with no
/// modality get a pseudo-random unit vector keyed on their id.
pub fn fuse_embeddings(catalog: &ItemCatalog) -> Result<FusedEmbeddingMatrix> {
    if catalog.is_empty() {
        return Err(Error::Empty("catalog"));
    }
    let dim = catalog.modality_dims.values().copied().max().unwrap_or(0);
    if dim == 0 || catalog.items.iter().all(|i| i.modality_embeddings.is_empty()) {
        return Err(Error::invalid("no item carries any modality embedding"));
    }
    let mut vectors = Array2::zeros((catalog.total_items(), dim));
    for (mut row, item) in vectors.outer_iter_mut().zip(&catalog.items) {
        let mut acc = Array1::<f64>::zeros(dim);
        let mut used = 0;
        for v in item.modality_embeddings.values() {
            let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x as f64 / n;
            }
            used += 1;
        }
        let n = acc.dot(&acc).sqrt();
        if used == 0 || n == 0.0 {
            row.assign(&fallback_vector(item.item_id, dim));
        } else {
            row.assign(&(acc / n));
        }
    }
    Ok(FusedEmbeddingMatrix {
        vectors,
        item_ids: catalog.items.iter().map(|i| i.item_id).collect(),
    })
}

/// Normalized embeddings of one modality, restricted to the items carrying it.
pub fn single_modality_embeddings(
    catalog: &ItemCatalog,
    modality: ModalityId,
) -> Result<FusedEmbeddingMatrix> {
    let rows: Vec<(ItemId, &Vec<f32>)> = catalog
        .items
        .iter()
        .filter_map(|i| i.modality_embeddings.get(&modality).map(|v| (i.item_id, v)))
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no item carries modality {modality}")));
    }
    let dim = rows[0].1.len();
    let vectors = Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i].1[j] as f64);
    FusedEmbeddingMatrix::from_external(rows.iter().map(|r| r.0).collect(), vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level1: Array2<f64>,
    pub level2: Array2<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.level1.nrows()
    }

    pub fn dim(&self) -> usize {
        self.level1.ncols()
    }

    pub fn reconstruct(&self, sid: SemanticId) -> Array1<f64> {
        &self.level1.row(sid.c1 as usize) + &self.level2.row(sid.c2 as usize)
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub loss1: f64,
    pub loss2: f64,
    pub history1: Vec<f64>,
    pub history2: Vec<f64>,
}

/// Level-1 K-means on the rows, then level-2 K-means on the residuals to the
/// level-1 centroids.
pub fn residual_kmeans_fit(
    emb: &FusedEmbeddingMatrix,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Codebook, FitReport)> {
    if emb.is_empty() {
        return Err(Error::Empty("embedding matrix"));
    }
    if k < 2 {
        return Err(Error::invalid("codebook size K must be at least 2"));
    }
    if iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    if k > emb.len() {
        log::warn!("K={k} exceeds the {} items being quantized", emb.len());
    }
    let mut rng = PortableRng::with_index(seed, Stream::KMeans, 1);
    let first = kmeans::fit(emb.vectors.view(), k, iters, &mut rng);
    let mut residuals = emb.vectors.clone();
    for (mut r, &c) in residuals.outer_iter_mut().zip(&first.assignments) {
        r -= &first.centroids.row(c);
    }
    let mut rng = PortableRng::with_index(seed, Stream::KMeans, 2);
    let second = kmeans::fit(residuals.view(), k, iters, &mut rng);
    let report = FitReport {
        loss1: first.final_mse(),
        loss2: second.final_mse(),
        history1: first.mse_history.clone(),
        history2: second.mse_history.clone(),
    };
    Ok((
        Codebook {
            level1: first.centroids,
            level2: second.centroids,
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub c1: u32,
    pub c2: u32,
}

impl SemanticId {
    pub fn new(c1: usize, c2: usize) -> Self {
        Self {
            c1: c1 as u32,
            c2: c2 as u32,
        }
    }
}

/// Forward (item → SID) and reverse (SID → items) maps kept in sync.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentTable {
    forward: BTreeMap<ItemId, SemanticId>,
    reverse: BTreeMap<SemanticId, Vec<ItemId>>,
}

impl AssignmentTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ItemId, SemanticId)>) -> Self {
        let mut t = Self::default();
        for (item, sid) in pairs {
            t.set(item, sid);
        }
        t
    }

    /// Moves `item` to `sid`, keeping reverse lists sorted.
    pub fn set(&mut self, item: ItemId, sid: SemanticId) {
        if let Some(old) = self.forward.insert(item, sid) {
            if let Some(list) = self.reverse.get_mut(&old) {
                list.retain(|&i| i != item);
                if list.is_empty() {
                    self.reverse.remove(&old);
                }
            }
        }
        let list = self.reverse.entry(sid).or_default();
        if let Err(pos) = list.binary_search(&item) {
            list.insert(pos, item);
        }
    }

    pub fn get(&self, item: ItemId) -> Option<SemanticId> {
        self.forward.get(&item).copied()
    }

    pub fn items_at(&self, sid: SemanticId) -> &[ItemId] {
        self.reverse.get(&sid).map_or(&[], |v| v.as_slice())
    }

    pub fn is_occupied(&self, sid: SemanticId) -> bool {
        self.reverse.contains_key(&sid)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, SemanticId)> + '_ {
        self.forward.iter().map(|(&i, &s)| (i, s))
    }

    pub fn groups(&self) -> impl Iterator<Item = (SemanticId, &[ItemId])> + '_ {
        self.reverse.iter().map(|(&s, v)| (s, v.as_slice()))
    }
}

/// Nearest level-1 centroid, then nearest level-2 centroid to the residual.
pub fn assign(emb: &FusedEmbeddingMatrix, cb: &Codebook) -> Result<AssignmentTable> {
    if emb.dim() != cb.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs codebook dim {}",
            emb.dim(),
            cb.dim()
        )));
    }
    let sids: Vec<SemanticId> = (0..emb.len())
        .into_par_iter()
        .map(|i| quantize(emb.vectors.row(i), cb))
        .collect();
    Ok(AssignmentTable::from_pairs(
        emb.item_ids.iter().copied().zip(sids),
    ))
}

pub fn quantize(x: ArrayView1<f64>, cb: &Codebook) -> SemanticId {
    let (c1, _) = kmeans::nearest(x, cb.level1.view());
    let residual = &x - &cb.level1.row(c1);
    let (c2, _) = kmeans::nearest(residual.view(), cb.level2.view());
    SemanticId::new(c1, c2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionReport {
    pub conflicts: usize,
    pub conflict_rate: f64,
    pub unique_pairs: usize,
}

pub fn collision_report(table: &AssignmentTable, n_items: usize) -> CollisionReport {
    let sole = table.groups().filter(|(_, g)| g.len() == 1).count();
    let conflicts = table.len() - sole;
    CollisionReport {
        conflicts,
        conflict_rate: if n_items == 0 {
            0.0
        } else {
            conflicts as f64 / n_items as f64
        },
        unique_pairs: table.groups().count(),
    }
}

pub type InvertedIndex = BTreeMap<SemanticId, Vec<ItemId>>;

pub fn inverted_index(table: &AssignmentTable) -> InvertedIndex {
    table.groups().map(|(s, g)| (s, g.to_vec())).collect()
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    levels: usize,
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CodebookHeader {
        k: cb.k(),
        d: cb.dim(),
        levels: 2,
    };
    serde_json::to_writer(&mut w, &header)?;
    let io = |e| Error::io(path, e);
    w.write_all(b"\n").map_err(io)?;
    binio::write_matrix(&mut w, &cb.level1.mapv(|v| v as f32)).map_err(io)?;
    binio::write_matrix(&mut w, &cb.level2.mapv(|v| v as f32)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CodebookHeader = serde_json::from_str(line.trim_end())?;
    let l1 = binio::read_matrix(&mut r).map_err(|e| Error::io(path, e))?;
    let l2 = binio::read_matrix(&mut r).map_err(|e| Error::io(path, e))?;
    if header.levels != 2 || l1.dim() != (header.k, header.d) || l2.dim() != (header.k, header.d) {
        return Err(Error::Shape(format!("codebook {} does not match its header", path.display())));
    }
    Ok(Codebook {
        level1: l1.mapv(|v| v as f64),
        level2: l2.mapv(|v| v as f64),
    })
}

pub fn save_assignments(path: &Path, table: &AssignmentTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item_id", "c1", "c2"])?;
    for (item, sid) in table.iter() {
        w.write_record([item.to_string(), sid.c1.to_string(), sid.c2.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_assignments(path: &Path) -> Result<AssignmentTable> {
    let mut r = csv::Reader::from_path(path)?;
    let mut pairs = Vec::new();
    for rec in r.deserialize() {
        let (item, c1, c2): (ItemId, u32, u32) = rec?;
        pairs.push((item, SemanticId { c1, c2 }));
    }
    Ok(AssignmentTable::from_pairs(pairs))
}

/// One row of the collision CSV: fit losses plus standard and re-assigned
/// collision statistics for one embedding source.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionRow {
    pub modality: String,
    pub loss1: f64,
    pub loss2: f64,
    pub conflicts: usize,
    pub conflict_rate: f64,
    pub unique_pairs: usize,
    pub reassigned_conflicts: usize,
    pub reassigned_conflict_rate: f64,
    pub reassigned_unique_pairs: usize,
}

pub fn save_collision_rows(path: &Path, rows: &[CollisionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full tokenizer pass on one embedding source.
#[derive(Debug, Clone)]
pub struct TokenizerRun {
    pub codebook: Codebook,
    pub fit: FitReport,
    pub standard: AssignmentTable,
    pub reassigned: AssignmentTable,
    pub row: CollisionRow,
}

pub fn run_tokenizer(
    label: &str,
    emb: &FusedEmbeddingMatrix,
    k: usize,
    iters: usize,
    top_n: usize,
    seed: u64,
) -> Result<TokenizerRun> {
    let (codebook, fit) = residual_kmeans_fit(emb, k, iters, seed)?;
    let standard = assign(emb, &codebook)?;
    let before = collision_report(&standard, emb.len());
    let reassigned = greedy_reassign(&standard, emb, &codebook, top_n)?;
    let after = collision_report(&reassigned, emb.len());
    let row = CollisionRow {
        modality: label.to_string(),
        loss1: fit.loss1,
        loss2: fit.loss2,
        conflicts: before.conflicts,
        conflict_rate: before.conflict_rate,
        unique_pairs: before.unique_pairs,
        reassigned_conflicts: after.conflicts,
        reassigned_conflict_rate: after.conflict_rate,
        reassigned_unique_pairs: after.unique_pairs,
    };
    Ok(TokenizerRun {
        codebook,
        fit,
        standard,
        reassigned,
        row,
    })
}

pub(crate) fn row_lookup(emb: &FusedEmbeddingMatrix) -> HashMap<ItemId, usize> {
    emb.item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
}

/// Row norms of an embedding matrix, used by invariant checks.
pub fn row_norms(emb: &FusedEmbeddingMatrix) -> Vec<f64> {
    emb.vectors
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .collect()
}
