//! Item catalogs, user sequences, synthetic data and sequence padding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{PortableRng, Stream};

pub type ItemId = u64;
pub type ModalityId = u32;

/// Modality tags handed out by the synthetic generator, in order.
pub const DEFAULT_MODALITY_TAGS: [ModalityId; 5] = [81, 82, 83, 85, 86];

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: ItemId,
    /// Present modality vectors only; a missing modality has no key.
    pub modality_embeddings: BTreeMap<ModalityId, Vec<f32>>,
    pub static_features: Vec<f32>,
    /// Interaction count over the training split. Not stored in item files.
    pub popularity_count: u64,
}

#[derive(Serialize, Deserialize)]
struct ItemLine {
    item_id: ItemId,
    #[serde(rename = "static", default)]
    static_features: Vec<f32>,
    #[serde(default)]
    mm: BTreeMap<ModalityId, Option<Vec<f32>>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemCatalog {
    pub items: Vec<ItemRecord>,
    /// Dimension of every modality seen in the catalog.
    pub modality_dims: BTreeMap<ModalityId, usize>,
    index: HashMap<ItemId, usize>,
}

impl ItemCatalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let mut catalog = ItemCatalog::default();
        for item in items {
            catalog.push(item)?;
        }
        Ok(catalog)
    }

    fn push(&mut self, item: ItemRecord) -> Result<()> {
        if self.index.contains_key(&item.item_id) {
            return Err(Error::DuplicateItem(item.item_id));
        }
        for (&m, v) in &item.modality_embeddings {
            match self.modality_dims.get(&m) {
                Some(&d) if d != v.len() => {
                    return Err(Error::Shape(format!(
                        "modality {m} has dimension {d} but item {} carries {}",
                        item.item_id,
                        v.len()
                    )))
                }
                Some(_) => {}
                None => {
                    self.modality_dims.insert(m, v.len());
                }
            }
        }
        self.index.insert(item.item_id, self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn total_items(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ItemId) -> Option<&ItemRecord> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn max_item_id(&self) -> Option<ItemId> {
        self.items.iter().map(|i| i.item_id).max()
    }

    /// The reserved padding id: one past the largest catalog id.
    pub fn pad_id(&self) -> ItemId {
        self.max_item_id().map_or(0, |m| m + 1)
    }

    pub fn static_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.static_features.len())
    }

    /// Overwrites popularity counts with interaction counts from `sequences`.
    pub fn apply_popularity(&mut self, sequences: &[UserSequence]) {
        let counts = interaction_counts(sequences);
        for item in &mut self.items {
            item.popularity_count = counts.get(&item.item_id).copied().unwrap_or(0);
        }
    }
}

pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut catalog = ItemCatalog::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let raw: ItemLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let record = ItemRecord {
            item_id: raw.item_id,
            modality_embeddings: raw
                .mm
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k, v)))
                .collect(),
            static_features: raw.static_features,
            popularity_count: 0,
        };
        catalog.push(record).map_err(|e| match e {
            Error::DuplicateItem(_) => e,
            other => parse_err(other.to_string()),
        })?;
    }
    Ok(catalog)
}

pub fn write_catalog(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in &catalog.items {
        let line = ItemLine {
            item_id: item.item_id,
            static_features: item.static_features.clone(),
            mm: item
                .modality_embeddings
                .iter()
                .map(|(&k, v)| (k, Some(v.clone())))
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u64,
    pub history: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ItemId>,
}

pub fn load_sequences(path: &Path) -> Result<Vec<UserSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: UserSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_sequences(path: &Path, sequences: &[UserSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sequences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Counts every history item and target occurrence.
pub fn interaction_counts(sequences: &[UserSequence]) -> HashMap<ItemId, u64> {
    let mut counts = HashMap::new();
    for s in sequences {
        for &i in s.history.iter().chain(s.target.iter()) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub modality: ModalityId,
    pub covered_items: usize,
    pub total_items: usize,
    /// Percent, in [0, 100].
    pub coverage_rate: f64,
}

impl fmt::Display for CoverageRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.modality,
            self.covered_items,
            self.total_items,
            format_percent(self.coverage_rate)
        )
    }
}

pub fn coverage_rate(covered: usize, total: usize) -> f64 {
    100.0 * covered as f64 / total as f64
}

/// Three decimals with a percent sign, e.g. `87.403%`.
pub fn format_percent(rate: f64) -> String {
    format!("{rate:.3}%")
}

pub fn coverage_report(catalog: &ItemCatalog) -> Result<Vec<CoverageRow>> {
    if catalog.is_empty() {
        return Err(Error::Empty("catalog"));
    }
    let total = catalog.total_items();
    Ok(catalog
        .modality_dims
        .keys()
        .map(|&m| {
            let covered = catalog
                .items
                .iter()
                .filter(|i| i.modality_embeddings.contains_key(&m))
                .count();
            CoverageRow {
                modality: m,
                covered_items: covered,
                total_items: total,
                coverage_rate: coverage_rate(covered, total),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n_items: usize,
    pub n_users: usize,
    pub n_modalities: usize,
    pub dim: usize,
    pub static_dim: usize,
    pub n_latent_clusters: usize,
    /// Inclusive bounds on history length plus the held-out target.
    pub seq_len_range: (usize, usize),
    pub missing_rate_per_modality: Vec<f64>,
    /// Probability that a walk step moves to a latent neighbour of the
    /// current item rather than jumping within a preferred cluster.
    pub neighbour_step_prob: f64,
    pub n_neighbours: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_items: 10_000,
            n_users: 5_000,
            n_modalities: 5,
            dim: 32,
            static_dim: 16,
            n_latent_clusters: 64,
            seq_len_range: (8, 24),
            missing_rate_per_modality: vec![0.12, 0.12, 0.12, 0.6, 0.62],
            neighbour_step_prob: 0.5,
            n_neighbours: 6,
            seed: 42,
        }
    }
}

/// Clustered catalog plus cluster-biased random-walk users.
///
/// Items scatter around `n_latent_clusters` centroids; each modality observes
/// the latent vector through its own near-identity linear map, and static
/// features are a random projection of it. A user prefers one or two
/// clusters and walks between latent nearest neighbours, occasionally
/// jumping to a random item of a preferred cluster.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<(ItemCatalog, Vec<UserSequence>)> {
    if p.n_items == 0 {
        return Err(Error::invalid("n_items must be positive"));
    }
    if p.n_latent_clusters == 0 || p.n_latent_clusters > p.n_items {
        return Err(Error::invalid("n_latent_clusters must be in [1, n_items]"));
    }
    if p.seq_len_range.0 < 2 || p.seq_len_range.1 < p.seq_len_range.0 {
        return Err(Error::invalid(
            "seq_len_range must satisfy 2 <= min <= max",
        ));
    }
    if p.dim == 0 {
        return Err(Error::invalid("dim must be positive"));
    }
    if p.missing_rate_per_modality.len() != p.n_modalities {
        return Err(Error::invalid(format!(
            "expected {} missing rates, got {}",
            p.n_modalities,
            p.missing_rate_per_modality.len()
        )));
    }
    if p.missing_rate_per_modality.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::invalid("missing rates must lie in [0, 1]"));
    }

    let dim = p.dim;
    let mut rng = PortableRng::new(p.seed, Stream::Catalog);
    let centroids: Vec<Vec<f64>> = (0..p.n_latent_clusters)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect();

    let mut order: Vec<usize> = (0..p.n_items).collect();
    rng.shuffle(&mut order);
    let mut cluster_of = vec![0usize; p.n_items];
    for (pos, &item) in order.iter().enumerate() {
        cluster_of[item] = pos % p.n_latent_clusters;
    }
    let latent: Vec<Vec<f64>> = (0..p.n_items)
        .map(|i| {
            centroids[cluster_of[i]]
                .iter()
                .map(|c| c + 0.35 * rng.normal())
                .collect()
        })
        .collect();

    let scale = 1.0 / (dim as f64).sqrt();
    let distortions: Vec<Vec<Vec<f64>>> = (0..p.n_modalities)
        .map(|_| {
            (0..dim)
                .map(|r| {
                    (0..dim)
                        .map(|c| (r == c) as u8 as f64 + 0.25 * scale * rng.normal())
                        .collect()
                })
                .collect()
        })
        .collect();
    let static_proj: Vec<Vec<f64>> = (0..p.static_dim)
        .map(|_| (0..dim).map(|_| scale * rng.normal()).collect())
        .collect();

    let tags = modality_tags(p.n_modalities);
    let mut drop_rng = PortableRng::new(p.seed, Stream::Dropout);
    let mut items = Vec::with_capacity(p.n_items);
    for (i, z) in latent.iter().enumerate() {
        let mut mm = BTreeMap::new();
        for (m, a) in distortions.iter().enumerate() {
            let dropped = drop_rng.bernoulli(p.missing_rate_per_modality[m]);
            let v: Vec<f32> = a
                .iter()
                .map(|row| (dot(row, z) + 0.05 * rng.normal()) as f32)
                .collect();
            if !dropped {
                mm.insert(tags[m], v);
            }
        }
        let static_features = static_proj
            .iter()
            .map(|row| (dot(row, z) + 0.1 * rng.normal()) as f32)
            .collect();
        items.push(ItemRecord {
            item_id: i as ItemId,
            modality_embeddings: mm,
            static_features,
            popularity_count: 0,
        });
    }
    let mut catalog = ItemCatalog::new(items)?;
    // Fully dropped modalities still have a known dimension.
    for &tag in &tags {
        catalog.modality_dims.entry(tag).or_insert(dim);
    }

    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); p.n_latent_clusters];
        for i in 0..p.n_items {
            m[cluster_of[i]].push(i);
        }
        m
    };
    let neighbours = latent_neighbours(&latent, &members, p.n_neighbours);

    let mut urng = PortableRng::new(p.seed, Stream::Users);
    let mut sequences = Vec::with_capacity(p.n_users);
    for u in 0..p.n_users {
        let n_pref = 1 + urng.below(2);
        let prefs: Vec<usize> = (0..n_pref)
            .map(|_| urng.below(p.n_latent_clusters))
            .collect();
        let len = p.seq_len_range.0 + urng.below(p.seq_len_range.1 - p.seq_len_range.0 + 1);
        let jump = |r: &mut PortableRng| {
            let c = &members[prefs[r.below(prefs.len())]];
            c[r.below(c.len())]
        };
        let mut cur = jump(&mut urng);
        let mut walk = Vec::with_capacity(len);
        walk.push(cur as ItemId);
        while walk.len() < len {
            let nb = &neighbours[cur];
            cur = if !nb.is_empty() && urng.bernoulli(p.neighbour_step_prob) {
                nb[urng.below(nb.len())]
            } else {
                jump(&mut urng)
            };
            walk.push(cur as ItemId);
        }
        let target = walk.pop();
        sequences.push(UserSequence {
            user_id: u as u64,
            history: walk,
            target,
        });
    }
    Ok((catalog, sequences))
}

fn modality_tags(n: usize) -> Vec<ModalityId> {
    (0..n)
        .map(|m| {
            DEFAULT_MODALITY_TAGS
                .get(m)
                .copied()
                .unwrap_or_else(|| 87 + (m - DEFAULT_MODALITY_TAGS.len()) as ModalityId)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k` nearest latent neighbours of every item within its own cluster.
fn latent_neighbours(latent: &[Vec<f64>], members: &[Vec<usize>], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); latent.len()];
    for group in members {
        for &i in group {
            let mut d: Vec<(f64, usize)> = group
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let dist = latent[i]
                        .iter()
                        .zip(&latent[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                    (dist, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out[i] = d.into_iter().take(k).map(|(_, j)| j).collect();
        }
    }
    out
}

/// One left-padded row: real tokens are right-aligned so the final slot
/// always holds the most recent item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedRow {
    pub token_ids: Vec<ItemId>,
    pub valid_mask: Vec<bool>,
    pub target: Option<ItemId>,
}

impl PaddedRow {
    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// The real tokens, oldest first.
    pub fn valid_tokens(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.token_ids
            .iter()
            .zip(&self.valid_mask)
            .filter(|(_, &v)| v)
            .map(|(&t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub l_max: usize,
    pub pad_id: ItemId,
    pub rows: Vec<PaddedRow>,
}

impl PaddedBatch {
    pub fn targets(&self) -> Vec<Option<ItemId>> {
        self.rows.iter().map(|r| r.target).collect()
    }
}

pub fn pad_truncate(seq: &UserSequence, l_max: usize, pad_id: ItemId) -> Result<PaddedRow> {
    if l_max == 0 {
        return Err(Error::invalid("L_max must be at least 1"));
    }
    if seq.history.contains(&pad_id) || seq.target == Some(pad_id) {
        return Err(Error::PadCollision(pad_id));
    }
    let keep = seq.history.len().min(l_max);
    let recent = &seq.history[seq.history.len() - keep..];
    let n_pad = l_max - keep;
    let mut token_ids = vec![pad_id; n_pad];
    token_ids.extend_from_slice(recent);
    let mut valid_mask = vec![false; n_pad];
    valid_mask.extend(std::iter::repeat_n(true, keep));
    Ok(PaddedRow {
        token_ids,
        valid_mask,
        target: seq.target,
    })
}

pub fn pad_batch(seqs: &[UserSequence], l_max: usize, pad_id: ItemId) -> Result<PaddedBatch> {
    let rows = seqs
        .iter()
        .map(|s| pad_truncate(s, l_max, pad_id))
        .collect::<Result<Vec<_>>>()?;
    Ok(PaddedBatch {
        l_max,
        pad_id,
        rows,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<UserSequence>,
    pub valid: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
}

/// User-disjoint 80/10/10 split, shuffled by the seed.
pub fn split_users(sequences: &[UserSequence], seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    PortableRng::new(seed, Stream::Split).shuffle(&mut order);
    let n = sequences.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let mut splits = Splits::default();
    for (pos, &i) in order.iter().enumerate() {
        let s = sequences[i].clone();
        if pos < n_train {
            splits.train.push(s);
        } else if pos < n_train + n_valid {
            splits.valid.push(s);
        } else {
            splits.test.push(s);
        }
    }
    for part in [&mut splits.train, &mut splits.valid, &mut splits.test] {
        part.sort_by_key(|s| s.user_id);
    }
    splits
}

/// Every prefix of a complete interaction sequence becomes its own
/// (history, next item) example; the full sequence is the last one.
pub fn expand_prefixes(sequences: &[UserSequence]) -> Vec<UserSequence> {
    let mut out = Vec::new();
    for s in sequences {
        let Some(target) = s.target else { continue };
        let full: Vec<ItemId> = s.history.iter().copied().chain([target]).collect();
        for end in 1..full.len() {
            out.push(UserSequence {
                user_id: s.user_id,
                history: full[..end].to_vec(),
                target: Some(full[end]),
            });
        }
    }
    out
}

/// Items that occur anywhere in the given (training) sequences.
pub fn observed_items(sequences: &[UserSequence]) -> BTreeSet<ItemId> {
    sequences
        .iter()
        .flat_map(|s| s.history.iter().chain(s.target.iter()).copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_well_formed_catalog() {
        let f = write_lines(&[
            r#"{"item_id": 1, "static": [0.5], "mm": {"81": [1.0, 0.0], "85": [0.0, 1.0, 2.0]}}"#,
            r#"{"item_id": 2, "static": [0.1], "mm": {"81": [0.0, 1.0]}}"#,
            r#"{"item_id": 3, "static": [0.2], "mm": {"81": [1.0, 1.0], "85": null}}"#,
        ]);
        let c = load_catalog(f.path()).unwrap();
        assert_eq!(c.total_items(), 3);
        assert!(!c.get(2).unwrap().modality_embeddings.contains_key(&85));
        assert!(!c.get(3).unwrap().modality_embeddings.contains_key(&85));
        assert_eq!(c.modality_dims[&85], 3);
        assert_eq!(c.pad_id(), 4);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let f = write_lines(&[
            r#"{"item_id": 7, "static": [], "mm": {}}"#,
            r#"{"item_id": 7, "static": [], "mm": {}}"#,
        ]);
        assert!(matches!(load_catalog(f.path()), Err(Error::DuplicateItem(7))));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_lines(&[r#"{"item_id": 1}"#, r#"{"item_id": "x"}"#]);
        match load_catalog(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_modality_dim_is_a_parse_error() {
        let f = write_lines(&[
            r#"{"item_id": 1, "mm": {"81": [1.0]}}"#,
            r#"{"item_id": 2, "mm": {"81": [1.0, 2.0]}}"#,
        ]);
        assert!(matches!(load_catalog(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn catalog_roundtrip() {
        let p = SyntheticParams {
            n_items: 40,
            n_users: 5,
            n_latent_clusters: 4,
            ..Default::default()
        };
        let (c, _) = generate_synthetic(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        write_catalog(&path, &c).unwrap();
        let back = load_catalog(&path).unwrap();
        assert_eq!(back.items, c.items);
        let path2 = dir.path().join("items2.jsonl");
        write_catalog(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn coverage_matches_reference_rates() {
        assert_eq!(format_percent(coverage_rate(16_693_655, 19_099_627)), "87.403%");
        assert_eq!(format_percent(coverage_rate(7_534_474, 19_099_627)), "39.448%");
        assert_eq!(format_percent(coverage_rate(5, 5)), "100.000%");
    }

    #[test]
    fn coverage_of_empty_catalog_errors() {
        assert!(coverage_report(&ItemCatalog::default()).is_err());
    }

    #[test]
    fn no_dropout_gives_full_coverage() {
        let p = SyntheticParams {
            n_items: 200,
            n_users: 10,
            n_latent_clusters: 5,
            missing_rate_per_modality: vec![0.0; 5],
            ..Default::default()
        };
        let (c, _) = generate_synthetic(&p).unwrap();
        for row in coverage_report(&c).unwrap() {
            assert_eq!(row.to_string().split('\t').next_back().unwrap(), "100.000%");
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let p = SyntheticParams {
            n_items: 300,
            n_users: 50,
            n_latent_clusters: 6,
            ..Default::default()
        };
        let a = generate_synthetic(&p).unwrap();
        let b = generate_synthetic(&p).unwrap();
        assert_eq!(a.0.items, b.0.items);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn synthetic_rejects_short_sequences() {
        let p = SyntheticParams {
            seq_len_range: (1, 5),
            ..Default::default()
        };
        assert!(generate_synthetic(&p).is_err());
    }

    #[test]
    fn dropout_count_within_binomial_interval() {
        // Binomial(n=10_000, p=0.4) kept items: mean 4000, sd = sqrt(n p (1-p)) ~= 48.99.
        // Two-sided 99% interval uses z = 2.5758, half-width ~= 126.2.
        let n = 10_000usize;
        let sd = (n as f64 * 0.4 * 0.6).sqrt();
        let half = 2.5758 * sd;
        let p = SyntheticParams {
            n_items: n,
            n_users: 1,
            n_latent_clusters: 10,
            missing_rate_per_modality: vec![0.0, 0.0, 0.0, 0.6, 0.0],
            ..Default::default()
        };
        let (c, _) = generate_synthetic(&p).unwrap();
        let rows = coverage_report(&c).unwrap();
        let m85 = rows.iter().find(|r| r.modality == 85).unwrap();
        let dev = (m85.covered_items as f64 - 4000.0).abs();
        assert!(dev <= half, "covered {} outside 4000 +/- {half:.1}", m85.covered_items);
    }

    #[test]
    fn pad_truncate_keeps_most_recent() {
        let seq = UserSequence {
            user_id: 0,
            history: (0..150).collect(),
            target: Some(150),
        };
        let row = pad_truncate(&seq, 101, 9999).unwrap();
        assert_eq!(row.token_ids, (49..150).collect::<Vec<_>>());
        assert!(row.valid_mask.iter().all(|&v| v));
    }

    #[test]
    fn pad_truncate_left_pads_short_history() {
        let seq = UserSequence {
            user_id: 0,
            history: vec![4, 5, 6],
            target: None,
        };
        let row = pad_truncate(&seq, 101, 9999).unwrap();
        assert_eq!(row.token_ids.iter().filter(|&&t| t == 9999).count(), 98);
        assert_eq!(row.n_valid(), 3);
        assert_eq!(&row.token_ids[98..], &[4, 5, 6]);
        assert!(!row.valid_mask[97] && row.valid_mask[98]);
    }

    #[test]
    fn pad_truncate_exact_length_is_unchanged() {
        let seq = UserSequence {
            user_id: 0,
            history: (0..101).collect(),
            target: None,
        };
        let row = pad_truncate(&seq, 101, 500).unwrap();
        assert_eq!(row.token_ids, seq.history);
        assert!(row.valid_mask.iter().all(|&v| v));
    }

    #[test]
    fn pad_collision_is_an_error() {
        let seq = UserSequence {
            user_id: 0,
            history: vec![1, 2],
            target: Some(3),
        };
        assert!(matches!(pad_truncate(&seq, 4, 2), Err(Error::PadCollision(2))));
        assert!(pad_truncate(&seq, 0, 9).is_err());
    }

    #[test]
    fn split_is_user_disjoint_and_complete() {
        let seqs: Vec<UserSequence> = (0..100)
            .map(|u| UserSequence {
                user_id: u,
                history: vec![1],
                target: Some(2),
            })
            .collect();
        let s = split_users(&seqs, 3);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<u64> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .map(|x| x.user_id)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn prefixes_cover_every_transition() {
        let s = UserSequence {
            user_id: 1,
            history: vec![10, 11, 12],
            target: Some(13),
        };
        let ex = expand_prefixes(&[s]);
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].history, vec![10]);
        assert_eq!(ex[0].target, Some(11));
        assert_eq!(ex[2].history, vec![10, 11, 12]);
        assert_eq!(ex[2].target, Some(13));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pad_truncate_preserves_order(hist in proptest::collection::vec(0u64..1000, 1..40), l_max in 1usize..30) {
                let seq = UserSequence { user_id: 0, history: hist.clone(), target: None };
                let row = pad_truncate(&seq, l_max, 5000).unwrap();
                prop_assert_eq!(row.token_ids.len(), l_max);
                let kept: Vec<u64> = row.valid_tokens().collect();
                let start = hist.len().saturating_sub(l_max);
                prop_assert_eq!(&kept[..], &hist[start..]);
                for (t, v) in row.token_ids.iter().zip(&row.valid_mask) {
                    prop_assert_eq!(*v, *t != 5000);
                }
            }
        }
    }
}
