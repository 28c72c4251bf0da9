//! Single-query retrieval evaluation: pairwise Euclidean distances,
//! protocol-filtered ranking, CMC Recall@k, and mAP.
//!
//! Protocol: gallery entries flagged junk are dropped; entries sharing both
//! the query's identity and camera are excluded (the cross-camera rule);
//! negative gallery identities are distractors and count as valid
//! negatives. Ties in distance break by ascending gallery index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

/// Identity, camera, and junk flag of one embedded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub id: i64,
    pub camera: i64,
    pub junk: bool,
}

/// A set of embedded images with their retrieval metadata.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// Row-major `[count, dim]`.
    pub vectors: Vec<f32>,
    pub meta: Vec<ItemMeta>,
    pub role: Role,
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f32>, meta: Vec<ItemMeta>, role: Role) -> Result<Self> {
        if vectors.len() != dim * meta.len() {
            return Err(CoreError::shape(format!(
                "embedding set: {} values for {} items of dim {dim}",
                vectors.len(),
                meta.len()
            )));
        }
        Ok(EmbeddingSet {
            dim,
            vectors,
            meta,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Dense `[queries, gallery]` distance matrix at f64.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.data[q * self.cols..(q + 1) * self.cols]
    }
}

/// Plain Euclidean distance between every query and gallery vector.
pub fn pairwise_euclidean(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<DistanceMatrix> {
    if queries.dim != gallery.dim {
        return Err(CoreError::shape(format!(
            "pairwise_euclidean: query dim {} vs gallery dim {}",
            queries.dim, gallery.dim
        )));
    }
    let (nq, ng, d) = (queries.len(), gallery.len(), queries.dim);
    let mut data = vec![0.0f64; nq * ng];
    for q in 0..nq {
        let qv = queries.vector(q);
        for g in 0..ng {
            let gv = gallery.vector(g);
            let mut sq = 0.0f64;
            for j in 0..d {
                let diff = qv[j] as f64 - gv[j] as f64;
                sq += diff * diff;
            }
            data[q * ng + g] = sq.sqrt();
        }
    }
    Ok(DistanceMatrix {
        rows: nq,
        cols: ng,
        data,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// CMC curve length; clamped to the valid gallery size per query.
    pub k_max: usize,
    /// Apply the same-identity same-camera exclusion rule.
    pub exclude_same_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k_max: 50,
            exclude_same_camera: true,
        }
    }
}

/// Rank the gallery for one query: drop junk entries, apply the cross-camera
/// exclusion, sort ascending by distance with index tie-breaking. Returns
/// gallery indices.
pub fn rank_gallery(
    dist_row: &[f64],
    query: &ItemMeta,
    gallery: &[ItemMeta],
    opts: &EvalOptions,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&gi| {
            let m = &gallery[gi];
            if m.junk {
                return false;
            }
            if opts.exclude_same_camera && m.id == query.id && m.camera == query.camera {
                return false;
            }
            true
        })
        .collect();
    order.sort_by(|&a, &b| {
        dist_row[a]
            .partial_cmp(&dist_row[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// CMC curve and mAP over a query set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    /// Recall@k for k = 1..=k_max.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision per query; `None` for queries with no valid
    /// positive, which are excluded from both aggregates.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_query_ap: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }
}

/// Evaluate from a precomputed distance matrix. Exposed separately so the
/// ranking invariances can be tested on transformed distances.
pub fn evaluate_distances(
    dist: &DistanceMatrix,
    queries: &[ItemMeta],
    gallery: &[ItemMeta],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if dist.rows != queries.len() || dist.cols != gallery.len() {
        return Err(CoreError::shape(format!(
            "evaluate_distances: matrix {}x{} for {} queries and {} gallery items",
            dist.rows,
            dist.cols,
            queries.len(),
            gallery.len()
        )));
    }
    let mut first_match_ranks = Vec::new();
    let mut per_query_ap = Vec::with_capacity(queries.len());
    let mut ap_sum = 0.0f64;
    let mut ap_count = 0usize;
    for (qi, qmeta) in queries.iter().enumerate() {
        let order = rank_gallery(dist.row(qi), qmeta, gallery, opts);
        let mut positives_seen = 0usize;
        let mut precision_sum = 0.0f64;
        let mut first_rank = None;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery[gi].id == qmeta.id {
                positives_seen += 1;
                let rank = rank0 + 1;
                precision_sum += positives_seen as f64 / rank as f64;
                if first_rank.is_none() {
                    first_rank = Some(rank);
                }
            }
        }
        if positives_seen == 0 {
            per_query_ap.push(None);
            continue;
        }
        let ap = precision_sum / positives_seen as f64;
        per_query_ap.push(Some(ap));
        ap_sum += ap;
        ap_count += 1;
        first_match_ranks.push(first_rank.unwrap());
    }
    if ap_count == 0 {
        return Err(CoreError::Evaluation(
            "no query has a valid positive in the gallery".into(),
        ));
    }
    let k_max = opts.k_max.max(1);
    let mut cmc = vec![0.0f64; k_max];
    for &rank in &first_match_ranks {
        if rank <= k_max {
            cmc[rank - 1] += 1.0;
        }
    }
    let total = first_match_ranks.len() as f64;
    let mut cumulative = 0.0;
    for entry in cmc.iter_mut() {
        cumulative += *entry;
        *entry = cumulative / total;
    }
    Ok(EvalResult {
        cmc,
        map: ap_sum / ap_count as f64,
        per_query_ap,
    })
}

/// Full single-query evaluation of a query set against a gallery set.
pub fn cmc_and_map(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let dist = pairwise_euclidean(queries, gallery)?;
    evaluate_distances(&dist, &queries.meta, &gallery.meta, opts)
}

// ---------------------------------------------------------------------------
// files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    count: usize,
    dim: usize,
    role: Role,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".csv");
    PathBuf::from(os)
}

/// Write an embedding set: a one-line JSON header and a little-endian f32
/// payload in `path`, plus a `<path>.csv` sidecar with one
/// `index,identity,camera,junk_flag` row per item.
pub fn write_embedding_set(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let header = EmbeddingHeader {
        count: set.len(),
        dim: set.dim,
        role: set.role,
    };
    let mut writer = BufWriter::new(File::create(path)?);
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    writer.write_all(line.as_bytes())?;
    let mut payload = Vec::with_capacity(set.vectors.len() * 4);
    for &v in &set.vectors {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&payload)?;
    drop(writer);

    let mut csv = BufWriter::new(File::create(sidecar_path(path))?);
    writeln!(csv, "index,identity,camera,junk_flag")?;
    for (i, m) in set.meta.iter().enumerate() {
        writeln!(csv, "{},{},{},{}", i, m.id, m.camera, u8::from(m.junk))?;
    }
    Ok(())
}

pub fn read_embedding_set(path: &Path) -> Result<EmbeddingSet> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte).map_err(|_| CoreError::FileFormat {
            path: path.display().to_string(),
            message: "missing newline-terminated JSON header".into(),
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: EmbeddingHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = vec![0u8; header.count * header.dim * 4];
    reader.read_exact(&mut payload).map_err(|e| CoreError::FileFormat {
        path: path.display().to_string(),
        message: format!("truncated payload: {e}"),
    })?;
    let vectors: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let csv_path = sidecar_path(path);
    let text = std::fs::read_to_string(&csv_path)?;
    let mut meta = Vec::with_capacity(header.count);
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            continue; // header row
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CoreError::FileFormat {
                path: csv_path.display().to_string(),
                message: format!("line {} has {} fields, expected 4", lineno + 1, fields.len()),
            });
        }
        let parse_err = |what: &str| CoreError::FileFormat {
            path: csv_path.display().to_string(),
            message: format!("line {}: bad {what}", lineno + 1),
        };
        meta.push(ItemMeta {
            id: fields[1].trim().parse().map_err(|_| parse_err("identity"))?,
            camera: fields[2].trim().parse().map_err(|_| parse_err("camera"))?,
            junk: fields[3].trim().parse::<u8>().map_err(|_| parse_err("junk_flag"))? != 0,
        });
    }
    if meta.len() != header.count {
        return Err(CoreError::FileFormat {
            path: csv_path.display().to_string(),
            message: format!("{} sidecar rows for {} embeddings", meta.len(), header.count),
        });
    }
    EmbeddingSet::new(header.dim, vectors, meta, header.role)
}

/// Write the evaluation report as JSON `{cmc: [...], map: x}`.
pub fn write_eval_report(path: &Path, result: &EvalResult) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        cmc: &'a [f64],
        map: f64,
    }
    let report = Report {
        cmc: &result.cmc,
        map: result.map,
    };
    std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
