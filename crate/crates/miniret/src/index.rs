//! Exact cosine-similarity index: unit-norm rows over sorted unique ids,
//! brute-force top-k with deterministic tie-breaking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExactIndex {
    ids: Vec<String>,
    dim: usize,
    /// Row-major, ids.len() x dim, every row unit norm.
    rows: Vec<f64>,
}

impl ExactIndex {
    /// Normalizes every embedding and sorts rows by id. Duplicate ids and
    /// zero vectors are rejected.
    pub fn build(pairs: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("index build: no embeddings".into()));
        }
        let dim = pairs[0].1.len();
        if dim == 0 {
            return Err(Error::invalid("index build: zero-dimensional embedding"));
        }
        let mut sorted = pairs;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut ids = Vec::with_capacity(sorted.len());
        let mut rows = Vec::with_capacity(sorted.len() * dim);
        for (id, v) in sorted {
            if v.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "index build",
                    left: vec![dim],
                    right: vec![v.len()],
                });
            }
            if ids.last() == Some(&id) {
                return Err(Error::Data(format!("duplicate doc id {id:?}")));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding(format!(
                    "doc {id:?} has norm {norm}"
                )));
            }
            rows.extend(v.iter().map(|x| x / norm));
            ids.push(id);
        }
        Ok(ExactIndex { ids, dim, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Exact top-k by cosine score, descending; ties broken by ascending
    /// doc id (rows are already in id order, so a stable sort suffices).
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "index search",
                left: vec![self.dim],
                right: vec![query.len()],
            });
        }
        if k < 1 || k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside [1, {}]",
                self.len()
            )));
        }
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qnorm == 0.0 || !qnorm.is_finite() {
            return Err(Error::DegenerateEmbedding(format!(
                "query has norm {qnorm}"
            )));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let row = &self.rows[i * self.dim..(i + 1) * self.dim];
                let dot: f64 = row.iter().zip(query).map(|(r, q)| r * q).sum();
                (i, dot / qnorm)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let index: ExactIndex = serde_json::from_str(&text)?;
        if index.rows.len() != index.ids.len() * index.dim {
            return Err(Error::Data("index file has inconsistent shapes".into()));
        }
        for i in 0..index.len() {
            let row = &index.rows[i * index.dim..(i + 1) * index.dim];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "index row {} has norm {norm}, expected 1",
                    index.ids[i]
                )));
            }
        }
        Ok(index)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Build an index from a matrix whose rows align with `ids`.
pub fn index_from_matrix(ids: &[String], matrix: &Tensor) -> Result<ExactIndex> {
    if ids.len() != matrix.rows() {
        return Err(Error::invalid("one id per embedding row required"));
    }
    ExactIndex::build(
        ids.iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), matrix.row(i).to_vec()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn build_normalizes_and_sorts() {
        let index = ExactIndex::build(vec![
            ("b".into(), vec![0.0, 3.0]),
            ("a".into(), vec![2.0, 0.0]),
            ("c".into(), vec![1.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.dim(), 2);
        assert_eq!(index.ids(), &["a", "b", "c"]);
        for i in 0..3 {
            let norm: f64 = index.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn duplicate_id_and_zero_vector_rejected() {
        let err = ExactIndex::build(vec![
            ("x".into(), vec![1.0, 0.0]),
            ("x".into(), vec![0.0, 1.0]),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("x"));
        assert!(ExactIndex::build(vec![("y".into(), vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn exact_match_ranks_first_with_score_one() {
        let index = ExactIndex::build(vec![
            ("a".into(), unit(vec![1.0, 2.0])),
            ("b".into(), unit(vec![-1.0, 1.0])),
        ])
        .unwrap();
        let hits = index.search(&unit(vec![1.0, 2.0]), 2).unwrap();
        assert_eq!(hits[0].0, "a");
        assert!((hits[0].1 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let v = unit(vec![0.4, 0.6]);
        let index = ExactIndex::build(vec![
            ("zz".into(), v.clone()),
            ("aa".into(), v.clone()),
            ("mm".into(), unit(vec![-1.0, 0.2])),
        ])
        .unwrap();
        let hits = index.search(&v, 3).unwrap();
        assert_eq!(hits[0].0, "aa");
        assert_eq!(hits[1].0, "zz");
    }

    #[test]
    fn k_out_of_range_rejected() {
        let index = ExactIndex::build(vec![("a".into(), vec![1.0])]).unwrap();
        assert!(index.search(&[1.0], 0).is_err());
        assert!(index.search(&[1.0], 2).is_err());
    }

    #[test]
    fn matches_full_sort_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 6;
        let pairs: Vec<(String, Vec<f64>)> = (0..50)
            .map(|i| {
                (
                    format!("doc{i:03}"),
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let index = ExactIndex::build(pairs.clone()).unwrap();
        for _ in 0..5 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hits = index.search(&q, 10).unwrap();
            // independent oracle: normalize everything, full sort
            let qn = unit(q);
            let mut all: Vec<(String, f64)> = pairs
                .iter()
                .map(|(id, v)| {
                    let vn = unit(v.clone());
                    (id.clone(), vn.iter().zip(&qn).map(|(a, b)| a * b).sum())
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (h, o) in hits.iter().zip(&all) {
                assert_eq!(h.0, o.0);
                assert!((h.1 - o.1).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_preserves_search_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<(String, Vec<f64>)> = (0..8)
            .map(|i| {
                (
                    format!("d{i}"),
                    (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let index = ExactIndex::build(pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        let back = ExactIndex::load(&path).unwrap();
        let q = vec![0.3, -0.2, 0.8, 0.1];
        let a = index.search(&q, 5).unwrap();
        let b = back.search(&q, 5).unwrap();
        for ((ia, sa), (ib, sb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(sa.to_bits(), sb.to_bits());
        }
    }
}
