//! Dataset ingestion and run configuration.
//!
//! The canonical on-disk format is tab-separated text. Interaction files
//! carry `user<TAB>item[<TAB>rating]` lines; ratings, when present, are
//! binarized to 1. Social files carry `user<TAB>user` lines; edges are
//! symmetrized, self-loops dropped and duplicates collapsed. Identifiers
//! are arbitrary strings remapped to dense indices in first-seen order
//! (interaction file first, then the social file).

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::sparse::{Dataset, SparseMatrix};
use crate::{Error, Result};

/// String-id to dense-index maps, in index order.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMaps {
    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == id)
    }
}

/// Summary statistics of a loaded dataset. Densities are reported in both
/// conventions: directed counts stored entries, undirected halves the social
/// count.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Undirected social edge count (stored entries / 2).
    pub connections: usize,
    pub density_interactions: f64,
    pub density_social_undirected: f64,
    pub density_social_directed: f64,
}

impl DatasetStats {
    pub fn of(d: &Dataset) -> Self {
        let (m, n) = (d.num_users(), d.num_items());
        let stored = d.social().nnz();
        DatasetStats {
            users: m,
            items: n,
            interactions: d.interactions().nnz(),
            connections: stored / 2,
            density_interactions: d.interactions().nnz() as f64 / (m as f64 * n as f64),
            density_social_undirected: (stored / 2) as f64 / (m as f64 * m as f64),
            density_social_directed: stored as f64 / (m as f64 * m as f64),
        }
    }
}

fn parse_lines(path: &Path, min_fields: usize) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = trimmed.split_whitespace().map(|s| s.to_string()).collect();
        if fields.len() < min_fields {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!(
                    "expected at least {min_fields} fields, got {}",
                    fields.len()
                ),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// Loads a dataset from an interactions file and a social file.
///
/// Users that only appear in the social file are kept (with zero
/// interactions) and flagged with a warning.
pub fn load_dataset(interactions: &Path, social: &Path) -> Result<(Dataset, IdMaps)> {
    let mut user_ids: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();

    let intern = |table: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str| {
        *index.entry(id.to_string()).or_insert_with(|| {
            table.push(id.to_string());
            table.len() - 1
        })
    };

    let mut r_pairs = Vec::new();
    for fields in parse_lines(interactions, 2)? {
        let u = intern(&mut user_ids, &mut user_index, &fields[0]);
        let v = intern(&mut item_ids, &mut item_index, &fields[1]);
        // A third field is a rating; any observed interaction binarizes to 1.
        r_pairs.push((u, v));
    }

    let mut social_only = 0usize;
    let mut s_pairs = Vec::new();
    for fields in parse_lines(social, 2)? {
        let mut resolve = |id: &str| -> usize {
            if !user_index.contains_key(id) {
                social_only += 1;
            }
            intern(&mut user_ids, &mut user_index, id)
        };
        let a = resolve(&fields[0]);
        let b = resolve(&fields[1]);
        if a == b {
            continue;
        }
        s_pairs.push((a, b));
        s_pairs.push((b, a));
    }
    if social_only > 0 {
        log::warn!("{social_only} users appear only in the social file (zero interactions)");
    }

    let m = user_ids.len();
    let n = item_ids.len();
    if m == 0 || n == 0 {
        return Err(Error::Structure(
            "dataset needs at least one user and one item".into(),
        ));
    }
    let r = SparseMatrix::from_pairs(m, n, &r_pairs)?;
    let s = SparseMatrix::from_pairs(m, m, &s_pairs)?;
    let dataset = Dataset::new(m, n, r, s)?;

    let stats = DatasetStats::of(&dataset);
    log::info!(
        "loaded {} users, {} items, {} interactions, {} connections \
         (densities: R {:.5}, S undirected {:.5} / directed {:.5})",
        stats.users,
        stats.items,
        stats.interactions,
        stats.connections,
        stats.density_interactions,
        stats.density_social_undirected,
        stats.density_social_directed,
    );

    Ok((
        dataset,
        IdMaps {
            users: user_ids,
            items: item_ids,
        },
    ))
}

/// Writes the canonical edge lists back out: interactions sorted by dense
/// index, social edges once per undirected pair. Loading the written files
/// reproduces the dataset and id maps exactly.
pub fn write_canonical(
    d: &Dataset,
    ids: &IdMaps,
    interactions: &Path,
    social: &Path,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(interactions)?);
    for (u, v, _) in d.interactions().iter() {
        writeln!(out, "{}\t{}", ids.users[u], ids.items[v])?;
    }
    out.flush()?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(social)?);
    for (a, b, _) in d.social().iter() {
        if a < b {
            writeln!(out, "{}\t{}", ids.users[a], ids.users[b])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Resolved configuration of a run, serialized to `config.json` in the run
/// directory so the run can be reproduced byte for byte by the same binary
/// and thread count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub interactions: PathBuf,
    pub social: PathBuf,
    pub out_dir: PathBuf,
    pub mode: String,
    pub arch: String,
    pub batch_size: usize,
    pub lr: f64,
    pub meta_lr: f64,
    pub l2: f64,
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub meta_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn basic_load_with_ratings_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write(
            dir.path(),
            "inter.tsv",
            "u1\tb7\t4\nu2\tb7\t1\nu1\tb3\nu1\tb7\t5\n",
        );
        let social = write(dir.path(), "social.tsv", "u1\tu2\nu2\tu1\nu1\tu1\n");
        let (d, ids) = load_dataset(&inter, &social).unwrap();
        assert_eq!(d.num_users(), 2);
        assert_eq!(d.num_items(), 2);
        // Duplicate u1-b7 collapses; ratings binarize.
        assert_eq!(d.interactions().nnz(), 3);
        assert!(d.interactions().iter().all(|(_, _, v)| v == 1.0));
        // Self-loop dropped, edge symmetrized once.
        assert_eq!(d.social().nnz(), 2);
        assert_eq!(ids.users, vec!["u1", "u2"]);
        assert_eq!(ids.items, vec!["b7", "b3"]);
    }

    #[test]
    fn social_only_user_is_added() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write(dir.path(), "inter.tsv", "u1\ti1\n");
        let social = write(dir.path(), "social.tsv", "u1\tu9\n");
        let (d, ids) = load_dataset(&inter, &social).unwrap();
        assert_eq!(d.num_users(), 2);
        assert_eq!(ids.users, vec!["u1", "u9"]);
        assert!(d.interactions().row_cols(1).is_empty());
        assert!(d.social().contains(0, 1) && d.social().contains(1, 0));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write(dir.path(), "inter.tsv", "u1\ti1\njunk\n");
        let social = write(dir.path(), "social.tsv", "");
        let err = load_dataset(&inter, &social).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write(
            dir.path(),
            "inter.tsv",
            "alice\tbook1\t5\nbob\tbook2\ncarol\tbook1\nalice\tbook2\n",
        );
        let social = write(
            dir.path(),
            "social.tsv",
            "alice\tbob\ncarol\tbob\ndan\tcarol\n",
        );
        let (d1, ids1) = load_dataset(&inter, &social).unwrap();

        let inter2 = dir.path().join("canon_inter.tsv");
        let social2 = dir.path().join("canon_social.tsv");
        write_canonical(&d1, &ids1, &inter2, &social2).unwrap();
        let (d2, ids2) = load_dataset(&inter2, &social2).unwrap();

        assert_eq!(ids1.users, ids2.users);
        assert_eq!(ids1.items, ids2.items);
        assert_eq!(d1.interactions(), d2.interactions());
        assert_eq!(d1.social(), d2.social());
    }

    #[test]
    fn stats_use_both_density_conventions() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write(dir.path(), "inter.tsv", "a\tx\nb\ty\n");
        let social = write(dir.path(), "social.tsv", "a\tb\n");
        let (d, _) = load_dataset(&inter, &social).unwrap();
        let stats = DatasetStats::of(&d);
        assert_eq!(stats.connections, 1);
        assert_eq!(stats.density_social_directed, 2.0 / 4.0);
        assert_eq!(stats.density_social_undirected, 1.0 / 4.0);
        assert_eq!(stats.density_interactions, 2.0 / 4.0);
    }

    #[test]
    fn config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            interactions: "a.tsv".into(),
            social: "s.tsv".into(),
            out_dir: "out".into(),
            mode: "full".into(),
            arch: "8-1000-1".into(),
            batch_size: 2048,
            lr: 0.001,
            meta_lr: 0.0001,
            l2: 1e-4,
            dim: 128,
            layers: 3,
            epochs: 300,
            meta_fraction: 0.05,
            patience: 20,
            seed: 42,
        };
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.batch_size, 2048);
        assert_eq!(loaded.mode, "full");
        assert_eq!(loaded.seed, 42);
    }
}
