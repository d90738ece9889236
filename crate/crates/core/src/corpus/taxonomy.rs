//! Hierarchical classification-code taxonomy.
//!
//! Nodes live on levels `1..=L`. Level-`L` nodes are the lowest-level codes
//! (the prediction targets, "leaves"); every node below level 1 has exactly
//! one parent on the level directly above it. Within each level nodes are
//! indexed contiguously in sorted-id order, so leaf `j` is the `j`-th
//! level-`L` id in lexicographic order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonomyRecord {
    pub id: String,
    pub parent: Option<String>,
    pub level: usize,
}

#[derive(Clone, Debug)]
pub struct Taxonomy {
    depth: usize,
    /// `levels[l - 1]` holds the ids of level-`l` nodes in sorted order.
    levels: Vec<Vec<String>>,
    /// `parents[l - 1][i]` is the index (on level `l - 1`) of the parent of
    /// node `i` on level `l`; unused for level 1.
    parents: Vec<Vec<usize>>,
    /// `ancestors[j][l - 1]` is the level-`l` ancestor of leaf `j`, for
    /// `l < L`.
    ancestors: Vec<Vec<usize>>,
    index: HashMap<String, (usize, usize)>,
}

fn structural(node: &str, reason: impl Into<String>) -> Error {
    Error::Taxonomy {
        node: node.to_string(),
        reason: reason.into(),
    }
}

impl Taxonomy {
    /// Validates and indexes a node list.
    pub fn from_records(records: &[TaxonomyRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(structural("<none>", "taxonomy has no nodes"));
        }
        let mut by_id: HashMap<&str, &TaxonomyRecord> = HashMap::with_capacity(records.len());
        for r in records {
            if r.id.is_empty() {
                return Err(structural("<empty>", "empty node id"));
            }
            if r.level == 0 {
                return Err(structural(&r.id, "levels start at 1"));
            }
            if by_id.insert(r.id.as_str(), r).is_some() {
                return Err(structural(&r.id, "duplicate node id"));
            }
        }
        for r in records {
            match (&r.parent, r.level) {
                (Some(p), _) if p == &r.id => return Err(structural(&r.id, "cycle: node is its own parent")),
                (Some(_), 1) => return Err(structural(&r.id, "level-1 node must not have a parent")),
                (None, 1) => {}
                (None, _) => return Err(structural(&r.id, "orphan: non-root node without a parent")),
                (Some(p), _) => {
                    if !by_id.contains_key(p.as_str()) {
                        return Err(structural(&r.id, format!("orphan: parent `{p}` does not exist")));
                    }
                }
            }
        }
        // Walk each chain upwards; a revisit means a cycle.
        for r in records {
            let mut seen = vec![r.id.as_str()];
            let mut cur = r;
            while let Some(p) = &cur.parent {
                if seen.contains(&p.as_str()) {
                    return Err(structural(&r.id, "cycle in parent chain"));
                }
                seen.push(p.as_str());
                cur = by_id[p.as_str()];
            }
        }
        for r in records {
            if let Some(p) = &r.parent {
                let pl = by_id[p.as_str()].level;
                if pl + 1 != r.level {
                    return Err(structural(
                        &r.id,
                        format!("level gap: node on level {} has parent `{p}` on level {pl}", r.level),
                    ));
                }
            }
        }

        let depth = records.iter().map(|r| r.level).max().unwrap_or(1);
        let mut levels: Vec<Vec<String>> = vec![Vec::new(); depth];
        for r in records {
            levels[r.level - 1].push(r.id.clone());
        }
        levels.iter_mut().for_each(|l| l.sort());
        let mut index = HashMap::with_capacity(records.len());
        for (l, ids) in levels.iter().enumerate() {
            for (i, id) in ids.iter().enumerate() {
                index.insert(id.clone(), (l + 1, i));
            }
        }
        let parents: Vec<Vec<usize>> = levels
            .iter()
            .enumerate()
            .map(|(l, ids)| {
                if l == 0 {
                    return Vec::new();
                }
                ids.iter()
                    .map(|id| {
                        let p = by_id[id.as_str()].parent.as_deref().expect("validated parent");
                        index[p].1
                    })
                    .collect()
            })
            .collect();
        let ancestors = (0..levels[depth - 1].len())
            .map(|leaf| {
                let mut chain = vec![0; depth - 1];
                let mut cur = leaf;
                for l in (1..depth).rev() {
                    cur = parents[l][cur];
                    chain[l - 1] = cur;
                }
                chain
            })
            .collect();
        Ok(Taxonomy {
            depth,
            levels,
            parents,
            ancestors,
            index,
        })
    }

    /// Parses `node_id,parent_id,level` lines; the header line is optional
    /// and level-1 nodes carry an empty parent.
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(structural(
                    fields[0],
                    format!("line {}: expected `node_id,parent_id,level`", n + 1),
                ));
            }
            let level = match fields[2].parse::<usize>() {
                Ok(l) => l,
                Err(_) if records.is_empty() && n == 0 => continue, // header
                Err(_) => {
                    return Err(structural(fields[0], format!("line {}: bad level `{}`", n + 1, fields[2])));
                }
            };
            records.push(TaxonomyRecord {
                id: fields[0].to_string(),
                parent: (!fields[1].is_empty()).then(|| fields[1].to_string()),
                level,
            });
        }
        Self::from_records(&records)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id,parent_id,level\n");
        for (l, ids) in self.levels.iter().enumerate() {
            for (i, id) in ids.iter().enumerate() {
                let parent = if l == 0 { "" } else { &self.levels[l - 1][self.parents[l][i]] };
                out.push_str(&format!("{id},{parent},{}\n", l + 1));
            }
        }
        out
    }

    /// Number of levels `L`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[self.depth - 1].len()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.levels[level - 1].len()
    }

    pub fn root_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn node_id(&self, level: usize, idx: usize) -> &str {
        &self.levels[level - 1][idx]
    }

    pub fn leaf_id(&self, leaf: usize) -> &str {
        self.node_id(self.depth, leaf)
    }

    pub fn leaf_ids(&self) -> &[String] {
        &self.levels[self.depth - 1]
    }

    /// `(level, index within level)` of a node id.
    pub fn locate(&self, id: &str) -> Option<(usize, usize)> {
        self.index.get(id).copied()
    }

    pub fn leaf_index(&self, id: &str) -> Option<usize> {
        match self.locate(id) {
            Some((l, i)) if l == self.depth => Some(i),
            _ => None,
        }
    }

    /// Parent of node `idx` on `level` (`None` on level 1).
    pub fn parent(&self, level: usize, idx: usize) -> Option<usize> {
        (level > 1).then(|| self.parents[level - 1][idx])
    }

    /// Level-`level` ancestor of `leaf`; `level == L` returns the leaf.
    pub fn ancestor(&self, leaf: usize, level: usize) -> usize {
        assert!((1..=self.depth).contains(&level), "level {level} out of range");
        if level == self.depth {
            leaf
        } else {
            self.ancestors[leaf][level - 1]
        }
    }

    /// Ancestor indices of `leaf` on levels `1..L`, top first.
    pub fn ancestors(&self, leaf: usize) -> &[usize] {
        &self.ancestors[leaf]
    }

    /// Ancestor ids of `leaf`, top first (excluding the leaf itself).
    pub fn ancestor_chain(&self, leaf: usize) -> Vec<&str> {
        self.ancestors[leaf]
            .iter()
            .enumerate()
            .map(|(l, &i)| self.node_id(l + 1, i))
            .collect()
    }
}

/// Reads a taxonomy file.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Taxonomy::parse(&text)
}
