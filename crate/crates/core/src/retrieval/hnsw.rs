//! Small-world graph over index centroids for fast centroid routing.
//!
//! A standard hierarchical navigable small-world structure with seeded level
//! draws, deterministic tie-breaking (distance, then id), and inner-product
//! scoring (distance = negative IP).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::rng::Rng;

const LEVEL_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    dist: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .partial_cmp(&other.dist)
            .expect("non-finite graph distance")
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Navigable small-world graph over the centroid set.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidGraph {
    pub degree: usize,
    pub max_level: usize,
    pub entry: u32,
    pub node_levels: Vec<u8>,
    /// links[level][node] -> neighbor ids; empty for nodes below that level.
    pub links: Vec<Vec<Vec<u32>>>,
}

fn neg_ip(a: &[f32], b: &[f32]) -> f32 {
    -crate::numerics::dot(a, b)
}

/// Diversified neighbor selection: keep a candidate only when it is closer
/// to the base point than to every neighbor kept so far, then backfill with
/// the nearest discarded candidates. Candidates must arrive sorted by
/// ascending distance to the base point.
fn select_neighbors(vectors: &[f32], d: usize, candidates: Vec<Cand>, cap: usize) -> Vec<u32> {
    let mut chosen: Vec<Cand> = Vec::with_capacity(cap);
    let mut discarded: Vec<Cand> = Vec::new();
    for c in candidates {
        if chosen.len() >= cap {
            break;
        }
        let cv = &vectors[c.id as usize * d..(c.id as usize + 1) * d];
        let diverse = chosen.iter().all(|r| {
            let rv = &vectors[r.id as usize * d..(r.id as usize + 1) * d];
            neg_ip(cv, rv) > c.dist
        });
        if diverse {
            chosen.push(c);
        } else {
            discarded.push(c);
        }
    }
    for c in discarded {
        if chosen.len() >= cap {
            break;
        }
        chosen.push(c);
    }
    chosen.into_iter().map(|c| c.id).collect()
}

impl CentroidGraph {
    pub fn build(vectors: &[f32], n: usize, d: usize, degree: usize, ef_construction: usize, seed: u64) -> Self {
        assert!(n >= 1 && degree >= 1);
        let mut rng = Rng::for_stream(seed, "hnsw-levels");
        let ml = 1.0 / (degree.max(2) as f64).ln();
        let mut g = Self {
            degree,
            max_level: 0,
            entry: 0,
            node_levels: Vec::with_capacity(n),
            links: vec![vec![Vec::new(); n]],
        };
        for node in 0..n as u32 {
            let level = ((-rng.next_f64().max(1e-12).ln() * ml) as usize).min(LEVEL_CAP);
            g.node_levels.push(level as u8);
            while g.links.len() <= level {
                g.links.push(vec![Vec::new(); n]);
            }
            if node == 0 {
                g.max_level = level;
                continue;
            }
            g.insert(vectors, d, node, level, ef_construction);
            if level > g.max_level {
                g.max_level = level;
                g.entry = node;
            }
        }
        g
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            self.degree * 2
        } else {
            self.degree
        }
    }

    fn insert(&mut self, vectors: &[f32], d: usize, node: u32, level: usize, ef: usize) {
        let q = &vectors[node as usize * d..(node as usize + 1) * d];
        let mut cur = self.entry;
        // Greedy descent through levels above the insertion level.
        for lev in (level + 1..=self.max_level).rev() {
            cur = self.greedy_closest(vectors, d, q, cur, lev);
        }
        let mut entries = vec![cur];
        for lev in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(vectors, d, q, &entries, ef, lev);
            let cap = self.max_degree(lev);
            let chosen = select_neighbors(vectors, d, found.clone(), cap);
            for &nb in &chosen {
                self.links[lev][node as usize].push(nb);
                self.links[lev][nb as usize].push(node);
                self.prune(vectors, d, nb, lev);
            }
            entries = found.iter().map(|c| c.id).collect();
            if entries.is_empty() {
                entries = vec![cur];
            }
        }
    }

    fn prune(&mut self, vectors: &[f32], d: usize, node: u32, level: usize) {
        let cap = self.max_degree(level);
        let list = &self.links[level][node as usize];
        if list.len() <= cap {
            return;
        }
        let base = &vectors[node as usize * d..(node as usize + 1) * d];
        let mut scored: Vec<Cand> = list
            .iter()
            .map(|&id| Cand {
                dist: neg_ip(base, &vectors[id as usize * d..(id as usize + 1) * d]),
                id,
            })
            .collect();
        scored.sort();
        scored.dedup_by_key(|c| c.id);
        self.links[level][node as usize] = select_neighbors(vectors, d, scored, cap);
    }

    fn greedy_closest(&self, vectors: &[f32], d: usize, q: &[f32], start: u32, level: usize) -> u32 {
        let mut cur = start;
        let mut cur_d = neg_ip(q, &vectors[cur as usize * d..(cur as usize + 1) * d]);
        loop {
            let mut improved = false;
            for &nb in &self.links[level][cur as usize] {
                let nd = neg_ip(q, &vectors[nb as usize * d..(nb as usize + 1) * d]);
                if nd < cur_d || (nd == cur_d && nb < cur) {
                    cur = nb;
                    cur_d = nd;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search within one level; returns up to `ef` candidates sorted by
    /// ascending distance.
    fn search_layer(
        &self,
        vectors: &[f32],
        d: usize,
        q: &[f32],
        entries: &[u32],
        ef: usize,
        level: usize,
    ) -> Vec<Cand> {
        let mut visited = vec![false; self.node_levels.len()];
        // Min-heap of candidates to expand (via Reverse ordering trick).
        let mut frontier: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
        // Max-heap of current best results (worst on top).
        let mut results: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entries {
            if visited[e as usize] {
                continue;
            }
            visited[e as usize] = true;
            let c = Cand {
                dist: neg_ip(q, &vectors[e as usize * d..(e as usize + 1) * d]),
                id: e,
            };
            frontier.push(std::cmp::Reverse(c));
            results.push(c);
        }
        while let Some(std::cmp::Reverse(cur)) = frontier.pop() {
            if results.len() >= ef {
                if let Some(worst) = results.peek() {
                    if cur.dist > worst.dist {
                        break;
                    }
                }
            }
            for &nb in &self.links[level][cur.id as usize] {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let c = Cand {
                    dist: neg_ip(q, &vectors[nb as usize * d..(nb as usize + 1) * d]),
                    id: nb,
                };
                let admit = results.len() < ef || c < *results.peek().unwrap();
                if admit {
                    frontier.push(std::cmp::Reverse(c));
                    results.push(c);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = results.into_vec();
        out.sort();
        out
    }

    /// Routes a query to the `ef` most promising centroids.
    pub fn search(&self, vectors: &[f32], d: usize, q: &[f32], ef: usize) -> Vec<(u32, f32)> {
        let mut cur = self.entry;
        for lev in (1..=self.max_level).rev() {
            cur = self.greedy_closest(vectors, d, q, cur, lev);
        }
        self.search_layer(vectors, d, q, &[cur], ef, 0)
            .into_iter()
            .map(|c| (c.id, c.dist))
            .collect()
    }
}
