//! Record matching between an original and a synthetic dataset, and the
//! maximum fraction of original records that can be paired off.
//!
//! Two records match when every exact-match column agrees and at most one
//! near-match column differs, by exactly one adjacent bin. A near bin whose
//! effective range strictly contains its column's boundary value must match
//! exactly; values on either side of the boundary stay distinguishable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::schema::Layout;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearColumn {
    pub column: String,
    /// Bins strictly containing this raw value never near-match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_inside: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSpec {
    pub exact: Vec<String>,
    pub near: Vec<NearColumn>,
}

/// Match spec compiled against a concrete layout.
#[derive(Debug, Clone)]
pub struct MatchPredicate {
    exact: Vec<usize>,
    /// Column index and a per-bin flag marking bins that must match exactly.
    near: Vec<(usize, Vec<bool>)>,
}

impl MatchPredicate {
    pub fn build(layout: &Layout, spec: &MatchSpec) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut exact = Vec::with_capacity(spec.exact.len());
        for name in &spec.exact {
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!(
                    "match spec lists column {name:?} twice"
                )));
            }
            exact.push(layout.column(name)?);
        }
        let mut near = Vec::with_capacity(spec.near.len());
        for nc in &spec.near {
            if !seen.insert(nc.column.clone()) {
                return Err(Error::Config(format!(
                    "match spec lists column {:?} twice",
                    nc.column
                )));
            }
            let col = layout.column(&nc.column)?;
            let strict = match nc.strict_inside {
                Some(v) => layout.columns[col]
                    .bins
                    .iter()
                    .map(|b| {
                        let (lo, hi) = b.effective_range(layout.columns[col].bounds);
                        lo < v && v < hi
                    })
                    .collect(),
                None => vec![false; layout.columns[col].bins.len()],
            };
            near.push((col, strict));
        }
        if seen.len() != layout.width() {
            return Err(Error::Config(format!(
                "match spec covers {} of {} layout columns",
                seen.len(),
                layout.width()
            )));
        }
        Ok(MatchPredicate { exact, near })
    }

    pub fn matches(&self, a: &Record, b: &Record) -> bool {
        for &c in &self.exact {
            if a[c] != b[c] {
                return false;
            }
        }
        let mut differing = 0;
        for (c, strict) in &self.near {
            let (x, y) = (a[*c], b[*c]);
            if x == y {
                continue;
            }
            differing += 1;
            if differing > 1 {
                return false;
            }
            if x.abs_diff(y) != 1 {
                return false;
            }
            if strict[x as usize] || strict[y as usize] {
                return false;
            }
        }
        true
    }

    /// Every record that could match `rec`, including `rec` itself.
    pub fn candidates(&self, rec: &Record) -> Vec<Record> {
        let mut out = vec![rec.clone()];
        for (c, strict) in &self.near {
            let x = rec[*c];
            if strict[x as usize] {
                continue;
            }
            for y in [x.checked_sub(1), x.checked_add(1)].into_iter().flatten() {
                if (y as usize) < strict.len() && !strict[y as usize] {
                    let mut cand = rec.clone();
                    cand[*c] = y;
                    out.push(cand);
                }
            }
        }
        out
    }
}

/// Dinic max-flow on a small directed graph with integer capacities.
struct FlowNet {
    /// to, capacity, index of the reverse edge.
    edges: Vec<(u32, u64, u32)>,
    head: Vec<Vec<u32>>,
}

impl FlowNet {
    fn new(nodes: usize) -> Self {
        FlowNet {
            edges: Vec::new(),
            head: vec![Vec::new(); nodes],
        }
    }

    fn add(&mut self, from: usize, to: usize, cap: u64) {
        let e = self.edges.len() as u32;
        self.edges.push((to as u32, cap, e + 1));
        self.edges.push((from as u32, 0, e));
        self.head[from].push(e);
        self.head[to].push(e + 1);
    }

    fn max_flow(&mut self, source: usize, sink: usize) -> u64 {
        let n = self.head.len();
        let mut flow = 0;
        loop {
            // BFS level graph.
            let mut level = vec![u32::MAX; n];
            level[source] = 0;
            let mut queue = std::collections::VecDeque::from([source]);
            while let Some(u) = queue.pop_front() {
                for &e in &self.head[u] {
                    let (to, cap, _) = self.edges[e as usize];
                    if cap > 0 && level[to as usize] == u32::MAX {
                        level[to as usize] = level[u] + 1;
                        queue.push_back(to as usize);
                    }
                }
            }
            if level[sink] == u32::MAX {
                return flow;
            }
            // Blocking flow with an iteration pointer per node.
            let mut it = vec![0usize; n];
            loop {
                let pushed = self.dfs(source, sink, u64::MAX, &level, &mut it);
                if pushed == 0 {
                    break;
                }
                flow += pushed;
            }
        }
    }

    fn dfs(&mut self, u: usize, sink: usize, limit: u64, level: &[u32], it: &mut [usize]) -> u64 {
        if u == sink {
            return limit;
        }
        while it[u] < self.head[u].len() {
            let e = self.head[u][it[u]] as usize;
            let (to, cap, rev) = self.edges[e];
            if cap > 0 && level[to as usize] == level[u] + 1 {
                let pushed = self.dfs(to as usize, sink, limit.min(cap), level, it);
                if pushed > 0 {
                    self.edges[e].1 -= pushed;
                    self.edges[rev as usize].1 += pushed;
                    return pushed;
                }
            }
            it[u] += 1;
        }
        0
    }
}

/// Maximum number of original rows that can be paired with distinct
/// synthetic rows under the predicate.
pub fn max_matched_rows(
    original: &Dataset,
    synthetic: &Dataset,
    pred: &MatchPredicate,
) -> u64 {
    let orig: Vec<(&Record, u64)> = original.iter().collect();
    let synth_index: std::collections::BTreeMap<&Record, usize> = synthetic
        .counts()
        .keys()
        .enumerate()
        .map(|(i, r)| (r, i))
        .collect();
    let synth_counts: Vec<u64> = synthetic.counts().values().copied().collect();

    let source = 0;
    let orig_base = 1;
    let synth_base = orig_base + orig.len();
    let sink = synth_base + synth_counts.len();
    let mut net = FlowNet::new(sink + 1);
    for (i, (rec, c)) in orig.iter().enumerate() {
        net.add(source, orig_base + i, *c);
        for cand in pred.candidates(rec) {
            if let Some(&j) = synth_index.get(&cand) {
                net.add(orig_base + i, synth_base + j, u64::MAX);
            }
        }
    }
    for (j, &c) in synth_counts.iter().enumerate() {
        net.add(synth_base + j, sink, c);
    }
    net.max_flow(source, sink)
}

/// Largest fraction of original rows matched into the synthetic dataset.
pub fn beta_max(original: &Dataset, synthetic: &Dataset, pred: &MatchPredicate) -> Result<f64> {
    if original.layout().columns.len() != synthetic.layout().columns.len()
        || original
            .layout()
            .columns
            .iter()
            .zip(&synthetic.layout().columns)
            .any(|(a, b)| a.bins != b.bins)
    {
        return Err(Error::Argument(
            "matching needs both datasets on the same layout".into(),
        ));
    }
    if original.n() == 0 {
        return Err(Error::Argument("matching needs a nonempty original".into()));
    }
    Ok(max_matched_rows(original, synthetic, pred) as f64 / original.n() as f64)
}
