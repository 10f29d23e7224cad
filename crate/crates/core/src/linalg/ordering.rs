//! Fill-reducing ordering by recursive level-structure bisection.
//!
//! Each connected subgraph is split by the middle level of a breadth-first
//! level structure rooted at a pseudo-peripheral node; the separator is
//! numbered after both halves. On grid-like graphs this yields separators of
//! size `O(sqrt(n))`, which keeps Cholesky fill near `O(n log n)`.

const LEAF_SIZE: usize = 48;

struct Graph<'a> {
    ptr: &'a [usize],
    idx: &'a [usize],
}

impl Graph<'_> {
    fn neighbors(&self, v: usize) -> &[usize] {
        &self.idx[self.ptr[v]..self.ptr[v + 1]]
    }
}

struct Work {
    /// Subset id each node currently belongs to.
    owner: Vec<usize>,
    /// BFS level (or usize::MAX when unvisited) for the current traversal.
    level: Vec<usize>,
    next_id: usize,
}

/// Returns `perm` with `perm[k]` = original index eliminated at step `k`.
///
/// `ptr`/`idx` describe a symmetric adjacency structure in compressed-row
/// form; diagonal entries are ignored.
pub fn nested_dissection(ptr: &[usize], idx: &[usize]) -> Vec<usize> {
    let n = ptr.len().saturating_sub(1);
    let graph = Graph { ptr, idx };
    let mut work = Work { owner: vec![0; n], level: vec![usize::MAX; n], next_id: 1 };
    let mut perm = vec![usize::MAX; n];
    // (subset id, nodes, first output slot)
    let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, (0..n).collect(), 0)];
    while let Some((id, nodes, start)) = stack.pop() {
        if nodes.len() <= LEAF_SIZE {
            for (k, &v) in nodes.iter().enumerate() {
                perm[start + k] = v;
            }
            continue;
        }
        let components = split_components(&graph, &mut work, id, &nodes);
        if components.len() > 1 {
            let mut slot = start;
            for comp in components {
                let cid = work.next_id;
                work.next_id += 1;
                for &v in &comp {
                    work.owner[v] = cid;
                }
                let len = comp.len();
                stack.push((cid, comp, slot));
                slot += len;
            }
            continue;
        }
        let levels = pseudo_peripheral_levels(&graph, &mut work, id, nodes[0]);
        if levels.len() < 3 {
            for (k, &v) in nodes.iter().enumerate() {
                perm[start + k] = v;
            }
            continue;
        }
        let half = nodes.len() / 2;
        let mut acc = 0;
        let mut mid = 1;
        for (li, lvl) in levels.iter().enumerate() {
            acc += lvl.len();
            if acc >= half {
                mid = li.clamp(1, levels.len() - 2);
                break;
            }
        }
        let a: Vec<usize> = levels[..mid].iter().flatten().copied().collect();
        let b: Vec<usize> = levels[mid + 1..].iter().flatten().copied().collect();
        let sep = &levels[mid];
        let sep_start = start + a.len() + b.len();
        for (k, &v) in sep.iter().enumerate() {
            perm[sep_start + k] = v;
            work.owner[v] = usize::MAX;
        }
        let (ida, idb) = (work.next_id, work.next_id + 1);
        work.next_id += 2;
        for &v in &a {
            work.owner[v] = ida;
        }
        for &v in &b {
            work.owner[v] = idb;
        }
        let b_start = start + a.len();
        stack.push((ida, a, start));
        stack.push((idb, b, b_start));
    }
    debug_assert!(perm.iter().all(|&p| p != usize::MAX));
    perm
}

fn split_components(g: &Graph, w: &mut Work, id: usize, nodes: &[usize]) -> Vec<Vec<usize>> {
    for &v in nodes {
        w.level[v] = usize::MAX;
    }
    let mut comps = Vec::new();
    for &root in nodes {
        if w.level[root] != usize::MAX {
            continue;
        }
        let mut comp = vec![root];
        w.level[root] = 0;
        let mut head = 0;
        while head < comp.len() {
            let v = comp[head];
            head += 1;
            for &u in g.neighbors(v) {
                if u != v && w.owner[u] == id && w.level[u] == usize::MAX {
                    w.level[u] = 0;
                    comp.push(u);
                }
            }
        }
        comps.push(comp);
    }
    for &v in nodes {
        w.level[v] = usize::MAX;
    }
    comps
}

fn bfs_levels(g: &Graph, w: &mut Work, id: usize, root: usize) -> Vec<Vec<usize>> {
    let mut levels: Vec<Vec<usize>> = vec![vec![root]];
    let mut seen = vec![root];
    w.level[root] = 0;
    loop {
        let depth = levels.len();
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &u in g.neighbors(v) {
                if u != v && w.owner[u] == id && w.level[u] == usize::MAX {
                    w.level[u] = depth;
                    next.push(u);
                    seen.push(u);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        levels.push(next);
    }
    for v in seen {
        w.level[v] = usize::MAX;
    }
    levels
}

fn pseudo_peripheral_levels(g: &Graph, w: &mut Work, id: usize, start: usize) -> Vec<Vec<usize>> {
    let mut levels = bfs_levels(g, w, id, start);
    for _ in 0..8 {
        let last = levels.last().unwrap();
        let degree = |v: usize| g.neighbors(v).iter().filter(|&&u| u != v && w.owner[u] == id).count();
        let cand = *last.iter().min_by_key(|&&v| degree(v)).unwrap();
        let trial = bfs_levels(g, w, id, cand);
        if trial.len() > levels.len() {
            levels = trial;
        } else {
            break;
        }
    }
    levels
}
