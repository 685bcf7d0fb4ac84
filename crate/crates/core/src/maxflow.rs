//! Augmenting-path max-flow (Dinic) over f64 capacities, used as the exact
//! min-s-t-cut subroutine of the expansion moves.

const EPS: f64 = 1e-11;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: f64,
}

/// Directed flow network with implicit reverse arcs.
#[derive(Debug)]
pub struct FlowGraph {
    arcs: Vec<Arc>,
    head: Vec<Vec<u32>>,
    pub source: usize,
    pub sink: usize,
}

impl FlowGraph {
    /// `n` regular nodes; node `n` is the source and `n + 1` the sink.
    pub fn new(n: usize) -> Self {
        Self {
            arcs: Vec::new(),
            head: vec![Vec::new(); n + 2],
            source: n,
            sink: n + 1,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.head.len()
    }

    /// Adds a directed arc and its zero-capacity reverse.
    pub fn add_arc(&mut self, from: usize, to: usize, cap: f64) {
        debug_assert!(cap >= 0.0, "negative capacity {cap}");
        if cap <= EPS {
            return;
        }
        let a = self.arcs.len();
        self.arcs.push(Arc { to, cap });
        self.arcs.push(Arc { to: from, cap: 0.0 });
        self.head[from].push(a as u32);
        self.head[to].push((a + 1) as u32);
    }

    fn bfs_levels(&self) -> Option<Vec<i32>> {
        let mut level = vec![-1i32; self.num_nodes()];
        let mut queue = std::collections::VecDeque::new();
        level[self.source] = 0;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for &ai in &self.head[u] {
                let arc = &self.arcs[ai as usize];
                if arc.cap > EPS && level[arc.to] < 0 {
                    level[arc.to] = level[u] + 1;
                    queue.push_back(arc.to);
                }
            }
        }
        if level[self.sink] < 0 {
            None
        } else {
            Some(level)
        }
    }

    fn dfs_push(
        &mut self,
        u: usize,
        pushed: f64,
        level: &[i32],
        iter: &mut [usize],
    ) -> f64 {
        if u == self.sink {
            return pushed;
        }
        while iter[u] < self.head[u].len() {
            let ai = self.head[u][iter[u]] as usize;
            let (to, cap) = (self.arcs[ai].to, self.arcs[ai].cap);
            if cap > EPS && level[to] == level[u] + 1 {
                let d = self.dfs_push(to, pushed.min(cap), level, iter);
                if d > EPS {
                    self.arcs[ai].cap -= d;
                    self.arcs[ai ^ 1].cap += d;
                    return d;
                }
            }
            iter[u] += 1;
        }
        0.0
    }

    /// Runs Dinic to completion; returns the max-flow value.
    pub fn max_flow(&mut self) -> f64 {
        let mut flow = 0.0;
        while let Some(level) = self.bfs_levels() {
            let mut iter = vec![0usize; self.num_nodes()];
            loop {
                let pushed = self.dfs_push(self.source, f64::INFINITY, &level, &mut iter);
                if pushed <= EPS {
                    break;
                }
                flow += pushed;
            }
        }
        flow
    }

    /// Nodes reachable from the source in the residual graph (the source side
    /// of a minimum cut). Call after `max_flow`.
    pub fn min_cut_source_side(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_nodes()];
        let mut queue = std::collections::VecDeque::new();
        seen[self.source] = true;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for &ai in &self.head[u] {
                let arc = &self.arcs[ai as usize];
                if arc.cap > EPS && !seen[arc.to] {
                    seen[arc.to] = true;
                    queue.push_back(arc.to);
                }
            }
        }
        seen
    }
}
