//! Discrete Bayes filter over the working-memory locations plus a virtual
//! "new place" state.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use log::warn;

use crate::graph::Memory;
use crate::ids::LocationId;

pub const NEW_TO_NEW: f64 = 0.9;
pub const TO_NEW: f64 = 0.1;

/// Link structure seen by the filter.
pub trait StateGraph {
    /// Linked locations that may be traversed (those held in memory).
    fn linked(&self, id: LocationId) -> Vec<LocationId>;
    /// Whether `id` is a filter state (a WM location).
    fn is_state(&self, id: LocationId) -> bool;
}

impl StateGraph for Memory {
    fn linked(&self, id: LocationId) -> Vec<LocationId> {
        self.location(id)
            .map(|loc| {
                loc.links()
                    .map(|(n, _)| n)
                    .filter(|n| self.is_in_memory(*n))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn is_state(&self, id: LocationId) -> bool {
        self.wm().contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    new_place: f64,
    states: BTreeMap<LocationId, f64>,
}

impl Default for Posterior {
    fn default() -> Self {
        Self {
            new_place: 1.0,
            states: BTreeMap::new(),
        }
    }
}

impl Posterior {
    pub fn new_place(&self) -> f64 {
        self.new_place
    }

    pub fn get(&self, id: LocationId) -> f64 {
        self.states.get(&id).copied().unwrap_or(0.0)
    }

    pub fn states(&self) -> &BTreeMap<LocationId, f64> {
        &self.states
    }

    pub fn total(&self) -> f64 {
        self.new_place + self.states.values().sum::<f64>()
    }

    /// Aligns the state set with `wm`: removed states are dropped, new ones
    /// start at zero and the rest is renormalized. Returns true when no mass
    /// survived and everything was put back on the new-place state.
    pub fn reconcile(&mut self, wm: &BTreeSet<LocationId>) -> bool {
        self.states.retain(|id, _| wm.contains(id));
        for id in wm {
            self.states.entry(*id).or_insert(0.0);
        }
        let total = self.total();
        if total > 0.0 && total.is_finite() {
            self.new_place /= total;
            for p in self.states.values_mut() {
                *p /= total;
            }
            false
        } else {
            self.new_place = 1.0;
            self.states.values_mut().for_each(|p| *p = 0.0);
            true
        }
    }

    /// Most probable location; ties go to the lowest id. `None` when every
    /// location has zero probability.
    pub fn highest(&self) -> Option<(LocationId, f64)> {
        let mut best: Option<(LocationId, f64)> = None;
        for (&id, &p) in &self.states {
            if p > 0.0 && best.is_none_or(|(_, b)| p > b) {
                best = Some((id, p));
            }
        }
        best
    }

    /// The `n` most probable locations, by probability then id.
    pub fn top(&self, n: usize) -> Vec<(LocationId, f64)> {
        let mut all: Vec<(LocationId, f64)> = self.states.iter().map(|(k, v)| (*k, *v)).collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(n);
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Likelihood {
    pub new_place: f64,
    pub states: BTreeMap<LocationId, f64>,
    /// Mean and population standard deviation of the non-null scores.
    pub mean: Option<f64>,
    pub std_dev: f64,
}

/// Turns raw similarity scores into likelihoods.
pub fn likelihood(scores: &BTreeMap<LocationId, f64>) -> Likelihood {
    let non_null: Vec<f64> = scores.values().copied().filter(|s| *s > 0.0).collect();
    if non_null.is_empty() {
        return Likelihood {
            new_place: 1.0,
            states: scores.keys().map(|k| (*k, 1.0)).collect(),
            mean: None,
            std_dev: 0.0,
        };
    }
    let n = non_null.len() as f64;
    let mean = non_null.iter().sum::<f64>() / n;
    let var = non_null.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let states = scores
        .iter()
        .map(|(&id, &s)| {
            let l = if s >= mean + sd { (s - sd) / mean } else { 1.0 };
            (id, l)
        })
        .collect();
    let new_place = if sd > 0.0 { mean / sd + 1.0 } else { 1.0 };
    Likelihood {
        new_place,
        states,
        mean: Some(mean),
        std_dev: sd,
    }
}

/// Similarity of `current` to every WM location, through the inverted index.
pub fn similarity_scores(memory: &Memory, current: LocationId) -> BTreeMap<LocationId, f64> {
    let mut pairs: BTreeMap<LocationId, u32> = memory.wm().iter().map(|id| (*id, 0)).collect();
    let Some(cur) = memory.location(current) else {
        return pairs.into_keys().map(|k| (k, 0.0)).collect();
    };
    for (w, n) in cur.signature.counts() {
        let Some(word) = memory.vocabulary().get(w) else { continue };
        for l in &word.refs {
            if let Some(p) = pairs.get_mut(l) {
                let other = memory.location(*l).map_or(0, |loc| loc.signature.count(w));
                *p += n.min(other);
            }
        }
    }
    let n_cur = cur.signature.word_count();
    pairs
        .into_iter()
        .map(|(id, p)| {
            let n_other = memory.location(id).map_or(0, |l| l.signature.word_count());
            let denom = n_cur.max(n_other);
            let s = if denom == 0 { 0.0 } else { p as f64 / denom as f64 };
            (id, s)
        })
        .collect()
}

/// Breadth-first row builder. Nodes met through `StateGraph` are numbered
/// densely so repeated searches in one filter step avoid tree lookups.
struct Rows {
    index: HashMap<LocationId, u32>,
    ids: Vec<LocationId>,
    state: Vec<bool>,
    adj: Vec<Option<Vec<u32>>>,
    stamp: Vec<u32>,
    generation: u32,
    queue: VecDeque<(u32, usize)>,
    weights: Vec<f64>,
    row: Vec<(u32, f64)>,
}

impl Rows {
    fn new(range: usize, sigma: f64) -> Self {
        let weights = (0..=range)
            .map(|h| {
                let h = h as f64;
                (-(h * h) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Self {
            index: HashMap::new(),
            ids: Vec::new(),
            state: Vec::new(),
            adj: Vec::new(),
            stamp: Vec::new(),
            generation: 0,
            queue: VecDeque::new(),
            weights,
            row: Vec::new(),
        }
    }

    fn node(&mut self, graph: &impl StateGraph, id: LocationId) -> u32 {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let i = self.ids.len() as u32;
        self.index.insert(id, i);
        self.ids.push(id);
        self.state.push(graph.is_state(id));
        self.adj.push(None);
        self.stamp.push(0);
        i
    }

    fn expand(&mut self, graph: &impl StateGraph, u: u32) {
        if self.adj[u as usize].is_some() {
            return;
        }
        let linked = graph.linked(self.ids[u as usize]);
        let next = linked.into_iter().map(|n| self.node(graph, n)).collect();
        self.adj[u as usize] = Some(next);
    }

    /// Fills `self.row` with the transition row of `from`, summing to 0.9.
    fn build(&mut self, graph: &impl StateGraph, from: LocationId) {
        let range = self.weights.len() - 1;
        self.generation += 1;
        let gen = self.generation;
        self.row.clear();
        let start = self.node(graph, from);
        self.stamp[start as usize] = gen;
        self.queue.clear();
        self.queue.push_back((start, 0));
        while let Some((u, hops)) = self.queue.pop_front() {
            if self.state[u as usize] {
                self.row.push((u, self.weights[hops]));
            }
            if hops == range {
                continue;
            }
            self.expand(graph, u);
            let adj = self.adj[u as usize].as_deref().unwrap_or(&[]);
            for &v in adj {
                if self.stamp[v as usize] != gen {
                    self.stamp[v as usize] = gen;
                    self.queue.push_back((v, hops + 1));
                }
            }
        }
        let total: f64 = self.row.iter().map(|(_, g)| g).sum();
        if total > 0.0 {
            for (_, g) in &mut self.row {
                *g *= NEW_TO_NEW / total;
            }
        }
    }
}

/// Probability that location `from` moves to each WM location, summing to
/// 0.9. Hop counts come from a breadth-first search over traversable links.
pub fn gaussian_row(
    graph: &impl StateGraph,
    from: LocationId,
    range: usize,
    sigma: f64,
) -> Vec<(LocationId, f64)> {
    let mut rows = Rows::new(range, sigma);
    rows.build(graph, from);
    rows.row.iter().map(|&(i, g)| (rows.ids[i as usize], g)).collect()
}

/// Prediction step: the prior belief before the observation.
pub fn predict(
    prev: &Posterior,
    graph: &impl StateGraph,
    range: usize,
    sigma: f64,
) -> Posterior {
    let n = prev.states.len();
    let located: f64 = prev.states.values().sum();
    let mut belief = Posterior {
        new_place: if n == 0 {
            prev.new_place + located
        } else {
            NEW_TO_NEW * prev.new_place + TO_NEW * located
        },
        states: BTreeMap::new(),
    };
    let spread = if n == 0 { 0.0 } else { TO_NEW / n as f64 * prev.new_place };
    for id in prev.states.keys() {
        belief.states.insert(*id, spread);
    }
    let mut rows = Rows::new(range, sigma);
    for (&j, &p) in &prev.states {
        if p == 0.0 {
            continue;
        }
        rows.build(graph, j);
        for &(i, t) in &rows.row {
            if let Some(b) = belief.states.get_mut(&rows.ids[i as usize]) {
                *b += p * t;
            }
        }
    }
    belief
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub posterior: Posterior,
    /// Every likelihood-belief product was zero and the posterior fell back
    /// to uniform.
    pub uniform_fallback: bool,
}

/// Full filter step. `prev` must already be reconciled with the WM.
pub fn update(
    prev: &Posterior,
    lik: &Likelihood,
    graph: &impl StateGraph,
    range: usize,
    sigma: f64,
) -> Update {
    let belief = predict(prev, graph, range, sigma);
    let mut post = Posterior {
        new_place: lik.new_place * belief.new_place,
        states: belief
            .states
            .iter()
            .map(|(id, b)| (*id, lik.states.get(id).copied().unwrap_or(1.0) * b))
            .collect(),
    };
    let total = post.total();
    if total > 0.0 && total.is_finite() {
        post.new_place /= total;
        for p in post.states.values_mut() {
            *p /= total;
        }
        return Update {
            posterior: post,
            uniform_fallback: false,
        };
    }
    warn!("posterior vanished, falling back to uniform");
    let u = 1.0 / (post.states.len() + 1) as f64;
    post.new_place = u;
    post.states.values_mut().for_each(|p| *p = u);
    Update {
        posterior: post,
        uniform_fallback: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub highest: Option<(LocationId, f64)>,
    pub accepted: Option<LocationId>,
    pub p_new: f64,
}

pub fn select(post: &Posterior, t_loop: f64) -> Selection {
    let highest = post.highest();
    let accepted = highest.filter(|_| post.new_place() < t_loop).map(|(id, _)| id);
    Selection {
        highest,
        accepted,
        p_new: post.new_place(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    /// Undirected test graph; every node is in memory.
    struct Chain {
        adj: BTreeMap<LocationId, Vec<LocationId>>,
        states: BTreeSet<LocationId>,
    }

    impl Chain {
        fn new(states: &[u64], edges: &[(u64, u64)]) -> Self {
            let mut adj: BTreeMap<LocationId, Vec<LocationId>> = BTreeMap::new();
            for &s in states {
                adj.entry(LocationId(s)).or_default();
            }
            for &(a, b) in edges {
                adj.entry(LocationId(a)).or_default().push(LocationId(b));
                adj.entry(LocationId(b)).or_default().push(LocationId(a));
            }
            Self {
                adj,
                states: states.iter().map(|&s| LocationId(s)).collect(),
            }
        }

        fn path(n: u64) -> Self {
            let states: Vec<u64> = (1..=n).collect();
            let edges: Vec<(u64, u64)> = (1..n).map(|i| (i, i + 1)).collect();
            Self::new(&states, &edges)
        }

        fn hops(&self, from: LocationId) -> BTreeMap<LocationId, usize> {
            let mut d = BTreeMap::from([(from, 0)]);
            let mut q = VecDeque::from([from]);
            while let Some(x) = q.pop_front() {
                for &y in &self.adj[&x] {
                    if !d.contains_key(&y) {
                        d.insert(y, d[&x] + 1);
                        q.push_back(y);
                    }
                }
            }
            d
        }
    }

    impl StateGraph for Chain {
        fn linked(&self, id: LocationId) -> Vec<LocationId> {
            self.adj.get(&id).cloned().unwrap_or_default()
        }
        fn is_state(&self, id: LocationId) -> bool {
            self.states.contains(&id)
        }
    }

    fn l(i: u64) -> LocationId {
        LocationId(i)
    }

    fn posterior(new_place: f64, states: &[(u64, f64)]) -> Posterior {
        Posterior {
            new_place,
            states: states.iter().map(|&(k, v)| (l(k), v)).collect(),
        }
    }

    #[test]
    fn likelihood_of_one_outstanding_score() {
        let scores: BTreeMap<_, _> = [(1, 0.2), (2, 0.2), (3, 0.2), (4, 0.8)]
            .iter()
            .map(|&(k, v)| (l(k), v))
            .collect();
        let lik = likelihood(&scores);
        let mean = 0.35;
        let sd = (((0.15f64).powi(2) * 3.0 + 0.45f64.powi(2)) / 4.0).sqrt();
        assert!((lik.mean.unwrap() - mean).abs() < 1e-12);
        assert!((lik.std_dev - 0.2598).abs() < 1e-4);
        assert!((lik.states[&l(4)] - (0.8 - sd) / mean).abs() < 1e-12);
        assert!((lik.states[&l(4)] - 1.543).abs() < 1e-3);
        for i in 1..=3 {
            assert_eq!(lik.states[&l(i)], 1.0);
        }
        assert!((lik.new_place - 2.347).abs() < 1e-3);
    }

    #[test]
    fn likelihood_degenerate_cases() {
        let zeros: BTreeMap<_, _> = (1..=3).map(|i| (l(i), 0.0)).collect();
        let lik = likelihood(&zeros);
        assert_eq!(lik.new_place, 1.0);
        assert!(lik.states.values().all(|v| *v == 1.0));

        let single: BTreeMap<_, _> = [(l(1), 0.0), (l(2), 0.4)].into_iter().collect();
        let lik = likelihood(&single);
        assert_eq!(lik.std_dev, 0.0);
        assert_eq!(lik.new_place, 1.0);
        assert_eq!(lik.states[&l(2)], 1.0);

        let same: BTreeMap<_, _> = (1..=4).map(|i| (l(i), 0.3)).collect();
        let lik = likelihood(&same);
        assert_eq!(lik.new_place, 1.0);
        assert!(lik.states.values().all(|v| *v == 1.0));
    }

    #[test]
    fn gaussian_row_on_a_chain() {
        let g = Chain::path(40);
        let row = gaussian_row(&g, l(20), 16, 1.6);
        let raw = |h: f64| (-(h * h) / (2.0 * 1.6 * 1.6)).exp();
        let total: f64 = raw(0.0) + 2.0 * (1..=16).map(|h| raw(h as f64)).sum::<f64>();
        let m: BTreeMap<_, _> = row.iter().copied().collect();
        assert_eq!(m.len(), 33);
        assert!((m.values().sum::<f64>() - 0.9).abs() < 1e-12);
        assert!((m[&l(20)] - 0.9 / total).abs() < 1e-12);
        assert!((m[&l(23)] - 0.9 * raw(3.0) / total).abs() < 1e-12);
        assert!(!m.contains_key(&l(3)) && m.contains_key(&l(4)));
    }

    #[test]
    fn non_states_get_no_mass_but_are_traversed() {
        // 2 is an STM location between WM states 1 and 3
        let g = Chain::new(&[1, 3], &[(1, 2), (2, 3)]);
        let row: BTreeMap<_, _> = gaussian_row(&g, l(1), 16, 1.6).into_iter().collect();
        assert_eq!(row.len(), 2);
        let raw2 = (-(4.0) / (2.0 * 1.6 * 1.6f64)).exp();
        assert!((row[&l(3)] - 0.9 * raw2 / (1.0 + raw2)).abs() < 1e-12);
    }

    #[test]
    fn first_frame_probabilities() {
        let g = Chain::new(&[1, 2, 3, 4], &[]);
        let prev = posterior(1.0, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)]);
        let belief = predict(&prev, &g, 16, 1.6);
        assert!((belief.new_place - 0.9).abs() < 1e-15);
        for i in 1..=4 {
            assert!((belief.get(l(i)) - 0.025).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_wm_keeps_everything_on_new() {
        let g = Chain::new(&[], &[]);
        let lik = likelihood(&BTreeMap::new());
        let up = update(&Posterior::default(), &lik, &g, 16, 1.6);
        assert_eq!(up.posterior.new_place(), 1.0);
        assert!(up.posterior.highest().is_none());
    }

    #[test]
    fn reconcile_renormalizes() {
        let mut p = posterior(0.5, &[(1, 0.3), (2, 0.2)]);
        let wm: BTreeSet<_> = [l(1), l(3)].into_iter().collect();
        assert!(!p.reconcile(&wm));
        assert!((p.new_place() - 0.5 / 0.8).abs() < 1e-15);
        assert!((p.get(l(1)) - 0.3 / 0.8).abs() < 1e-15);
        assert_eq!(p.get(l(3)), 0.0);
        assert!(!p.states().contains_key(&l(2)));

        let mut p = posterior(0.0, &[(1, 1.0)]);
        assert!(p.reconcile(&[l(2)].into_iter().collect()));
        assert_eq!(p.new_place(), 1.0);
        assert_eq!(p.get(l(2)), 0.0);
    }

    #[test]
    fn zero_products_fall_back_to_uniform() {
        let g = Chain::new(&[1, 2], &[]);
        let prev = posterior(1.0, &[(1, 0.0), (2, 0.0)]);
        let lik = Likelihood {
            new_place: 0.0,
            states: [(l(1), 0.0), (l(2), 0.0)].into_iter().collect(),
            mean: None,
            std_dev: 0.0,
        };
        let up = update(&prev, &lik, &g, 16, 1.6);
        assert!(up.uniform_fallback);
        assert!((up.posterior.new_place() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn selection_rules() {
        let p = posterior(0.05, &[(1, 0.4), (2, 0.4), (3, 0.15)]);
        let s = select(&p, 0.11);
        assert_eq!(s.highest, Some((l(1), 0.4)));
        assert_eq!(s.accepted, Some(l(1)));
        // p(new) equal to the threshold is rejected
        let p = posterior(0.11, &[(1, 0.89)]);
        assert_eq!(select(&p, 0.11).accepted, None);
        assert_eq!(select(&p, 0.11).highest, Some((l(1), 0.89)));
        assert_eq!(p.top(3), vec![(l(1), 0.89)]);
    }

    /// Dense matrix-vector oracle: every row, including zero-probability ones.
    fn dense_update(
        prev: &Posterior,
        lik: &Likelihood,
        g: &Chain,
        range: usize,
        sigma: f64,
    ) -> Posterior {
        let ids: Vec<LocationId> = prev.states.keys().copied().collect();
        let n = ids.len();
        let mut t = vec![vec![0.0; n + 1]; n + 1];
        // index 0 is the new-place state
        t[0][0] = if n == 0 { 1.0 } else { 0.9 };
        for i in 0..n {
            t[0][i + 1] = 0.1 / n as f64;
        }
        for (jx, j) in ids.iter().enumerate() {
            t[jx + 1][0] = 0.1;
            let hops = g.hops(*j);
            let mut raw = vec![0.0; n];
            for (ix, i) in ids.iter().enumerate() {
                if let Some(&h) = hops.get(i) {
                    if h <= range {
                        raw[ix] = (-((h * h) as f64) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            let s: f64 = raw.iter().sum();
            for ix in 0..n {
                t[jx + 1][ix + 1] = 0.9 * raw[ix] / s;
            }
        }
        let mut p = vec![prev.new_place];
        p.extend(ids.iter().map(|i| prev.states[i]));
        let mut out = vec![0.0; n + 1];
        for i in 0..=n {
            let belief: f64 = (0..=n).map(|j| t[j][i] * p[j]).sum();
            let lk = if i == 0 { lik.new_place } else { lik.states[&ids[i - 1]] };
            out[i] = lk * belief;
        }
        let z: f64 = out.iter().sum();
        Posterior {
            new_place: out[0] / z,
            states: ids.iter().enumerate().map(|(ix, id)| (*id, out[ix + 1] / z)).collect(),
        }
    }

    proptest! {
        #[test]
        fn sparse_update_matches_dense_oracle(
            n in 1usize..30,
            extra in proptest::collection::vec((1u64..30, 1u64..30), 0..10),
            probs in proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], 31),
            scores in proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], 30),
        ) {
            let states: Vec<u64> = (1..=n as u64).collect();
            let mut edges: Vec<(u64, u64)> = (1..n as u64).map(|i| (i, i + 1)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b && *a <= n as u64 && *b <= n as u64));
            let g = Chain::new(&states, &edges);
            let mut prev = Posterior {
                new_place: probs[0] + 1e-3,
                states: states.iter().map(|&s| (l(s), probs[s as usize])).collect(),
            };
            prev.reconcile(&g.states);
            let raw: BTreeMap<_, _> = states.iter().map(|&s| (l(s), scores[s as usize - 1])).collect();
            let lik = likelihood(&raw);
            let fast = update(&prev, &lik, &g, 16, 1.6).posterior;
            let slow = dense_update(&prev, &lik, &g, 16, 1.6);
            prop_assert!((fast.total() - 1.0).abs() < 1e-12);
            prop_assert!((fast.new_place() - slow.new_place()).abs() < 1e-12);
            for s in &states {
                prop_assert!((fast.get(l(*s)) - slow.get(l(*s))).abs() < 1e-12);
            }
        }
    }
}
