//! Seeded synthetic graph classification data built from motif units.
//!
//! Each class has a mixture over motifs. A graph of class `c` is grown by
//! drawing motif units from that mixture and attaching each new unit to a
//! random earlier node, until the target node count is reached.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Graph, GraphDataset, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    Triangle,
    /// Hub with four leaves.
    Star,
    /// Six-cycle.
    Cycle,
    /// Four-node path.
    Path,
}

impl Motif {
    pub const ALL: [Motif; 4] = [Motif::Triangle, Motif::Star, Motif::Cycle, Motif::Path];

    pub fn size(self) -> usize {
        match self {
            Motif::Triangle => 3,
            Motif::Star => 5,
            Motif::Cycle => 6,
            Motif::Path => 4,
        }
    }

    fn local_edges(self) -> Vec<(usize, usize)> {
        match self {
            Motif::Triangle => vec![(0, 1), (1, 2), (0, 2)],
            Motif::Star => (1..5).map(|l| (0, l)).collect(),
            Motif::Cycle => (0..6).map(|i| (i, (i + 1) % 6)).collect(),
            Motif::Path => vec![(0, 1), (1, 2), (2, 3)],
        }
    }
}

/// Unnormalized motif weights for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifMix(pub Vec<(Motif, f64)>);

impl MotifMix {
    pub fn pure(m: Motif) -> Self {
        MotifMix(vec![(m, 1.0)])
    }

    /// Weight `purity` on `main`, the rest spread evenly over other motifs.
    pub fn leaning(main: Motif, purity: f64) -> Self {
        let others = Motif::ALL.iter().filter(|&&m| m != main);
        let rest = (1.0 - purity) / 3.0;
        let mut w = vec![(main, purity)];
        w.extend(others.map(|&m| (m, rest)));
        MotifMix(w)
    }

    fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(DataError::BadSpec("empty motif mix".into()));
        }
        if self.0.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(DataError::BadSpec("motif weights must be finite and >= 0".into()));
        }
        if self.0.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(DataError::BadSpec("motif weights sum to zero".into()));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Motif {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        for &(m, w) in &self.0 {
            if u < w {
                return m;
            }
            u -= w;
        }
        self.0.iter().rev().find(|(_, w)| *w > 0.0).unwrap().0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_graphs: usize,
    pub classes: Vec<MotifMix>,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub feature_dim: usize,
    /// Std-dev of Gaussian noise on every feature column but the first.
    pub noise: f64,
}

impl SynthSpec {
    /// `n_classes` classes, class `c` leaning toward motif `c mod 4`.
    pub fn preset(n_graphs: usize, n_classes: usize, purity: f64) -> Self {
        Self {
            n_graphs,
            classes: (0..n_classes)
                .map(|c| MotifMix::leaning(Motif::ALL[c % 4], purity))
                .collect(),
            nodes_min: 10,
            nodes_max: 20,
            feature_dim: 4,
            noise: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::BadSpec(m.into()));
        if self.classes.is_empty() {
            return bad("no classes");
        }
        if self.n_graphs < self.classes.len() {
            return bad("fewer graphs than classes");
        }
        if self.nodes_min == 0 || self.nodes_min > self.nodes_max {
            return bad("node range must satisfy 1 <= min <= max");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return bad("noise must be finite and >= 0");
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.validate()?;
            if self.classes[..i].contains(c) {
                return Err(DataError::BadSpec(format!("class {i} repeats an earlier motif mix")));
            }
        }
        Ok(())
    }
}

/// Generates `spec.n_graphs` graphs; graph `i` has label `i mod C`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<GraphDataset> {
    spec.validate()?;
    let n_classes = spec.classes.len();
    let graphs = (0..spec.n_graphs)
        .map(|i| {
            let label = i % n_classes;
            let mut r = rng::stream(seed, "synth", &[i as u64]);
            grow(spec, &spec.classes[label], label, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    GraphDataset::new(format!("synth-{seed}"), graphs, n_classes, spec.feature_dim)
}

fn grow<R: Rng>(spec: &SynthSpec, mix: &MotifMix, label: usize, r: &mut R) -> Result<Graph> {
    let target = r.random_range(spec.nodes_min..=spec.nodes_max);
    let mut n = 0;
    let mut edges = Vec::new();
    while n < target {
        let m = mix.draw(r);
        let base = n;
        if base + m.size() > target {
            // Remaining room is filled with a path tail.
            for v in base..target {
                if v > 0 {
                    edges.push((v - 1, v));
                }
            }
            n = target;
            break;
        }
        edges.extend(m.local_edges().into_iter().map(|(a, b)| (base + a, base + b)));
        if base > 0 {
            let anchor = r.random_range(0..base);
            let entry = base + r.random_range(0..m.size());
            edges.push((anchor, entry));
        }
        n += m.size();
    }
    let mut features = Matrix::zeros(n, spec.feature_dim);
    for v in 0..n {
        let row = features.row_mut(v);
        row[0] = 1.0;
        for x in &mut row[1..] {
            let z: f64 = StandardNormal.sample(r);
            *x = spec.noise * z;
        }
    }
    Graph::new(n, edges, features, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangles(g: &Graph) -> usize {
        let n = g.num_nodes();
        let adj = |a: usize, b: usize| g.neighbors(a).contains(&b);
        let mut count = 0;
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    if adj(a, b) && adj(b, c) && adj(a, c) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = SynthSpec::preset(100, 2, 0.9);
        let a = synth_generate(&spec, 3).unwrap();
        assert_eq!(a, synth_generate(&spec, 3).unwrap());
        assert_ne!(a, synth_generate(&spec, 4).unwrap());
        assert_eq!(a.class_counts(), vec![50, 50]);
        let b = synth_generate(&SynthSpec::preset(101, 3, 0.9), 3).unwrap();
        assert_eq!(b.class_counts(), vec![34, 34, 33]);
    }

    #[test]
    fn node_counts_in_range() {
        let spec = SynthSpec::preset(60, 4, 0.7);
        for g in &synth_generate(&spec, 1).unwrap().graphs {
            assert!((10..=20).contains(&g.num_nodes()));
            assert_eq!(g.features().get(0, 0), 1.0);
        }
    }

    #[test]
    fn triangle_class_has_more_triangles_per_node() {
        let spec = SynthSpec::preset(200, 2, 0.9);
        let d = synth_generate(&spec, 11).unwrap();
        let mut per_node = [0.0f64; 2];
        let counts = d.class_counts();
        for g in &d.graphs {
            per_node[g.label()] += triangles(g) as f64 / g.num_nodes() as f64;
        }
        let tri = per_node[0] / counts[0] as f64;
        let star = per_node[1] / counts[1] as f64;
        assert!(tri > star + 0.1, "{tri} vs {star}");
    }

    #[test]
    fn bad_specs() {
        let ok = SynthSpec::preset(10, 2, 0.9);
        let cases = [
            SynthSpec { n_graphs: 1, ..ok.clone() },
            SynthSpec { classes: vec![], ..ok.clone() },
            SynthSpec { nodes_min: 0, ..ok.clone() },
            SynthSpec { nodes_min: 30, ..ok.clone() },
            SynthSpec { feature_dim: 0, ..ok.clone() },
            SynthSpec { noise: -1.0, ..ok.clone() },
            SynthSpec {
                classes: vec![MotifMix::pure(Motif::Star), MotifMix::pure(Motif::Star)],
                ..ok.clone()
            },
            SynthSpec {
                classes: vec![MotifMix(vec![(Motif::Star, 0.0)]), MotifMix::pure(Motif::Path)],
                ..ok.clone()
            },
        ];
        for spec in cases {
            assert!(matches!(synth_generate(&spec, 0), Err(DataError::BadSpec(_))), "{spec:?}");
        }
    }
}
