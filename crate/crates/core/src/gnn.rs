//! A small GIN-style graph classifier with a hand-written backward pass.
//!
//! ```text
//! X⁰      = relu(X · mlp_w + mlp_b)
//! X^{l+1} = relu((X^l + A·X^l) · gnn{l+1}_w + gnn{l+1}_b)   l = 0, 1
//! h_G     = mean over nodes of X²
//! logits  = h_G · head_w + head_b
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphdata::{Graph, GraphDataset};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error("shape mismatch in {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("missing or unexpected tensor {0:?}")]
    UnknownTensor(String),
}

pub type Result<T> = std::result::Result<T, GnnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ArchConfig {
    pub const DEFAULT_HIDDEN: usize = 16;

    pub fn new(feature_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        let cfg = Self {
            feature_dim,
            hidden,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(GnnError::BadArch(format!(
                "feature_dim, hidden and classes must be >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }

    fn shapes(&self) -> [(usize, usize); 8] {
        let (d, h, c) = (self.feature_dim, self.hidden, self.classes);
        [(d, h), (1, h), (h, h), (1, h), (h, h), (1, h), (h, c), (1, c)]
    }
}

/// Model parameters, also used for gradients and the per-client channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mlp_w: Matrix,
    pub mlp_b: Matrix,
    pub gnn1_w: Matrix,
    pub gnn1_b: Matrix,
    pub gnn2_w: Matrix,
    pub gnn2_b: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

pub type GradSet = ModelParams;

impl ModelParams {
    /// Canonical tensor order.
    pub const NAMES: [&'static str; 8] = [
        "mlp_w", "mlp_b", "gnn1_w", "gnn1_b", "gnn2_w", "gnn2_b", "head_w", "head_b",
    ];

    pub fn zeros(cfg: &ArchConfig) -> Self {
        let [a, b, c, d, e, f, g, h] = cfg.shapes().map(|(r, c)| Matrix::zeros(r, c));
        Self::from_array([a, b, c, d, e, f, g, h])
    }

    fn from_array(m: [Matrix; 8]) -> Self {
        let [mlp_w, mlp_b, gnn1_w, gnn1_b, gnn2_w, gnn2_b, head_w, head_b] = m;
        Self {
            mlp_w,
            mlp_b,
            gnn1_w,
            gnn1_b,
            gnn2_w,
            gnn2_b,
            head_w,
            head_b,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            feature_dim: self.mlp_w.rows(),
            hidden: self.mlp_w.cols(),
            classes: self.head_w.cols(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("mlp_w", &self.mlp_w),
            ("mlp_b", &self.mlp_b),
            ("gnn1_w", &self.gnn1_w),
            ("gnn1_b", &self.gnn1_b),
            ("gnn2_w", &self.gnn2_w),
            ("gnn2_b", &self.gnn2_b),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            ("mlp_w", &mut self.mlp_w),
            ("mlp_b", &mut self.mlp_b),
            ("gnn1_w", &mut self.gnn1_w),
            ("gnn1_b", &mut self.gnn1_b),
            ("gnn2_w", &mut self.gnn2_w),
            ("gnn2_b", &mut self.gnn2_b),
            ("head_w", &mut self.head_w),
            ("head_b", &mut self.head_b),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    /// Rebuilds from `(name, matrix)` pairs, which must name every tensor
    /// exactly once.
    pub fn from_named<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Matrix)>,
        S: AsRef<str>,
    {
        let mut slots: [Option<Matrix>; 8] = Default::default();
        for (name, m) in tensors {
            let name = name.as_ref();
            let i = Self::NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| GnnError::UnknownTensor(name.to_owned()))?;
            if slots[i].replace(m).is_some() {
                return Err(GnnError::UnknownTensor(name.to_owned()));
            }
        }
        let mut out = Vec::with_capacity(8);
        for (i, slot) in slots.into_iter().enumerate() {
            out.push(slot.ok_or_else(|| GnnError::UnknownTensor(Self::NAMES[i].to_owned()))?);
        }
        let params = Self::from_array(out.try_into().expect("eight tensors"));
        params.arch().validate()?;
        params.check_shapes(&params.arch())?;
        Ok(params)
    }

    pub fn check_shapes(&self, cfg: &ArchConfig) -> Result<()> {
        for ((name, m), expected) in self.tensors().into_iter().zip(cfg.shapes()) {
            if m.shape() != expected {
                return Err(GnnError::ShapeMismatch {
                    name: name.into(),
                    expected,
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        other.check_shapes(&self.arch())
    }

    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> Self {
        Self::from_array(self.tensors().map(|(_, m)| f(m)))
    }

    /// Elementwise combination of two congruent parameter sets.
    pub fn zip_with(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_congruent(other)?;
        let mut out = self.clone();
        for ((_, o), (_, b)) in out.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in o.data_mut().iter_mut().zip(b.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_congruent(other)?;
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b).expect("congruent");
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|m| m.scale(alpha))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.count_nonzero()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, m)| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Weights uniform in `±1/√fan_in`, biases zero.
pub fn init_params(cfg: &ArchConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut p = ModelParams::zeros(cfg);
    for (i, (name, m)) in p.tensors_mut().into_iter().enumerate() {
        if name.ends_with("_b") {
            continue;
        }
        let bound = 1.0 / (m.rows() as f64).sqrt();
        let mut r = rng::stream(seed, "init", &[i as u64]);
        for v in m.data_mut() {
            *v = r.random_range(-bound..=bound);
        }
    }
    Ok(p)
}

/// Elementwise `w + s`.
pub fn combine(w: &ModelParams, s: &ModelParams) -> Result<ModelParams> {
    w.zip_with(s, |a, b| a + b)
}

/// Which parameters the gradient is taken with respect to.
#[derive(Debug, Clone, Copy)]
pub enum GradTarget<'a> {
    /// The parameters passed in.
    All,
    /// The passed parameters are a sparse channel `s`; the loss is evaluated
    /// at `combine(base, s)` and the gradient is returned for `s`.
    SparseThroughSum { base: &'a ModelParams },
}

struct Trace {
    x0_in: Matrix,
    z: [Matrix; 3],
    m: [Matrix; 2],
    pooled: Matrix,
    logits: Vec<f64>,
}

fn neighbor_sum(g: &Graph, x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..g.num_nodes() {
        for &j in g.neighbors(i) {
            let src = x.row(j).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out
}

fn add_bias(m: &mut Matrix, b: &Matrix) {
    let b = b.data();
    for r in 0..m.rows() {
        for (x, &bv) in m.row_mut(r).iter_mut().zip(b) {
            *x += bv;
        }
    }
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

fn column_sum(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn check_graph(p: &ModelParams, g: &Graph) -> Result<()> {
    let d = p.mlp_w.rows();
    if g.feature_dim() != d {
        return Err(GnnError::ShapeMismatch {
            name: "features".into(),
            expected: (g.num_nodes(), d),
            got: g.features().shape(),
        });
    }
    Ok(())
}

fn trace(p: &ModelParams, g: &Graph) -> Trace {
    let x = g.features().clone();
    let mut z0 = x.matmul(&p.mlp_w).expect("checked");
    add_bias(&mut z0, &p.mlp_b);
    let h0 = relu(&z0);
    let m1 = neighbor_sum(g, &h0);
    let mut z1 = m1.matmul(&p.gnn1_w).expect("checked");
    add_bias(&mut z1, &p.gnn1_b);
    let h1 = relu(&z1);
    let m2 = neighbor_sum(g, &h1);
    let mut z2 = m2.matmul(&p.gnn2_w).expect("checked");
    add_bias(&mut z2, &p.gnn2_b);
    let h2 = relu(&z2);
    let pooled = column_sum(&h2).scale(1.0 / g.num_nodes() as f64);
    let mut out = pooled.matmul(&p.head_w).expect("checked");
    add_bias(&mut out, &p.head_b);
    Trace {
        x0_in: x,
        z: [z0, z1, z2],
        m: [m1, m2],
        pooled,
        logits: out.into_vec(),
    }
}

/// Class logits for one graph.
pub fn forward(p: &ModelParams, g: &Graph) -> Result<Vec<f64>> {
    p.check_shapes(&p.arch())?;
    check_graph(p, g)?;
    Ok(trace(p, g).logits)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn relu_backward(grad: &mut Matrix, z: &Matrix) {
    for (g, &zv) in grad.data_mut().iter_mut().zip(z.data()) {
        if zv <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Accumulates `scale · ∂CE/∂p` for one graph into `grads`; returns the loss.
fn backward_one(p: &ModelParams, g: &Graph, scale: f64, grads: &mut GradSet) -> f64 {
    let t = trace(p, g);
    let loss = cross_entropy(&t.logits, g.label());
    let mut dlogits = softmax(&t.logits);
    dlogits[g.label()] -= 1.0;
    let dlogits = Matrix::from_vec(1, dlogits.len(), dlogits).scale(scale);

    grads.head_w.axpy(1.0, &t.pooled.t_matmul(&dlogits).expect("shape")).expect("shape");
    grads.head_b.axpy(1.0, &dlogits).expect("shape");
    let dpooled = dlogits.matmul_t(&p.head_w).expect("shape");

    let n = g.num_nodes();
    let mut dh = Matrix::zeros(n, p.head_w.rows());
    for r in 0..n {
        for (o, &v) in dh.row_mut(r).iter_mut().zip(dpooled.data()) {
            *o = v / n as f64;
        }
    }

    let layers: [(&Matrix, usize); 2] = [(&p.gnn2_w, 1), (&p.gnn1_w, 0)];
    for (w, li) in layers {
        // li indexes m; the layer's output is h[li + 1].
        let mut dz = dh;
        relu_backward(&mut dz, &t.z[li + 1]);
        let dw = t.m[li].t_matmul(&dz).expect("shape");
        let db = column_sum(&dz);
        let (gw, gb) = if li == 1 {
            (&mut grads.gnn2_w, &mut grads.gnn2_b)
        } else {
            (&mut grads.gnn1_w, &mut grads.gnn1_b)
        };
        gw.axpy(1.0, &dw).expect("shape");
        gb.axpy(1.0, &db).expect("shape");
        let dm = dz.matmul_t(w).expect("shape");
        // (I + A) is symmetric.
        dh = neighbor_sum(g, &dm);
    }

    let mut dz0 = dh;
    relu_backward(&mut dz0, &t.z[0]);
    grads.mlp_w.axpy(1.0, &t.x0_in.t_matmul(&dz0).expect("shape")).expect("shape");
    grads.mlp_b.axpy(1.0, &column_sum(&dz0)).expect("shape");
    loss
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(
    p: &ModelParams,
    batch: &[&Graph],
    wrt: GradTarget<'_>,
) -> Result<(f64, GradSet)> {
    let combined;
    let at = match wrt {
        GradTarget::All => p,
        GradTarget::SparseThroughSum { base } => {
            combined = combine(base, p)?;
            &combined
        }
    };
    let arch = at.arch();
    arch.validate()?;
    at.check_shapes(&arch)?;
    if batch.is_empty() {
        return Err(GnnError::EmptyBatch);
    }
    for g in batch {
        check_graph(at, g)?;
        if g.label() >= arch.classes {
            return Err(GnnError::LabelOutOfRange {
                label: g.label(),
                classes: arch.classes,
            });
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = at.zeros_like();
    let mut loss = 0.0;
    for g in batch {
        loss += backward_one(at, g, scale, &mut grads);
    }
    // d(base + s)/ds is the identity, so the gradient carries over unchanged.
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub count: usize,
}

/// Accuracy and mean cross-entropy over a non-empty dataset.
pub fn evaluate(p: &ModelParams, data: &GraphDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(GnnError::EmptyBatch);
    }
    p.check_shapes(&p.arch())?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for g in &data.graphs {
        check_graph(p, g)?;
        if g.label() >= p.arch().classes {
            return Err(GnnError::LabelOutOfRange {
                label: g.label(),
                classes: p.arch().classes,
            });
        }
        let logits = trace(p, g).logits;
        if argmax(&logits) == g.label() {
            correct += 1;
        }
        loss += cross_entropy(&logits, g.label());
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        count: data.len(),
    })
}
