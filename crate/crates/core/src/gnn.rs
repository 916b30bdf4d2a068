//! Edge-GNN precoding policies: the vanilla edge-GNN, the model-based GNN
//! whose first step is a Taylor pseudo-inverse product, and its multi-cell
//! extension, plus the scalar adapter used by energy-efficiency training.
//!
//! Every forward pass is built on an autodiff [`Tape`], so inference and
//! training share one code path. Inference wrappers create a private tape.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ChannelBatch, Grid, MultiCellBatch, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::linalg::ComplexMatrix;
use crate::precoders::{power_normalize, PrecodingMatrix};
use crate::scalar::Real;
use crate::scenario::MultiCellChannel;

/// Offset that keeps the normalizing activation finite at zero input.
pub const ACTIVATION_EPS: f64 = 1e-12;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `X / (||X||_F + eps)` over the whole edge tensor of a sample.
    #[default]
    WholeTensor,
    /// The same normalization applied to each edge vector.
    PerEdge,
    Identity,
}

/// Neighbor pooling of the vanilla edge-GNN.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Vanilla,
    Model,
    ModelMulticell,
}

/// Per-edge hidden representation of one or more stacked samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState<T> {
    grid: Grid,
    features: Array2<T>,
    layer: usize,
}

impl<T: Real> EdgeState<T> {
    pub fn new(grid: Grid, features: Array2<T>, layer: usize) -> Result<Self> {
        if features.nrows() != grid.edges() {
            return Err(invalid(format!("{} feature rows for {} edges", features.nrows(), grid.edges())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("edge features must be finite"));
        }
        Ok(Self { grid, features, layer })
    }

    /// Layer-0 state `[Re h, Im h]` of one channel.
    pub fn from_channel(h: &ComplexMatrix<T>) -> Self {
        let (rows, cols) = h.shape();
        Self { grid: Grid::new(rows, cols), features: crate::autodiff::edges_from_complex(h), layer: 0 }
    }

    /// Layer-0 state of several same-shaped channels stacked as a batch.
    pub fn from_channels(hs: &[ComplexMatrix<T>]) -> Result<Self> {
        let Some(first) = hs.first() else {
            return Err(invalid("empty channel batch"));
        };
        let (rows, cols) = first.shape();
        if hs.iter().any(|h| h.shape() != (rows, cols)) {
            return Err(invalid("batched channels must share one shape"));
        }
        Ok(Self {
            grid: Grid::batched(hs.len(), rows, cols),
            features: crate::autodiff::edges_from_batch(hs),
            layer: 0,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn into_features(self) -> Array2<T> {
        self.features
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Feature pair `t` of sample `b` read as a complex matrix.
    pub fn complex(&self, b: usize, t: usize) -> ComplexMatrix<T> {
        crate::autodiff::complex_from_edges(&self.features, self.grid, b, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaLayer<T> {
    pub s: Array2<T>,
    pub p: Array2<T>,
    pub q: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaParams<T> {
    pub widths: Vec<usize>,
    pub pooling: Pooling,
    pub activation: Activation,
    pub layers: Vec<VanillaLayer<T>>,
}

/// Step-2 weights of one model-GNN layer. `p1` weights the non-neighbor
/// aggregation and is absent when that term is omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayer<T> {
    pub s0: Array2<T>,
    pub s1: Array2<T>,
    pub p0: Array2<T>,
    pub q0: Array2<T>,
    pub q1: Array2<T>,
    pub p1: Option<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<ModelLayer<T>>,
}

/// Multi-cell layer weights, each `J_out x 2 J_in` over `[d, b]`. `_a`
/// aggregates intra-cell edges, `_r` inter-cell edges.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCellLayer<T> {
    pub s: Array2<T>,
    pub p_a: Array2<T>,
    pub p_r: Array2<T>,
    pub q_a: Array2<T>,
    pub q_r: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCellModelParams<T> {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Restricts antenna-side aggregation to the `d` block.
    pub omit_nonneighbor: bool,
    pub layers: Vec<MultiCellLayer<T>>,
}

/// Architecture description used to initialize parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: Arch,
    /// `[J_0, .., J_L]`, both ends equal to 2.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub activation: Activation,
    /// Keep the non-neighbor aggregation term.
    #[serde(default)]
    pub term_c: bool,
}

impl ArchSpec {
    pub fn new(arch: Arch, widths: Vec<usize>) -> Self {
        Self { arch, widths, pooling: Pooling::Sum, activation: Activation::WholeTensor, term_c: false }
    }

    pub fn vanilla_default() -> Self {
        Self::new(Arch::Vanilla, vec![2, 64, 512, 512, 64, 2])
    }

    pub fn model_se_default() -> Self {
        Self::new(Arch::Model, vec![2, 32, 32, 8, 2])
    }

    pub fn model_ee_default() -> Self {
        Self::new(Arch::Model, vec![2, 32, 32, 32, 8, 2])
    }

    pub fn multicell_default() -> Self {
        Self::new(Arch::ModelMulticell, vec![2, 32, 32, 8, 2])
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_term_c(mut self, term_c: bool) -> Self {
        self.term_c = term_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths)?;
        if self.arch != Arch::Vanilla {
            if let Some(w) = self.widths.iter().find(|w| *w % 2 == 1) {
                return Err(invalid(format!("model-GNN widths must be even, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(invalid("need at least an input and an output width"));
    }
    if widths[0] != 2 || widths[widths.len() - 1] != 2 {
        return Err(invalid(format!("first and last widths must be 2, got {widths:?}")));
    }
    if widths.contains(&0) {
        return Err(invalid("widths must be positive"));
    }
    Ok(())
}

fn check_shape<T>(name: &str, m: &Array2<T>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(invalid(format!("{name} is {:?}, expected {rows}x{cols}", m.dim())));
    }
    Ok(())
}

/// Trainable parameters of any GNN architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum GnnParams<T> {
    Vanilla(VanillaParams<T>),
    Model(ModelParams<T>),
    MultiCell(MultiCellModelParams<T>),
}

impl<T: Real> VanillaParams<T> {
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths)?;
        if self.layers.len() + 1 != self.widths.len() {
            return Err(invalid("one layer per consecutive width pair"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (o, i) = (self.widths[l + 1], self.widths[l]);
            check_shape("S", &layer.s, o, i)?;
            check_shape("P", &layer.p, o, i)?;
            check_shape("Q", &layer.q, o, i)?;
        }
        Ok(())
    }
}

impl<T: Real> ModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths)?;
        if self.layers.len() + 1 != self.widths.len() {
            return Err(invalid("one layer per consecutive width pair"));
        }
        if let Some(w) = self.widths.iter().find(|w| *w % 2 == 1) {
            return Err(invalid(format!("model-GNN widths must be even, got {w}")));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (o, i) = (self.widths[l + 1], self.widths[l]);
            for (name, m) in [("S0", &layer.s0), ("S1", &layer.s1), ("P0", &layer.p0), ("Q0", &layer.q0), ("Q1", &layer.q1)] {
                check_shape(name, m, o, i)?;
            }
            if let Some(p1) = &layer.p1 {
                check_shape("P1", p1, o, i)?;
            }
        }
        Ok(())
    }

    pub fn has_term_c(&self) -> bool {
        self.layers.iter().all(|l| l.p1.is_some())
    }
}

impl<T: Real> MultiCellModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths)?;
        if self.layers.len() + 1 != self.widths.len() {
            return Err(invalid("one layer per consecutive width pair"));
        }
        if let Some(w) = self.widths.iter().find(|w| *w % 2 == 1) {
            return Err(invalid(format!("model-GNN widths must be even, got {w}")));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (o, i) = (self.widths[l + 1], 2 * self.widths[l]);
            for (name, m) in [("s", &layer.s), ("p_a", &layer.p_a), ("p_r", &layer.p_r), ("q_a", &layer.q_a), ("q_r", &layer.q_r)] {
                check_shape(name, m, o, i)?;
            }
        }
        Ok(())
    }
}

fn uniform<T: Real>(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// Draws every weight uniformly in `+-sqrt(1 / J_in)`; deterministic per seed.
pub fn init_params<T: Real>(spec: &ArchSpec, seed: u64) -> Result<GnnParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &spec.widths;
    let pairs = w.windows(2).map(|p| (p[1], p[0], (1.0 / p[0] as f64).sqrt()));
    Ok(match spec.arch {
        Arch::Vanilla => GnnParams::Vanilla(VanillaParams {
            widths: w.clone(),
            pooling: spec.pooling,
            activation: spec.activation,
            layers: pairs
                .map(|(o, i, b)| VanillaLayer {
                    s: uniform(o, i, b, &mut rng),
                    p: uniform(o, i, b, &mut rng),
                    q: uniform(o, i, b, &mut rng),
                })
                .collect(),
        }),
        Arch::Model => GnnParams::Model(ModelParams {
            widths: w.clone(),
            activation: spec.activation,
            layers: pairs
                .map(|(o, i, b)| ModelLayer {
                    s0: uniform(o, i, b, &mut rng),
                    s1: uniform(o, i, b, &mut rng),
                    p0: uniform(o, i, b, &mut rng),
                    q0: uniform(o, i, b, &mut rng),
                    q1: uniform(o, i, b, &mut rng),
                    p1: spec.term_c.then(|| uniform(o, i, b, &mut rng)),
                })
                .collect(),
        }),
        Arch::ModelMulticell => GnnParams::MultiCell(MultiCellModelParams {
            widths: w.clone(),
            activation: spec.activation,
            omit_nonneighbor: !spec.term_c,
            layers: pairs
                .map(|(o, i, b)| MultiCellLayer {
                    s: uniform(o, 2 * i, b, &mut rng),
                    p_a: uniform(o, 2 * i, b, &mut rng),
                    p_r: uniform(o, 2 * i, b, &mut rng),
                    q_a: uniform(o, 2 * i, b, &mut rng),
                    q_r: uniform(o, 2 * i, b, &mut rng),
                })
                .collect(),
        }),
    })
}

/// Applies the activation on a tape; `block` is the per-sample edge count.
pub fn activate<T: Real>(t: &Tape<T>, x: Var, grid: Grid, act: Activation) -> Var {
    match act {
        Activation::WholeTensor => t.normalize(x, grid.sample_edges(), T::one(), T::lit(ACTIVATION_EPS)),
        Activation::PerEdge => t.normalize(x, 1, T::one(), T::lit(ACTIVATION_EPS)),
        Activation::Identity => x,
    }
}

fn pool_term<T: Real>(t: &Tape<T>, x: Var, w: Var, grid: Grid, along_rows: bool, pooling: Pooling) -> Var {
    // Linear pools commute with the weight, so sum first and multiply the
    // (fewer) pooled rows.
    let (count, total, spread) = if along_rows {
        let s = t.sum_rows(x, grid, grid.rows);
        (grid.rows, s, t.broadcast_rows(t.matmul_nt(s, w), grid, grid.rows))
    } else {
        let s = t.sum_cols(x, grid, grid.cols);
        (grid.cols, s, t.broadcast_cols(t.matmul_nt(s, w), grid, grid.cols))
    };
    let _ = total;
    match pooling {
        Pooling::Max => t.max_pool_excl(t.matmul_nt(x, w), grid, along_rows),
        Pooling::Sum | Pooling::Mean => {
            let excl = t.sub(spread, t.matmul_nt(x, w));
            if pooling == Pooling::Mean && count > 1 {
                t.scale(excl, T::one() / T::from_usize_lossy(count - 1))
            } else {
                excl
            }
        }
    }
}

/// One vanilla layer on a tape: `S d + PL_{i != n}(P d_ik) + PL_{j != k}(Q d_nj)`
/// followed by `act`. `w` holds `[S, P, Q]`.
pub fn vanilla_layer_tape<T: Real>(t: &Tape<T>, x: Var, grid: Grid, w: &[Var], pooling: Pooling, act: Activation) -> Var {
    let own = t.matmul_nt(x, w[0]);
    let p = pool_term(t, x, w[1], grid, true, pooling);
    let q = pool_term(t, x, w[2], grid, false, pooling);
    activate(t, t.add_all(&[own, p, q]), grid, act)
}

/// Step 1 on a tape: `[D, D (H^H D)]` per complex feature pair, with the
/// Taylor product taken over row groups of `group` antennas.
pub fn model_step1_tape<T: Real>(t: &Tape<T>, x: Var, h: ChannelBatch<T>, grid: Grid, group: usize) -> (Var, Var) {
    let b = t.taylor_product(x, h, grid, group);
    (x, b)
}

/// One single-cell model layer on a tape. `w` holds
/// `[S0, S1, P0, Q0, Q1]` and, when `omit_c` is false, `P1`.
pub fn model_layer_tape<T: Real>(
    t: &Tape<T>,
    x: Var,
    h: ChannelBatch<T>,
    grid: Grid,
    w: &[Var],
    omit_c: bool,
    act: Activation,
) -> Var {
    let (d, b) = model_step1_tape(t, x, h, grid, grid.rows);
    let own = t.add(t.matmul_nt(d, w[0]), t.matmul_nt(b, w[1]));
    let p = t.broadcast_rows(t.matmul_nt(t.sum_rows(d, grid, grid.rows), w[2]), grid, grid.rows);
    let q_d = t.matmul_nt(t.sum_cols(d, grid, grid.cols), w[3]);
    let q_b = t.matmul_nt(t.sum_cols(b, grid, grid.cols), w[4]);
    let q = t.broadcast_cols(t.add(q_d, q_b), grid, grid.cols);
    let mut terms = vec![own, p, q];
    if !omit_c {
        terms.push(t.broadcast_rows(t.matmul_nt(t.sum_rows(b, grid, grid.rows), w[5]), grid, grid.rows));
    }
    activate(t, t.add_all(&terms), grid, act)
}

/// Aggregation over one axis of a multi-cell grid split into `cells` equal
/// groups. Along rows (antennas), `wa` weights the intra-cell edges of the
/// edge's user, i.e. the antennas of the user's own BS; along columns
/// (users), the intra-cell edges of the edge's antenna. `wr` weights the rest.
fn split_aggregate<T: Real>(t: &Tape<T>, c: Var, wa: Var, wr: Var, grid: Grid, cells: usize, along_rows: bool) -> Var {
    let diff = t.sub(wa, wr);
    if along_rows {
        let (n, k) = (grid.rows / cells, grid.cols / cells);
        let idx: Vec<usize> = (0..grid.batch)
            .flat_map(|b| (0..grid.cols).map(move |u| (b * cells + u / k) * grid.cols + u))
            .collect();
        let own = t.gather_rows(t.sum_rows(c, grid, n), Arc::new(idx));
        let own = t.broadcast_rows(t.matmul_nt(own, diff), grid, grid.rows);
        let all = t.broadcast_rows(t.matmul_nt(t.sum_rows(c, grid, grid.rows), wr), grid, grid.rows);
        t.add(own, all)
    } else {
        let (n, k) = (grid.rows / cells, grid.cols / cells);
        let idx: Vec<usize> = (0..grid.batch)
            .flat_map(|b| (0..grid.rows).map(move |a| (b * grid.rows + a) * cells + a / n))
            .collect();
        let own = t.gather_rows(t.sum_cols(c, grid, k), Arc::new(idx));
        let own = t.broadcast_cols(t.matmul_nt(own, diff), grid, grid.cols);
        let all = t.broadcast_cols(t.matmul_nt(t.sum_cols(c, grid, grid.cols), wr), grid, grid.cols);
        t.add(own, all)
    }
}

/// One multi-cell model layer on a tape over the `MN x MK` grid of every
/// antenna against every user. `h` holds each sample's full grid channel and
/// `w` is `[s, p_a, p_r, q_a, q_r]`.
#[allow(clippy::too_many_arguments)]
pub fn multicell_layer_tape<T: Real>(
    t: &Tape<T>,
    x: Var,
    h: ChannelBatch<T>,
    grid: Grid,
    cells: usize,
    w: &[Var],
    omit_nonneighbor: bool,
    act: Activation,
) -> Var {
    let j = t.shape(x).1;
    let (d, b) = model_step1_tape(t, x, h, grid, grid.rows / cells);
    let c = t.concat_cols(d, b);
    let own = t.matmul_nt(c, w[0]);
    let p = if omit_nonneighbor {
        let (pa, pr) = (t.slice_cols(w[1], 0, j), t.slice_cols(w[2], 0, j));
        split_aggregate(t, d, pa, pr, grid, cells, true)
    } else {
        split_aggregate(t, c, w[1], w[2], grid, cells, true)
    };
    let q = split_aggregate(t, c, w[3], w[4], grid, cells, false);
    activate(t, t.add_all(&[own, p, q]), grid, act)
}

/// Row indices of the intra-cell edges `(BS i, n) -> (cell i, k)` of every
/// sample, ordered sample, BS, antenna, user.
fn intra_cell_rows(batch: usize, cells: usize, n: usize, k: usize) -> Vec<usize> {
    let (rows, cols) = (cells * n, cells * k);
    let mut idx = Vec::with_capacity(batch * cells * n * k);
    for b in 0..batch {
        for i in 0..cells {
            for a in 0..n {
                for u in 0..k {
                    idx.push((b * rows + i * n + a) * cols + i * k + u);
                }
            }
        }
    }
    idx
}

fn hidden_act(act: Activation, layer: usize, layers: usize) -> Activation {
    if layer + 1 == layers {
        Activation::Identity
    } else {
        act
    }
}

fn check_batch<T: Real>(channels: &[MultiCellChannel<T>]) -> Result<(usize, usize, usize)> {
    let Some(first) = channels.first() else {
        return Err(invalid("empty channel batch"));
    };
    let dims = (first.cells(), first.antennas(), first.users());
    if channels.iter().any(|h| (h.cells(), h.antennas(), h.users()) != dims) {
        return Err(invalid("batched channels must share one shape"));
    }
    Ok(dims)
}

impl<T: Real> GnnParams<T> {
    pub fn arch(&self) -> Arch {
        match self {
            GnnParams::Vanilla(_) => Arch::Vanilla,
            GnnParams::Model(_) => Arch::Model,
            GnnParams::MultiCell(_) => Arch::ModelMulticell,
        }
    }

    pub fn widths(&self) -> &[usize] {
        match self {
            GnnParams::Vanilla(p) => &p.widths,
            GnnParams::Model(p) => &p.widths,
            GnnParams::MultiCell(p) => &p.widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GnnParams::Vanilla(p) => p.validate(),
            GnnParams::Model(p) => p.validate(),
            GnnParams::MultiCell(p) => p.validate(),
        }
    }

    /// Weight matrices in declaration order.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        match self {
            GnnParams::Vanilla(p) => p.layers.iter().flat_map(|l| [&l.s, &l.p, &l.q]).collect(),
            GnnParams::Model(p) => p
                .layers
                .iter()
                .flat_map(|l| [Some(&l.s0), Some(&l.s1), Some(&l.p0), Some(&l.q0), Some(&l.q1), l.p1.as_ref()])
                .flatten()
                .collect(),
            GnnParams::MultiCell(p) => p.layers.iter().flat_map(|l| [&l.s, &l.p_a, &l.p_r, &l.q_a, &l.q_r]).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        match self {
            GnnParams::Vanilla(p) => p.layers.iter_mut().flat_map(|l| [&mut l.s, &mut l.p, &mut l.q]).collect(),
            GnnParams::Model(p) => p
                .layers
                .iter_mut()
                .flat_map(|l| {
                    [Some(&mut l.s0), Some(&mut l.s1), Some(&mut l.p0), Some(&mut l.q0), Some(&mut l.q1), l.p1.as_mut()]
                })
                .flatten()
                .collect(),
            GnnParams::MultiCell(p) => p
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.s, &mut l.p_a, &mut l.p_r, &mut l.q_a, &mut l.q_r])
                .collect(),
        }
    }

    /// Same parameters in another floating-point precision.
    pub fn cast<U: Real>(&self) -> GnnParams<U> {
        match self {
            GnnParams::Vanilla(p) => GnnParams::Vanilla(VanillaParams {
                widths: p.widths.clone(),
                pooling: p.pooling,
                activation: p.activation,
                layers: p.layers.iter().map(|l| VanillaLayer { s: cast(&l.s), p: cast(&l.p), q: cast(&l.q) }).collect(),
            }),
            GnnParams::Model(p) => GnnParams::Model(ModelParams {
                widths: p.widths.clone(),
                activation: p.activation,
                layers: p
                    .layers
                    .iter()
                    .map(|l| ModelLayer {
                        s0: cast(&l.s0),
                        s1: cast(&l.s1),
                        p0: cast(&l.p0),
                        q0: cast(&l.q0),
                        q1: cast(&l.q1),
                        p1: l.p1.as_ref().map(cast),
                    })
                    .collect(),
            }),
            GnnParams::MultiCell(p) => GnnParams::MultiCell(MultiCellModelParams {
                widths: p.widths.clone(),
                activation: p.activation,
                omit_nonneighbor: p.omit_nonneighbor,
                layers: p
                    .layers
                    .iter()
                    .map(|l| MultiCellLayer {
                        s: cast(&l.s),
                        p_a: cast(&l.p_a),
                        p_r: cast(&l.p_r),
                        q_a: cast(&l.q_a),
                        q_r: cast(&l.q_r),
                    })
                    .collect(),
            }),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Registers every weight as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var> {
        self.tensors().into_iter().map(|m| tape.leaf(m.clone())).collect()
    }

    /// Raw (unnormalized) precoder edges `(B M N K) x 2` for a batch of
    /// same-shaped channels. `vars` comes from [`GnnParams::bind`].
    pub fn forward_tape(&self, tape: &Tape<T>, vars: &[Var], channels: &MultiCellBatch<T>) -> Result<Var> {
        self.validate()?;
        let (cells, n, k) = check_batch(channels)?;
        let batch = channels.len();
        match self {
            GnnParams::Vanilla(p) => {
                single_cell_only(cells)?;
                let hs: Vec<_> = channels.iter().map(|h| h.block(0, 0).clone()).collect();
                let grid = Grid::batched(batch, n, k);
                let mut x = tape.constant(crate::autodiff::edges_from_batch(&hs));
                for (l, w) in vars.chunks(3).enumerate() {
                    x = vanilla_layer_tape(tape, x, grid, w, p.pooling, hidden_act(p.activation, l, p.layers.len()));
                }
                Ok(x)
            }
            GnnParams::Model(p) => {
                single_cell_only(cells)?;
                let hs: ChannelBatch<T> = Arc::new(channels.iter().map(|h| h.block(0, 0).clone()).collect());
                let grid = Grid::batched(batch, n, k);
                let mut x = tape.constant(crate::autodiff::edges_from_batch(&hs));
                let mut at = 0;
                for (l, layer) in p.layers.iter().enumerate() {
                    let count = if layer.p1.is_some() { 6 } else { 5 };
                    let w = &vars[at..at + count];
                    at += count;
                    let act = hidden_act(p.activation, l, p.layers.len());
                    x = model_layer_tape(tape, x, hs.clone(), grid, w, layer.p1.is_none(), act);
                }
                Ok(x)
            }
            GnnParams::MultiCell(p) => {
                let grids: ChannelBatch<T> = Arc::new(channels.iter().map(|h| h.grid()).collect());
                let grid = Grid::batched(batch, cells * n, cells * k);
                let mut x = tape.constant(crate::autodiff::edges_from_batch(&grids));
                for (l, w) in vars.chunks(5).enumerate() {
                    let act = hidden_act(p.activation, l, p.layers.len());
                    x = multicell_layer_tape(tape, x, grids.clone(), grid, cells, w, p.omit_nonneighbor, act);
                }
                if cells == 1 {
                    return Ok(x);
                }
                Ok(tape.gather_rows(x, Arc::new(intra_cell_rows(batch, cells, n, k))))
            }
        }
    }

    /// Per-BS power-normalized precoders for one channel.
    pub fn precode(&self, h: &MultiCellChannel<T>, p_max: T) -> Result<Vec<PrecodingMatrix<T>>> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let batch = Arc::new(vec![h.clone()]);
        let out = tape.value(self.forward_tape(&tape, &vars, &batch)?);
        crate::autodiff::precoders_from_edges(&out, &batch)
            .remove(0)
            .iter()
            .map(|v| power_normalize(v, p_max))
            .collect()
    }

    /// Single-cell convenience wrapper around [`GnnParams::precode`].
    pub fn precode_single(&self, h: &ComplexMatrix<T>, p_max: T) -> Result<PrecodingMatrix<T>> {
        Ok(self.precode(&MultiCellChannel::single(h.clone()), p_max)?.remove(0))
    }
}

fn cast<T: Real, U: Real>(m: &Array2<T>) -> Array2<U> {
    m.mapv(|v| U::lit(v.as_f64()))
}

fn single_cell_only(cells: usize) -> Result<()> {
    if cells != 1 {
        return Err(invalid(format!("single-cell architecture given {cells} cells")));
    }
    Ok(())
}

fn run_layer<T: Real>(
    d: &EdgeState<T>,
    tensors: &[&Array2<T>],
    f: impl FnOnce(&Tape<T>, Var, &[Var]) -> Var,
) -> Result<EdgeState<T>> {
    let tape = Tape::new();
    let x = tape.constant(d.features.clone());
    let w: Vec<Var> = tensors.iter().map(|m| tape.leaf((*m).clone())).collect();
    let y = f(&tape, x, &w);
    Ok(EdgeState { grid: d.grid, features: tape.value(y), layer: d.layer + 1 })
}

fn check_in_width<T>(d: &EdgeState<T>, w: &Array2<T>, factor: usize) -> Result<()>
where
    T: Real,
{
    if w.ncols() != factor * d.width() {
        return Err(invalid(format!("layer expects input width {}, got {}", w.ncols() / factor, d.width())));
    }
    Ok(())
}

/// One vanilla edge-GNN layer.
pub fn vanilla_layer_forward<T: Real>(
    d: &EdgeState<T>,
    layer: &VanillaLayer<T>,
    pooling: Pooling,
    act: Activation,
) -> Result<EdgeState<T>> {
    check_in_width(d, &layer.s, 1)?;
    let (o, i) = layer.s.dim();
    check_shape("P", &layer.p, o, i)?;
    check_shape("Q", &layer.q, o, i)?;
    let grid = d.grid;
    run_layer(d, &[&layer.s, &layer.p, &layer.q], |t, x, w| vanilla_layer_tape(t, x, grid, w, pooling, act))
}

/// Vanilla edge-GNN followed by output power normalization.
pub fn vanilla_forward<T: Real>(h: &ComplexMatrix<T>, params: &VanillaParams<T>, p_max: T) -> Result<PrecodingMatrix<T>> {
    GnnParams::Vanilla(params.clone()).precode_single(h, p_max)
}

fn channels_for<T: Real>(d: &EdgeState<T>, h: &[ComplexMatrix<T>], rows: usize, cols: usize) -> Result<ChannelBatch<T>> {
    if h.len() != d.grid.batch || h.iter().any(|m| m.shape() != (rows, cols)) {
        return Err(invalid("one channel of the grid shape per sample is required"));
    }
    Ok(Arc::new(h.to_vec()))
}

/// Step 1: `[D, B]` with `B_t = D_t (H^H D_t)` for every complex feature
/// pair `t`; output width `2 J`. `h` holds one channel per stacked sample.
pub fn model_step1<T: Real>(d: &EdgeState<T>, h: &[ComplexMatrix<T>]) -> Result<EdgeState<T>> {
    if d.width() % 2 == 1 {
        return Err(invalid(format!("Step 1 needs an even width, got {}", d.width())));
    }
    let hs = channels_for(d, h, d.grid.rows, d.grid.cols)?;
    let grid = d.grid;
    run_layer(d, &[], |t, x, _| {
        let (dv, b) = model_step1_tape(t, x, hs, grid, grid.rows);
        t.concat_cols(dv, b)
    })
    .map(|mut s| {
        s.layer = d.layer;
        s
    })
}

/// One single-cell model-GNN layer (Step 1 then Step 2).
pub fn model_layer_forward<T: Real>(
    d: &EdgeState<T>,
    h: &[ComplexMatrix<T>],
    layer: &ModelLayer<T>,
    omit_c: bool,
    act: Activation,
) -> Result<EdgeState<T>> {
    if d.width() % 2 == 1 {
        return Err(invalid(format!("Step 1 needs an even width, got {}", d.width())));
    }
    check_in_width(d, &layer.s0, 1)?;
    let (o, i) = layer.s0.dim();
    for (name, m) in [("S1", &layer.s1), ("P0", &layer.p0), ("Q0", &layer.q0), ("Q1", &layer.q1)] {
        check_shape(name, m, o, i)?;
    }
    let mut tensors = vec![&layer.s0, &layer.s1, &layer.p0, &layer.q0, &layer.q1];
    if !omit_c {
        let p1 = layer.p1.as_ref().ok_or_else(|| invalid("term (c) requested but P1 is absent"))?;
        check_shape("P1", p1, o, i)?;
        tensors.push(p1);
    }
    let hs = channels_for(d, h, d.grid.rows, d.grid.cols)?;
    let grid = d.grid;
    run_layer(d, &tensors, |t, x, w| model_layer_tape(t, x, hs, grid, w, omit_c, act))
}

/// Model-GNN followed by output power normalization.
pub fn model_forward<T: Real>(
    h: &ComplexMatrix<T>,
    params: &ModelParams<T>,
    p_max: T,
    omit_c: bool,
) -> Result<PrecodingMatrix<T>> {
    let mut p = params.clone();
    if omit_c {
        p.layers.iter_mut().for_each(|l| l.p1 = None);
    } else if !p.has_term_c() {
        return Err(invalid("term (c) requested but P1 is absent"));
    }
    GnnParams::Model(p).precode_single(h, p_max)
}

/// One multi-cell model-GNN layer over the `MN x MK` edge grid.
pub fn model_layer_forward_multicell<T: Real>(
    d: &EdgeState<T>,
    h: &[MultiCellChannel<T>],
    layer: &MultiCellLayer<T>,
    omit_nonneighbor: bool,
    act: Activation,
) -> Result<EdgeState<T>> {
    if d.width() % 2 == 1 {
        return Err(invalid(format!("Step 1 needs an even width, got {}", d.width())));
    }
    check_in_width(d, &layer.s, 2)?;
    let (o, i) = layer.s.dim();
    for (name, m) in [("p_a", &layer.p_a), ("p_r", &layer.p_r), ("q_a", &layer.q_a), ("q_r", &layer.q_r)] {
        check_shape(name, m, o, i)?;
    }
    let (cells, n, k) = check_batch(h)?;
    if d.grid.rows != cells * n || d.grid.cols != cells * k {
        return Err(invalid("edge grid does not match the multi-cell channel"));
    }
    let grids: Vec<_> = h.iter().map(|c| c.grid()).collect();
    let hs = channels_for(d, &grids, d.grid.rows, d.grid.cols)?;
    let grid = d.grid;
    run_layer(d, &[&layer.s, &layer.p_a, &layer.p_r, &layer.q_a, &layer.q_r], |t, x, w| {
        multicell_layer_tape(t, x, hs, grid, cells, w, omit_nonneighbor, act)
    })
}

/// Multi-cell model-GNN; returns one normalized precoder per BS.
pub fn multicell_forward<T: Real>(
    h: &MultiCellChannel<T>,
    params: &MultiCellModelParams<T>,
    p_max: T,
) -> Result<Vec<PrecodingMatrix<T>>> {
    GnnParams::MultiCell(params.clone()).precode(h, p_max)
}

/// Weights that turn a single-cell model layer of width 2 into one Taylor
/// pseudo-inverse step `2 D - D H^H D`.
pub fn tgnn_layer<T: Real>() -> ModelLayer<T> {
    let eye = Array2::<T>::eye(2);
    let zero = Array2::<T>::zeros((2, 2));
    ModelLayer {
        s0: eye.mapv(|v| v * T::lit(2.0)),
        s1: eye.mapv(|v| -v),
        p0: zero.clone(),
        q0: zero.clone(),
        q1: zero,
        p1: None,
    }
}

/// Positive scalar map of the user count, `softplus(FNN(K / 10))`, with tanh
/// hidden layers of widths `[1, 16, 16, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleAdapter<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array2<T>>,
}

/// Layer widths of [`ScaleAdapter`].
pub const ADAPTER_WIDTHS: [usize; 4] = [1, 16, 16, 1];

impl<T: Real> ScaleAdapter<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in ADAPTER_WIDTHS.windows(2) {
            let bound = (1.0 / p[0] as f64).sqrt();
            weights.push(uniform(p[1], p[0], bound, &mut rng));
            biases.push(Array2::zeros((1, p[1])));
        }
        Self { weights, biases }
    }

    pub fn cast<U: Real>(&self) -> ScaleAdapter<U> {
        ScaleAdapter { weights: self.weights.iter().map(cast).collect(), biases: self.biases.iter().map(cast).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != 3 || self.biases.len() != 3 {
            return Err(invalid("scale adapter has three layers"));
        }
        for (l, p) in ADAPTER_WIDTHS.windows(2).enumerate() {
            check_shape("adapter weight", &self.weights[l], p[1], p[0])?;
            check_shape("adapter bias", &self.biases[l], 1, p[1])?;
        }
        Ok(())
    }

    /// Weights then biases, layer by layer.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var> {
        self.tensors().into_iter().map(|m| tape.leaf(m.clone())).collect()
    }

    /// `eta_K` as a `1 x 1` tape node.
    pub fn forward_tape(&self, tape: &Tape<T>, vars: &[Var], users: usize) -> Var {
        let mut x = tape.constant(Array2::from_elem((1, 1), T::from_usize_lossy(users) / T::lit(10.0)));
        for (l, wb) in vars.chunks(2).enumerate() {
            x = tape.add_row(tape.matmul_nt(x, wb[0]), wb[1]);
            x = if l + 1 == vars.len() / 2 { tape.softplus(x) } else { tape.tanh(x) };
        }
        x
    }

    pub fn forward(&self, users: usize) -> T {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let y = self.forward_tape(&tape, &vars, users);
        tape.scalar_value(y)
    }
}

/// Error for a zero raw output, mirroring [`power_normalize`].
pub fn degenerate_output() -> Error {
    Error::Degenerate("GNN produced an all-zero precoder".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{taylor_pinv, TaylorInit};
    use crate::scenario::{random_channel, sample_rng};
    use num_complex::Complex;

    fn rand_h(n: usize, k: usize, seed: u64) -> ComplexMatrix<f64> {
        random_channel(n, k, &mut sample_rng(seed, 0))
    }

    fn vanilla(widths: Vec<usize>, pooling: Pooling, seed: u64) -> VanillaParams<f64> {
        match init_params(&ArchSpec::new(Arch::Vanilla, widths).with_pooling(pooling), seed).unwrap() {
            GnnParams::Vanilla(p) => p,
            _ => unreachable!(),
        }
    }

    fn model(widths: Vec<usize>, term_c: bool, seed: u64) -> ModelParams<f64> {
        match init_params(&ArchSpec::new(Arch::Model, widths).with_term_c(term_c), seed).unwrap() {
            GnnParams::Model(p) => p,
            _ => unreachable!(),
        }
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Direct loop evaluation of a vanilla layer before activation.
    fn vanilla_oracle(h: &ComplexMatrix<f64>, l: &VanillaLayer<f64>, pooling: Pooling) -> Array2<f64> {
        let (n, k) = h.shape();
        let d = EdgeState::from_channel(h).into_features();
        let jo = l.s.nrows();
        let mut out = Array2::zeros((n * k, jo));
        let tr = |w: &Array2<f64>, e: usize| w.dot(&d.row(e));
        for a in 0..n {
            for u in 0..k {
                let e = a * k + u;
                let mut v = tr(&l.s, e);
                let pool = |vs: Vec<ndarray::Array1<f64>>| -> ndarray::Array1<f64> {
                    if vs.is_empty() {
                        return ndarray::Array1::zeros(jo);
                    }
                    match pooling {
                        Pooling::Sum => vs.iter().fold(ndarray::Array1::zeros(jo), |acc, x| acc + x),
                        Pooling::Mean => vs.iter().fold(ndarray::Array1::zeros(jo), |acc, x| acc + x) / vs.len() as f64,
                        Pooling::Max => {
                            let mut m = vs[0].clone();
                            for x in &vs[1..] {
                                m.zip_mut_with(x, |a, b| *a = a.max(*b));
                            }
                            m
                        }
                    }
                };
                v += &pool((0..n).filter(|&i| i != a).map(|i| tr(&l.p, i * k + u)).collect());
                v += &pool((0..k).filter(|&j| j != u).map(|j| tr(&l.q, a * k + j)).collect());
                out.row_mut(e).assign(&v);
            }
        }
        out
    }

    #[test]
    fn table_widths() {
        assert_eq!(ArchSpec::model_se_default().widths, vec![2, 32, 32, 8, 2]);
        assert_eq!(ArchSpec::model_ee_default().widths, vec![2, 32, 32, 32, 8, 2]);
        assert_eq!(ArchSpec::vanilla_default().widths, vec![2, 64, 512, 512, 64, 2]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params::<f64>(&ArchSpec::model_se_default(), 3).unwrap();
        let b = init_params::<f64>(&ArchSpec::model_se_default(), 3).unwrap();
        let c = init_params::<f64>(&ArchSpec::model_se_default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let GnnParams::Model(m) = &a else { unreachable!() };
        assert!(m.layers[1].s0.iter().all(|v| v.abs() <= (1.0f64 / 32.0).sqrt()));
    }

    #[test]
    fn odd_model_width_rejected() {
        let err = init_params::<f64>(&ArchSpec::new(Arch::Model, vec![2, 31, 2]), 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(init_params::<f64>(&ArchSpec::new(Arch::Vanilla, vec![2, 31, 2]), 0).is_ok());
        assert!(init_params::<f64>(&ArchSpec::new(Arch::Vanilla, vec![3, 4, 2]), 0).is_err());
    }

    #[test]
    fn vanilla_identity_layer() {
        let h = rand_h(3, 2, 1);
        let d = EdgeState::from_channel(&h);
        let l = VanillaLayer { s: Array2::eye(2), p: Array2::zeros((2, 2)), q: Array2::zeros((2, 2)) };
        let out = vanilla_layer_forward(&d, &l, Pooling::Sum, Activation::Identity).unwrap();
        assert_eq!(out.features(), d.features());
        assert_eq!(out.layer(), 1);
    }

    #[test]
    fn vanilla_without_neighbors() {
        let h = rand_h(1, 1, 2);
        let d = EdgeState::from_channel(&h);
        let p = vanilla(vec![2, 3, 2], Pooling::Sum, 5);
        let out = vanilla_layer_forward(&d, &p.layers[0], Pooling::Sum, Activation::WholeTensor).unwrap();
        let raw = p.layers[0].s.dot(&d.features().row(0));
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in out.features().row(0).iter().zip(raw.iter()) {
            assert!((a - b / (norm + ACTIVATION_EPS)).abs() < 1e-15);
        }
    }

    #[test]
    fn vanilla_matches_loop_oracle() {
        let h = rand_h(4, 3, 6);
        for pooling in [Pooling::Sum, Pooling::Mean, Pooling::Max] {
            let p = vanilla(vec![2, 5, 2], pooling, 7);
            let out = vanilla_layer_forward(&EdgeState::from_channel(&h), &p.layers[0], pooling, Activation::Identity).unwrap();
            assert!(max_diff(out.features(), &vanilla_oracle(&h, &p.layers[0], pooling)) < 1e-13, "{pooling:?}");
        }
    }

    #[test]
    fn vanilla_width_mismatch() {
        let d = EdgeState::from_channel(&rand_h(2, 2, 0));
        let p = vanilla(vec![2, 4, 2], Pooling::Sum, 1);
        assert!(vanilla_layer_forward(&d, &p.layers[1], Pooling::Sum, Activation::Identity).is_err());
    }

    #[test]
    fn vanilla_forward_is_power_normalized() {
        let p = vanilla(vec![2, 8, 2], Pooling::Sum, 9);
        let v = vanilla_forward(&ComplexMatrix::identity(4), &p, 2.0).unwrap();
        assert!((v.power() - 2.0).abs() < 1e-12);
        assert!(v.matrix().is_finite());
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let mut p = vanilla(vec![2, 4, 2], Pooling::Sum, 1);
        for l in &mut p.layers {
            l.s.fill(0.0);
            l.p.fill(0.0);
            l.q.fill(0.0);
        }
        assert!(matches!(vanilla_forward(&rand_h(3, 2, 1), &p, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn step1_matches_matrix_product() {
        let h = rand_h(5, 3, 11);
        let out = model_step1(&EdgeState::from_channel(&h), std::slice::from_ref(&h)).unwrap();
        assert_eq!(out.width(), 4);
        let expect = h.matmul(&h.adjoint_mul(&h).unwrap()).unwrap();
        assert_eq!(out.complex(0, 0), h);
        assert!(out.complex(0, 1).sub(&expect).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn step1_orthonormal_and_zero() {
        let h = ComplexMatrix::from_fn(4, 2, |r, c| if r == c { Complex::new(1.0, 0.0) } else { Complex::new(0.0, 0.0) });
        let out = model_step1(&EdgeState::from_channel(&h), std::slice::from_ref(&h)).unwrap();
        assert_eq!(out.complex(0, 1), h);
        let zero = EdgeState::new(Grid::new(4, 2), Array2::zeros((8, 2)), 0).unwrap();
        let out = model_step1(&zero, std::slice::from_ref(&h)).unwrap();
        assert!(out.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step1_rejects_odd_width() {
        let d = EdgeState::new(Grid::new(2, 2), Array2::zeros((4, 3)), 0).unwrap();
        assert!(model_step1(&d, &[rand_h(2, 2, 0)]).is_err());
    }

    #[test]
    fn tgnn_layer_is_one_taylor_step() {
        let h = rand_h(6, 3, 12);
        let out = model_layer_forward(&EdgeState::from_channel(&h), std::slice::from_ref(&h), &tgnn_layer(), true, Activation::Identity).unwrap();
        let expect = crate::linalg::taylor_pinv_step(&h, &h).unwrap();
        assert!(out.complex(0, 0).sub(&expect).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn stacked_tgnn_layers_track_taylor_trace() {
        let h = rand_h(8, 4, 13);
        let init = crate::linalg::taylor_init(&h, TaylorInit::SpectralScaled);
        let exact = taylor_pinv(&h, 5, TaylorInit::SpectralScaled).unwrap();
        let mut d = EdgeState::from_channel(&init);
        let mut reference = init.clone();
        for _ in 0..5 {
            d = model_layer_forward(&d, std::slice::from_ref(&h), &tgnn_layer(), true, Activation::Identity).unwrap();
            reference = crate::linalg::taylor_pinv_step(&reference, &h).unwrap();
            assert!(d.complex(0, 0).sub(&reference).unwrap().frobenius_norm() < 1e-10);
        }
        assert!(d.complex(0, 0).sub(&exact.approx).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn omit_c_matches_zero_p1() {
        let h = rand_h(4, 3, 14);
        let mut p = model(vec![2, 4, 2], true, 15);
        p.layers[0].p1.as_mut().unwrap().fill(0.0);
        let d = EdgeState::from_channel(&h);
        let hs = std::slice::from_ref(&h);
        let a = model_layer_forward(&d, hs, &p.layers[0], true, Activation::WholeTensor).unwrap();
        let b = model_layer_forward(&d, hs, &p.layers[0], false, Activation::WholeTensor).unwrap();
        assert_eq!(a, b);
    }

    /// Direct loop evaluation of a model layer, term (c) included.
    #[test]
    fn model_layer_matches_loop_oracle() {
        let (n, k) = (3, 2);
        let h = rand_h(n, k, 16);
        let p = model(vec![2, 4, 2], true, 17);
        let l = &p.layers[0];
        let d = EdgeState::from_channel(&h).into_features();
        let bm = h.matmul(&h.adjoint_mul(&h).unwrap()).unwrap();
        let b = EdgeState::from_channel(&bm).into_features();
        let mut expect = Array2::zeros((n * k, 4));
        for a in 0..n {
            for u in 0..k {
                let e = a * k + u;
                let mut v = l.s0.dot(&d.row(e)) + l.s1.dot(&b.row(e));
                for i in 0..n {
                    v += &l.p0.dot(&d.row(i * k + u));
                    v += &l.p1.as_ref().unwrap().dot(&b.row(i * k + u));
                }
                for j in 0..k {
                    v += &l.q0.dot(&d.row(a * k + j));
                    v += &l.q1.dot(&b.row(a * k + j));
                }
                expect.row_mut(e).assign(&v);
            }
        }
        let out = model_layer_forward(&EdgeState::from_channel(&h), std::slice::from_ref(&h), l, false, Activation::Identity).unwrap();
        assert!(max_diff(out.features(), &expect) < 1e-12);
    }

    #[test]
    fn model_forward_smoke() {
        let h = rand_h(8, 4, 18);
        let p = model(vec![2, 32, 32, 8, 2], false, 19);
        let v = model_forward(&h, &p, 1.0, true).unwrap();
        assert!(v.matrix().is_finite());
        assert!((v.power() - 1.0).abs() < 1e-12);
        assert!(model_forward(&h, &p, 1.0, false).is_err());
    }

    #[test]
    fn batched_forward_matches_single() {
        let p = init_params::<f64>(&ArchSpec::model_se_default(), 20).unwrap();
        let hs: Vec<_> = (0..3).map(|s| MultiCellChannel::single(rand_h(5, 3, 30 + s))).collect();
        let tape = Tape::new();
        let vars = p.bind(&tape);
        let out = tape.value(p.forward_tape(&tape, &vars, &Arc::new(hs.clone())).unwrap());
        let split = crate::autodiff::precoders_from_edges(&out, &hs);
        for (b, h) in hs.iter().enumerate() {
            let single = p.precode(h, 1.0).unwrap().remove(0);
            let batched = power_normalize(&split[b][0], 1.0).unwrap();
            assert!(single.matrix().sub(batched.matrix()).unwrap().frobenius_norm() < 1e-12);
        }
    }

    fn multicell(widths: Vec<usize>, seed: u64) -> MultiCellModelParams<f64> {
        match init_params(&ArchSpec::new(Arch::ModelMulticell, widths), seed).unwrap() {
            GnnParams::MultiCell(p) => p,
            _ => unreachable!(),
        }
    }

    #[test]
    fn multicell_reduces_to_single_cell() {
        let h = rand_h(4, 3, 21);
        let m = model(vec![2, 6, 2], true, 22);
        let l = &m.layers[0];
        let cat = |a: &Array2<f64>, b: &Array2<f64>| ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let junk = uniform::<f64>(6, 4, 1.0, &mut rng);
        let ml = MultiCellLayer {
            s: cat(&l.s0, &l.s1),
            p_a: cat(&l.p0, l.p1.as_ref().unwrap()),
            p_r: junk.clone(),
            q_a: cat(&l.q0, &l.q1),
            q_r: junk,
        };
        let d = EdgeState::from_channel(&h);
        let mc = MultiCellChannel::single(h.clone());
        for omit in [true, false] {
            let single = model_layer_forward(&d, std::slice::from_ref(&h), l, omit, Activation::WholeTensor).unwrap();
            let multi = model_layer_forward_multicell(&d, std::slice::from_ref(&mc), &ml, omit, Activation::WholeTensor).unwrap();
            assert!(max_diff(single.features(), multi.features()) < 1e-13);
        }
    }

    #[test]
    fn multicell_decouples_without_cross_links() {
        let (n, k) = (3, 2);
        let h1 = rand_h(n, k, 24);
        let h2 = rand_h(n, k, 25);
        let zero = ComplexMatrix::zeros(n, k);
        let mc = MultiCellChannel::new(2, vec![h1.clone(), zero.clone(), zero, h2.clone()]).unwrap();
        let mut p = multicell(vec![2, 4, 2], 26);
        for l in &mut p.layers {
            l.p_r.fill(0.0);
            l.q_r.fill(0.0);
        }
        // Whole-tensor normalization couples cells through the norm, so
        // compare without it.
        p.activation = Activation::PerEdge;
        let joint = multicell_forward(&mc, &p, 1.0).unwrap();
        for (i, h) in [h1, h2].into_iter().enumerate() {
            let solo = multicell_forward(&MultiCellChannel::single(h), &p, 1.0).unwrap();
            assert!(joint[i].matrix().sub(solo[0].matrix()).unwrap().frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn multicell_cell_permutation() {
        let mut rng = sample_rng(27, 0);
        let h = MultiCellChannel::<f64>::random(3, 3, 2, &mut rng).unwrap();
        let p = multicell(vec![2, 6, 4, 2], 28);
        let base = multicell_forward(&h, &p, 1.0).unwrap();
        let perm = [2, 0, 1];
        let ants: Vec<Vec<usize>> = vec![vec![1, 2, 0], vec![0, 1, 2], vec![2, 1, 0]];
        let users: Vec<Vec<usize>> = vec![vec![1, 0], vec![0, 1], vec![1, 0]];
        let out = multicell_forward(&h.permute(&perm, &ants, &users), &p, 1.0).unwrap();
        for c in 0..3 {
            let expect = base[perm[c]].matrix().permute(&ants[c], &users[c]);
            assert!(out[c].matrix().sub(&expect).unwrap().frobenius_norm() < 1e-10);
        }
    }

    #[test]
    fn single_cell_arch_rejects_multicell_input() {
        let mut rng = sample_rng(1, 0);
        let h = MultiCellChannel::<f64>::random(2, 2, 2, &mut rng).unwrap();
        let p = init_params::<f64>(&ArchSpec::model_se_default(), 0).unwrap();
        assert!(p.precode(&h, 1.0).is_err());
    }

    #[test]
    fn adapter_range_and_constant() {
        let a = ScaleAdapter::<f64>::new(3);
        a.validate().unwrap();
        for k in 1..=64 {
            let eta = a.forward(k);
            assert!(eta > 0.0 && eta < 10.0);
        }
        let mut z = a.clone();
        z.weights[2].fill(0.0);
        z.biases[2].fill(0.7);
        let expect = (1.0f64 + 0.7f64.exp()).ln();
        for k in [1, 5, 30] {
            assert!((z.forward(k) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn tensor_order_round_trip() {
        let mut p = init_params::<f64>(&ArchSpec::model_se_default().with_term_c(true), 1).unwrap();
        assert_eq!(p.tensors().len(), 4 * 6);
        let count = p.parameter_count();
        for m in p.tensors_mut() {
            m.fill(1.0);
        }
        assert_eq!(p.tensors().iter().map(|m| m.sum()).sum::<f64>() as usize, count);
    }
}
