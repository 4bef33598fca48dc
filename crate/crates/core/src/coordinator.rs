//! Residual graph message passing over per-layer updates.
//!
//! Each layer's filtered update is flattened into one row of a node-feature
//! matrix `H` (L x F). A step computes `H + act(S H Theta)` with `S` the
//! self-loop-inclusive normalised adjacency, and after `T` steps every row is
//! mapped back through a shared `W_o` and reshaped to the layer's shape.
//! When layers have different shapes, a fixed orthonormal projection brings
//! every flattened update to a common width and its transpose maps back.
//!
//! Coordination is a training-time device only: nothing here is needed to
//! evaluate a merged network.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::FilteredUpdate;
use crate::autodiff::{Activation, SparseRows, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::matrix::Matrix;
use crate::smoothing::UpdateStack;

pub const DEFAULT_DEPTH: usize = 1;
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorParams {
    /// One `F x F` matrix per message-passing step.
    pub theta: Vec<Matrix>,
    /// Shared `F x F` output map.
    pub w_out: Matrix,
    pub activation: Activation,
}

impl CoordinatorParams {
    /// `Theta ~ N(0, 0.01^2)`, `W_o = I + N(0, 0.01^2)`.
    pub fn init<R: Rng + ?Sized>(
        width: usize,
        depth: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let theta = (0..depth)
            .map(|_| Matrix::random_normal(width, width, INIT_STD, rng))
            .collect();
        let w_out = Matrix::identity(width)
            .add(&Matrix::random_normal(width, width, INIT_STD, rng))
            .expect("same shape");
        Self {
            theta,
            w_out,
            activation,
        }
    }

    /// Zero `Theta`, identity `W_o`: the coordinator passes updates through.
    pub fn identity(width: usize, depth: usize, activation: Activation) -> Self {
        Self {
            theta: vec![Matrix::zeros(width, width); depth],
            w_out: Matrix::identity(width),
            activation,
        }
    }

    pub fn depth(&self) -> usize {
        self.theta.len()
    }

    pub fn width(&self) -> usize {
        self.w_out.rows()
    }

    pub fn trainable_params(&self) -> usize {
        self.theta.iter().map(Matrix::len).sum::<usize>() + self.w_out.len()
    }

    fn validate(&self) -> Result<()> {
        let f = self.w_out.rows();
        if self.w_out.cols() != f {
            return Err(Error::dim("coordinator W_o", self.w_out.shape(), (f, f)));
        }
        if let Some(t) = self.theta.iter().find(|t| t.shape() != (f, f)) {
            return Err(Error::dim("coordinator theta", t.shape(), (f, f)));
        }
        Ok(())
    }
}

/// Fixed per-layer maps between flattened updates and the shared feature
/// width. Columns of each projection are orthonormal, so the transpose is
/// the pseudo-inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeProjection {
    pub shapes: Vec<(usize, usize)>,
    /// `(d_l * k_l) x F` per layer.
    pub down: Vec<Matrix>,
}

impl ShapeProjection {
    pub fn random<R: Rng + ?Sized>(shapes: &[(usize, usize)], rng: &mut R) -> Result<Self> {
        let width = shapes
            .iter()
            .map(|(d, k)| d * k)
            .min()
            .ok_or_else(|| Error::Config("no layer shapes".into()))?;
        let down = shapes
            .iter()
            .map(|(d, k)| {
                let g = Matrix::random_normal(d * k, width, 1.0, rng);
                let q = g.to_nalgebra().qr().q();
                Matrix::from_nalgebra(&q.columns(0, width).into_owned())
            })
            .collect();
        Ok(Self {
            shapes: shapes.to_vec(),
            down,
        })
    }

    pub fn width(&self) -> usize {
        self.down.first().map_or(0, Matrix::cols)
    }
}

fn feature_width(shapes: &[(usize, usize)], projection: Option<&ShapeProjection>) -> Result<usize> {
    match projection {
        Some(p) => {
            if p.shapes != shapes {
                return Err(Error::Config(
                    "shape projection was built for different layer shapes".into(),
                ));
            }
            Ok(p.width())
        }
        None => {
            let first = shapes
                .first()
                .ok_or_else(|| Error::Config("no layers to coordinate".into()))?;
            if shapes.iter().any(|s| s != first) {
                return Err(Error::Config(
                    "layer update shapes differ and no shape projection is configured".into(),
                ));
            }
            Ok(first.0 * first.1)
        }
    }
}

/// `H + act(S H Theta)`.
pub fn message_pass_step(
    h: &Matrix,
    graph: &LayerGraph,
    theta: &Matrix,
    activation: Activation,
) -> Result<Matrix> {
    if theta.rows() != h.cols() || theta.cols() != h.cols() {
        return Err(Error::dim(
            "message pass theta",
            theta.shape(),
            (h.cols(), h.cols()),
        ));
    }
    let aggregated = graph.normalized_operator().apply(h)?;
    let mixed = aggregated.matmul(theta)?.map(|v| activation.apply(v));
    h.add(&mixed)
}

/// Runs the full coordinator on plain matrices.
pub fn coordinate(
    updates: &[FilteredUpdate],
    graph: &LayerGraph,
    params: &CoordinatorParams,
    projection: Option<&ShapeProjection>,
) -> Result<Vec<FilteredUpdate>> {
    let tape = Tape::new();
    let vars = updates
        .iter()
        .map(|u| tape.constant(u.delta.clone()))
        .collect::<Result<Vec<_>>>()?;
    let cv = CoordinatorVars::constant(&tape, params)?;
    let out = tape_coordinate(&tape, &vars, graph, &cv, projection)?;
    Ok(out
        .into_iter()
        .map(|v| FilteredUpdate {
            delta: tape.value(v),
        })
        .collect())
}

/// Tape handles for coordinator parameters.
#[derive(Debug, Clone)]
pub struct CoordinatorVars {
    pub theta: Vec<Var>,
    pub w_out: Var,
    pub activation: Activation,
}

impl CoordinatorVars {
    /// Records parameters as trainable leaves.
    pub fn record(tape: &Tape, params: &CoordinatorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            theta: params
                .theta
                .iter()
                .map(|t| tape.leaf(t.clone()))
                .collect::<Result<_>>()?,
            w_out: tape.leaf(params.w_out.clone())?,
            activation: params.activation,
        })
    }

    /// Records parameters as constants.
    pub fn constant(tape: &Tape, params: &CoordinatorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            theta: params
                .theta
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<Result<_>>()?,
            w_out: tape.constant(params.w_out.clone())?,
            activation: params.activation,
        })
    }
}

pub fn tape_message_pass_step(
    tape: &Tape,
    h: Var,
    op: Rc<SparseRows>,
    theta: Var,
    activation: Activation,
) -> Result<Var> {
    let aggregated = tape.propagate(op, h)?;
    let mixed = tape.matmul(aggregated, theta)?;
    let act = tape.activate(activation, mixed)?;
    tape.add(h, act)
}

/// Coordinates `d x k` update nodes and returns the final update nodes.
pub fn tape_coordinate(
    tape: &Tape,
    updates: &[Var],
    graph: &LayerGraph,
    vars: &CoordinatorVars,
    projection: Option<&ShapeProjection>,
) -> Result<Vec<Var>> {
    if updates.len() != graph.n_layers() {
        return Err(Error::dim(
            "coordinate",
            (graph.n_layers(), 1),
            (updates.len(), 1),
        ));
    }
    let shapes: Vec<(usize, usize)> = updates.iter().map(|u| tape.shape(*u)).collect();
    let width = feature_width(&shapes, projection)?;
    if tape.shape(vars.w_out) != (width, width) {
        return Err(Error::dim(
            "coordinator W_o",
            tape.shape(vars.w_out),
            (width, width),
        ));
    }

    let mut rows = Vec::with_capacity(updates.len());
    for (l, u) in updates.iter().enumerate() {
        let (d, k) = shapes[l];
        let flat = tape.reshape(*u, 1, d * k)?;
        rows.push(match projection {
            Some(p) => tape.matmul(flat, tape.constant(p.down[l].clone())?)?,
            None => flat,
        });
    }
    let mut h = tape.concat_rows(&rows)?;
    let op = graph.normalized_operator();
    for theta in &vars.theta {
        h = tape_message_pass_step(tape, h, Rc::clone(&op), *theta, vars.activation)?;
    }
    let out = tape.matmul(h, tape.transpose(vars.w_out)?)?;

    let mut finals = Vec::with_capacity(updates.len());
    for (l, (d, k)) in shapes.iter().enumerate() {
        let row = tape.row(out, l)?;
        let back = match projection {
            Some(p) => tape.matmul(row, tape.transpose(tape.constant(p.down[l].clone())?)?)?,
            None => row,
        };
        finals.push(tape.reshape(back, *d, *k)?);
    }
    Ok(finals)
}

/// `(I - gamma (I - S)) U`, blockwise.
pub fn linearized_step(u: &UpdateStack, graph: &LayerGraph, gamma: f64) -> Result<UpdateStack> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if graph.n_layers() != u.layers() {
        return Err(Error::dim(
            "linearized_step",
            (graph.n_layers(), 1),
            (u.layers(), u.width()),
        ));
    }
    let map = Matrix::identity(u.layers()).sub(&graph.normalized_laplacian().scale(gamma))?;
    UpdateStack::new(map.matmul(u.as_matrix())?)
}
