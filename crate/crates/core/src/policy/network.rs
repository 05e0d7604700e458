//! Parameter containers for the nominal MLP and the input-convex network,
//! with a taped batch forward for training and a plain forward for inference.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.1;

pub(crate) fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn init(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        Dense {
            w: gaussian(rng, inputs, outputs),
            b: gaussian(rng, 1, outputs),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.w.rows(), self.w.cols());
        let mut y = self.b.data().to_vec();
        for i in 0..n_in {
            let xi = x[i];
            for (yj, wij) in y.iter_mut().zip(&self.w.data()[i * n_out..(i + 1) * n_out]) {
                *yj += xi * wij;
            }
        }
        y
    }
}

/// Layer as stored in model files: `w` is row-major `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

pub(crate) fn matrix_to_json(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub(crate) fn matrix_from_json(rows: &[Vec<f64>], shape: [usize; 2], what: &str) -> Result<Tensor> {
    let t = Tensor::from_rows(rows).map_err(|_| Error::Model(format!("{what}: ragged matrix")))?;
    if t.shape() != shape {
        return Err(Error::Model(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            t.shape()
        )));
    }
    if !t.all_finite() {
        return Err(Error::Model(format!("{what}: non-finite weight")));
    }
    Ok(t)
}

impl Dense {
    pub(crate) fn to_json(&self) -> LayerJson {
        LayerJson {
            w: matrix_to_json(&self.w),
            b: self.b.data().to_vec(),
        }
    }

    pub(crate) fn from_json(j: &LayerJson, inputs: usize, outputs: usize, what: &str) -> Result<Self> {
        Ok(Dense {
            w: matrix_from_json(&j.w, [inputs, outputs], what)?,
            b: matrix_from_json(&[j.b.clone()], [1, outputs], what)?,
        })
    }
}

/// `d -> hidden -> hidden -> d` with `tanh` hidden activations and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        Mlp {
            layers: vec![
                Dense::init(rng, dim, hidden),
                Dense::init(rng, hidden, hidden),
                Dense::init(rng, hidden, dim),
            ],
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        let z = |i, o| Dense {
            w: Tensor::zeros(i, o),
            b: Tensor::zeros(1, o),
        };
        Mlp {
            layers: vec![z(dim, hidden), z(hidden, hidden), z(hidden, dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// `vars` are the bound parameters in [`Mlp::params`] order.
    pub fn forward_taped(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, pair) in vars.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = if k < last { tape.tanh(z) } else { z };
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if k < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    }

    pub(crate) fn to_json(&self) -> Vec<LayerJson> {
        self.layers.iter().map(Dense::to_json).collect()
    }

    pub(crate) fn from_json(layers: &[LayerJson], dim: usize) -> Result<Self> {
        if layers.len() != 3 {
            return Err(Error::Model(format!(
                "expected 3 layers, found {}",
                layers.len()
            )));
        }
        let hidden = layers[0].b.len();
        Ok(Mlp {
            layers: vec![
                Dense::from_json(&layers[0], dim, hidden, "layer 0")?,
                Dense::from_json(&layers[1], hidden, hidden, "layer 1")?,
                Dense::from_json(&layers[2], hidden, dim, "layer 2")?,
            ],
        })
    }
}

/// Input-convex network
///
/// ```text
/// z1 = softplus(x A0 + c0)
/// z2 = softplus(z1 U1 + x A1 + c1)      U1 >= 0
/// h  = z2 u2 + x a2                     u2 >= 0
/// ```
///
/// `h` is convex in `x` as long as `U1` and `u2` stay nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct Icnn {
    pub a0: Tensor,
    pub c0: Tensor,
    pub u1: Tensor,
    pub a1: Tensor,
    pub c1: Tensor,
    pub u2: Tensor,
    pub a2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnnJson {
    pub input: LayerJson,
    pub hidden_z: Vec<Vec<f64>>,
    pub hidden_x: LayerJson,
    pub out_z: Vec<f64>,
    pub out_x: Vec<f64>,
}

pub(crate) struct IcnnEval {
    pub h: f64,
    pub grad: Vec<f64>,
}

impl Icnn {
    pub fn init(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        let mut net = Icnn {
            a0: gaussian(rng, dim, hidden),
            c0: gaussian(rng, 1, hidden),
            u1: gaussian(rng, hidden, hidden).map(f64::abs),
            a1: gaussian(rng, dim, hidden),
            c1: gaussian(rng, 1, hidden),
            u2: gaussian(rng, hidden, 1).map(f64::abs),
            a2: gaussian(rng, dim, 1),
        };
        net.project();
        net
    }

    pub fn dim(&self) -> usize {
        self.a0.rows()
    }

    pub fn hidden(&self) -> usize {
        self.a0.cols()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.a0, &self.c0, &self.u1, &self.a1, &self.c1, &self.u2, &self.a2,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.a0,
            &mut self.c0,
            &mut self.u1,
            &mut self.a1,
            &mut self.c1,
            &mut self.u2,
            &mut self.a2,
        ]
    }

    /// Clamps the weights that multiply hidden activations to be nonnegative.
    pub fn project(&mut self) {
        for w in [&mut self.u1, &mut self.u2] {
            w.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    pub fn is_convex(&self) -> bool {
        self.u1.data().iter().chain(self.u2.data()).all(|&v| v >= 0.0)
    }

    /// Batched `h(X)`, `m x 1`.
    pub fn forward_taped(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let [a0, c0, u1, a1, c1, u2, a2] = vars else {
            unreachable!("icnn binds 7 parameters")
        };
        let p1 = tape.matmul(x, *a0)?;
        let p1 = tape.add_row(p1, *c0)?;
        let z1 = tape.softplus(p1);
        let zz = tape.matmul(z1, *u1)?;
        let zx = tape.matmul(x, *a1)?;
        let p2 = tape.add(zz, zx)?;
        let p2 = tape.add_row(p2, *c1)?;
        let z2 = tape.softplus(p2);
        let hz = tape.matmul(z2, *u2)?;
        let hx = tape.matmul(x, *a2)?;
        tape.add(hz, hx)
    }

    pub(crate) fn eval(&self, x: &[f64]) -> IcnnEval {
        let first = Dense {
            w: self.a0.clone(),
            b: self.c0.clone(),
        };
        let hidden = self.hidden();
        let dim = self.dim();
        let p1 = first.apply(x);
        let z1: Vec<f64> = p1.iter().map(|&v| softplus(v)).collect();
        let mut p2 = Dense {
            w: self.a1.clone(),
            b: self.c1.clone(),
        }
        .apply(x);
        let u1 = self.u1.data();
        for i in 0..hidden {
            let zi = z1[i];
            for (p, w) in p2.iter_mut().zip(&u1[i * hidden..(i + 1) * hidden]) {
                *p += zi * w;
            }
        }
        let u2 = self.u2.data();
        let a2 = self.a2.data();
        let h = p2.iter().zip(u2).map(|(&p, w)| softplus(p) * w).sum::<f64>()
            + x.iter().zip(a2).map(|(x, a)| x * a).sum::<f64>();

        // reverse pass for dh/dx
        let d2: Vec<f64> = p2.iter().zip(u2).map(|(&p, w)| w * sigmoid(p)).collect();
        let mut dz1 = vec![0.0; hidden];
        for i in 0..hidden {
            dz1[i] = u1[i * hidden..(i + 1) * hidden]
                .iter()
                .zip(&d2)
                .map(|(w, d)| w * d)
                .sum();
        }
        let d1: Vec<f64> = dz1.iter().zip(&p1).map(|(d, &p)| d * sigmoid(p)).collect();
        let (a0, a1) = (self.a0.data(), self.a1.data());
        let grad = (0..dim)
            .map(|k| {
                let row0 = &a0[k * hidden..(k + 1) * hidden];
                let row1 = &a1[k * hidden..(k + 1) * hidden];
                a2[k]
                    + row0.iter().zip(&d1).map(|(w, d)| w * d).sum::<f64>()
                    + row1.iter().zip(&d2).map(|(w, d)| w * d).sum::<f64>()
            })
            .collect();
        IcnnEval { h, grad }
    }

    pub(crate) fn to_json(&self) -> IcnnJson {
        IcnnJson {
            input: LayerJson {
                w: matrix_to_json(&self.a0),
                b: self.c0.data().to_vec(),
            },
            hidden_z: matrix_to_json(&self.u1),
            hidden_x: LayerJson {
                w: matrix_to_json(&self.a1),
                b: self.c1.data().to_vec(),
            },
            out_z: self.u2.data().to_vec(),
            out_x: self.a2.data().to_vec(),
        }
    }

    pub(crate) fn from_json(j: &IcnnJson, dim: usize) -> Result<Self> {
        let hidden = j.input.b.len();
        let input = Dense::from_json(&j.input, dim, hidden, "icnn input")?;
        let hx = Dense::from_json(&j.hidden_x, dim, hidden, "icnn hidden_x")?;
        let col = |v: &[f64], n: usize, what: &str| {
            if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                Err(Error::Model(format!("{what}: expected {n} finite values")))
            } else {
                Ok(Tensor::column(v))
            }
        };
        let net = Icnn {
            a0: input.w,
            c0: input.b,
            u1: matrix_from_json(&j.hidden_z, [hidden, hidden], "icnn hidden_z")?,
            a1: hx.w,
            c1: hx.b,
            u2: col(&j.out_z, hidden, "icnn out_z")?,
            a2: col(&j.out_x, dim, "icnn out_x")?,
        };
        if !net.is_convex() {
            return Err(Error::Model("icnn hidden weights must be nonnegative".into()));
        }
        Ok(net)
    }
}
