//! Detection tower, knowledge-transfer functions, and query/tool fusion.
//!
//! Each learnable piece exists twice: a plain forward over slices used for
//! inference, and a batched tape version used for training. Tests pin the two
//! to each other.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize, relu, sigmoid, softmax, Bound, ParamSet, Tape, Tensor, Var};
use crate::scalar::{dot, Scalar};

pub const DET_PROJ_W: &str = "det.proj.weight";
pub const DET_PROJ_B: &str = "det.proj.bias";
pub const DET_HEAD_W: &str = "det.head.weight";
pub const DET_HEAD_B: &str = "det.head.bias";
pub const GATE_W: &str = "adakt.gate.weight";
pub const GATE_B: &str = "adakt.gate.bias";
pub const ATTN_PROJ_W: &str = "adakt.attn.proj.weight";
pub const ATTN_PROJ_B: &str = "adakt.attn.proj.bias";
pub const ATTN_Q: &str = "adakt.attn.query";
pub const ATTN_K: &str = "adakt.attn.key";
pub const ATTN_V: &str = "adakt.attn.value";
pub const MLP_HIDDEN_W: &str = "adakt.mlp.hidden.weight";
pub const MLP_HIDDEN_B: &str = "adakt.mlp.hidden.bias";
pub const MLP_OUT_W: &str = "adakt.mlp.out.weight";
pub const MLP_OUT_B: &str = "adakt.mlp.out.bias";

/// Which function carries detective knowledge into the retrieval tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferKind {
    Gating,
    Attention,
    Concatenation,
    Addition,
}

impl TransferKind {
    pub const ALL: [TransferKind; 4] =
        [TransferKind::Gating, TransferKind::Attention, TransferKind::Concatenation, TransferKind::Addition];

    pub fn as_str(self) -> &'static str {
        match self {
            TransferKind::Gating => "gating",
            TransferKind::Attention => "attention",
            TransferKind::Concatenation => "concatenation",
            TransferKind::Addition => "addition",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            TransferKind::Gating => &[GATE_W, GATE_B],
            TransferKind::Attention => &[ATTN_PROJ_W, ATTN_PROJ_B, ATTN_Q, ATTN_K, ATTN_V],
            TransferKind::Concatenation => &[MLP_HIDDEN_W, MLP_HIDDEN_B, MLP_OUT_W, MLP_OUT_B],
            TransferKind::Addition => &[],
        }
    }
}

impl fmt::Display for TransferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for TransferKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gating" | "gate" => Ok(TransferKind::Gating),
            "attention" => Ok(TransferKind::Attention),
            "concatenation" | "concat" => Ok(TransferKind::Concatenation),
            "addition" | "add" => Ok(TransferKind::Addition),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn from_params(params: &ParamSet<T>, w: &str, b: &str) -> Result<Self> {
        let get = |n: &str| params.get(n).cloned().ok_or_else(|| Error::Config(format!("missing parameter `{n}`")));
        Ok(Self { weight: get(w)?, bias: get(b)? })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch { expected: self.in_dim(), got: x.len() });
        }
        let mut y = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in y.iter_mut().zip(self.weight.row(i)) {
                *o = *o + xi * w;
            }
        }
        Ok(y)
    }
}

fn xavier<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::of(rng.gen_range(-a..=a))).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn insert_linear<T: Scalar, R: Rng>(params: &mut ParamSet<T>, w: &str, b: &str, din: usize, dout: usize, rng: &mut R) {
    params.insert(w, xavier(din, dout, rng));
    params.insert(b, Tensor::zeros(vec![1, dout]));
}

/// Projection `din -> dh` with ReLU, then a scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTower<T> {
    pub projection: Linear<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> DetectionTower<T> {
    pub fn init<R: Rng>(params: &mut ParamSet<T>, din: usize, dh: usize, rng: &mut R) {
        insert_linear(params, DET_PROJ_W, DET_PROJ_B, din, dh, rng);
        insert_linear(params, DET_HEAD_W, DET_HEAD_B, dh, 1, rng);
    }

    pub fn from_params(params: &ParamSet<T>) -> Result<Self> {
        Ok(Self {
            projection: Linear::from_params(params, DET_PROJ_W, DET_PROJ_B)?,
            head: Linear::from_params(params, DET_HEAD_W, DET_HEAD_B)?,
        })
    }

    /// Returns the detective knowledge `h` and the usage probability.
    pub fn detect(&self, x: &[T]) -> Result<(Vec<T>, T)> {
        let h: Vec<T> = self.projection.forward(x)?.into_iter().map(relu).collect();
        let logit = self.head.forward(&h)?[0];
        Ok((h, sigmoid(logit)))
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.out_dim()
    }
}

/// Batched detection on a tape: returns `(h, logits)` for rows of `x`.
pub fn detect_on_tape<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, x: Var) -> (Var, Var) {
    let p = tape.matmul(x, bound.var(DET_PROJ_W));
    let p = tape.add_row(p, bound.var(DET_PROJ_B));
    let h = tape.relu(p);
    let z = tape.matmul(h, bound.var(DET_HEAD_W));
    let z = tape.add_row(z, bound.var(DET_HEAD_B));
    (h, z)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferFn<T> {
    Gating { gate: Linear<T> },
    Attention { proj: Linear<T>, query: Tensor<T>, key: Tensor<T>, value: Tensor<T> },
    Concatenation { hidden: Linear<T>, out: Linear<T> },
    Addition { dim: usize },
}

impl<T: Scalar> TransferFn<T> {
    pub fn init<R: Rng>(kind: TransferKind, params: &mut ParamSet<T>, dh: usize, d: usize, rng: &mut R) {
        match kind {
            TransferKind::Gating => insert_linear(params, GATE_W, GATE_B, dh, d, rng),
            TransferKind::Attention => {
                insert_linear(params, ATTN_PROJ_W, ATTN_PROJ_B, dh, d, rng);
                for name in [ATTN_Q, ATTN_K, ATTN_V] {
                    params.insert(name, xavier(d, d, rng));
                }
            }
            TransferKind::Concatenation => {
                insert_linear(params, MLP_HIDDEN_W, MLP_HIDDEN_B, dh + d, d, rng);
                insert_linear(params, MLP_OUT_W, MLP_OUT_B, d, d, rng);
            }
            TransferKind::Addition => {}
        }
    }

    pub fn from_params(kind: TransferKind, params: &ParamSet<T>, d: usize) -> Result<Self> {
        let get = |n: &str| params.get(n).cloned().ok_or_else(|| Error::Config(format!("missing parameter `{n}`")));
        Ok(match kind {
            TransferKind::Gating => TransferFn::Gating { gate: Linear::from_params(params, GATE_W, GATE_B)? },
            TransferKind::Attention => TransferFn::Attention {
                proj: Linear::from_params(params, ATTN_PROJ_W, ATTN_PROJ_B)?,
                query: get(ATTN_Q)?,
                key: get(ATTN_K)?,
                value: get(ATTN_V)?,
            },
            TransferKind::Concatenation => TransferFn::Concatenation {
                hidden: Linear::from_params(params, MLP_HIDDEN_W, MLP_HIDDEN_B)?,
                out: Linear::from_params(params, MLP_OUT_W, MLP_OUT_B)?,
            },
            TransferKind::Addition => TransferFn::Addition { dim: d },
        })
    }

    pub fn kind(&self) -> TransferKind {
        match self {
            TransferFn::Gating { .. } => TransferKind::Gating,
            TransferFn::Attention { .. } => TransferKind::Attention,
            TransferFn::Concatenation { .. } => TransferKind::Concatenation,
            TransferFn::Addition { .. } => TransferKind::Addition,
        }
    }
}

fn vec_mat<T: Scalar>(x: &[T], m: &Tensor<T>) -> Vec<T> {
    let mut y = vec![T::zero(); m.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &w) in y.iter_mut().zip(m.row(i)) {
            *o = *o + xi * w;
        }
    }
    y
}

/// Truncates or zero-pads `h` to `d` entries.
pub fn resize<T: Scalar>(h: &[T], d: usize) -> Vec<T> {
    (0..d).map(|i| h.get(i).copied().unwrap_or_else(T::zero)).collect()
}

/// Fuses the detective knowledge `h` into the search-enhanced representation.
pub fn adakt_transfer<T: Scalar>(h: &[T], e_search: &[T], f: &TransferFn<T>) -> Result<Vec<T>> {
    let d = e_search.len();
    match f {
        TransferFn::Gating { gate } => {
            if gate.out_dim() != d {
                return Err(Error::DimMismatch { expected: gate.out_dim(), got: d });
            }
            let g = gate.forward(h)?;
            Ok(g.into_iter().zip(e_search).map(|(z, &e)| sigmoid(z) * e).collect())
        }
        TransferFn::Attention { proj, query, key, value } => {
            if proj.out_dim() != d || query.rows() != d {
                return Err(Error::DimMismatch { expected: proj.out_dim(), got: d });
            }
            let u = proj.forward(h)?;
            let tokens = [u.as_slice(), e_search];
            let q: Vec<Vec<T>> = tokens.iter().map(|t| vec_mat(t, query)).collect();
            let k: Vec<Vec<T>> = tokens.iter().map(|t| vec_mat(t, key)).collect();
            let v: Vec<Vec<T>> = tokens.iter().map(|t| vec_mat(t, value)).collect();
            let scale = T::of(d as f64).sqrt();
            let mut out = vec![T::zero(); d];
            for qi in &q {
                let logits: Vec<T> = k.iter().map(|kj| dot(qi, kj) / scale).collect();
                for (a, vj) in softmax(&logits).into_iter().zip(&v) {
                    out.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + a * x);
                }
            }
            Ok(out)
        }
        TransferFn::Concatenation { hidden, out } => {
            if out.out_dim() != d {
                return Err(Error::DimMismatch { expected: out.out_dim(), got: d });
            }
            let mut cat = h.to_vec();
            cat.extend_from_slice(e_search);
            let z: Vec<T> = hidden.forward(&cat)?.into_iter().map(relu).collect();
            out.forward(&z)
        }
        TransferFn::Addition { dim } => {
            if *dim != d {
                return Err(Error::DimMismatch { expected: *dim, got: d });
            }
            Ok(resize(h, d).into_iter().zip(e_search).map(|(a, &b)| a + b).collect())
        }
    }
}

/// Batched transfer on a tape; `h: B x dh`, `search: B x d`.
pub fn transfer_on_tape<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, kind: TransferKind, h: Var, search: Var) -> Var {
    match kind {
        TransferKind::Gating => {
            let z = tape.matmul(h, bound.var(GATE_W));
            let z = tape.add_row(z, bound.var(GATE_B));
            let g = tape.sigmoid(z);
            tape.mul(g, search)
        }
        TransferKind::Attention => {
            let d = tape.value(search).cols();
            let u = tape.matmul(h, bound.var(ATTN_PROJ_W));
            let u = tape.add_row(u, bound.var(ATTN_PROJ_B));
            let (wq, wk, wv) = (bound.var(ATTN_Q), bound.var(ATTN_K), bound.var(ATTN_V));
            let qu = tape.matmul(u, wq);
            let qv = tape.matmul(search, wq);
            let ku = tape.matmul(u, wk);
            let kv = tape.matmul(search, wk);
            let vu = tape.matmul(u, wv);
            let vv = tape.matmul(search, wv);
            let inv = T::one() / T::of(d as f64).sqrt();
            let mut weight_on_u = None;
            let mut weight_on_v = None;
            for q in [qu, qv] {
                let su = tape.row_dot(q, ku);
                let sv = tape.row_dot(q, kv);
                let logits = tape.concat_cols(&[su, sv]);
                let logits = tape.scale(logits, inv);
                let a = tape.softmax_rows(logits);
                let au = tape.col(a, 0);
                let av = tape.col(a, 1);
                weight_on_u = Some(match weight_on_u {
                    Some(acc) => tape.add(acc, au),
                    None => au,
                });
                weight_on_v = Some(match weight_on_v {
                    Some(acc) => tape.add(acc, av),
                    None => av,
                });
            }
            let a = tape.mul_col(vu, weight_on_u.expect("two tokens"));
            let b = tape.mul_col(vv, weight_on_v.expect("two tokens"));
            tape.add(a, b)
        }
        TransferKind::Concatenation => {
            let cat = tape.concat_cols(&[h, search]);
            let z = tape.matmul(cat, bound.var(MLP_HIDDEN_W));
            let z = tape.add_row(z, bound.var(MLP_HIDDEN_B));
            let z = tape.relu(z);
            let o = tape.matmul(z, bound.var(MLP_OUT_W));
            tape.add_row(o, bound.var(MLP_OUT_B))
        }
        TransferKind::Addition => {
            let d = tape.value(search).cols();
            let p = tape.resize_cols(h, d);
            tape.add(p, search)
        }
    }
}

/// Sum of the unit-normalized query representations.
pub fn fuse_query<T: Scalar>(parts: &[&[T]]) -> Result<Vec<T>> {
    let d = parts.first().map(|p| p.len()).ok_or(Error::EmptyGolden)?;
    let mut e = vec![T::zero(); d];
    for p in parts {
        if p.len() != d {
            return Err(Error::DimMismatch { expected: d, got: p.len() });
        }
        for (o, x) in e.iter_mut().zip(l2_normalize(p)?) {
            *o = *o + x;
        }
    }
    Ok(e)
}

/// `s(q, t)` for the three query representations and one tool representation.
pub fn fuse_and_score<T: Scalar>(graph: &[T], search: &[T], joint: &[T], tool_graph: &[T]) -> Result<T> {
    let e_q = fuse_query(&[graph, search, joint])?;
    if tool_graph.len() != e_q.len() {
        return Err(Error::DimMismatch { expected: e_q.len(), got: tool_graph.len() });
    }
    Ok(dot(&e_q, &l2_normalize(tool_graph)?))
}

/// Scores every tool (rows of `tool_unit`, already normalized) and returns the
/// top `k` as `(row, score)`, descending, ties by ascending tool id.
pub fn rank_tools<T: Scalar>(e_q: &[T], tool_unit: &Tensor<T>, tool_ids: &[String], k: usize) -> Vec<(usize, T)> {
    let mut scored: Vec<(usize, T)> = (0..tool_unit.rows()).map(|i| (i, dot(e_q, tool_unit.row(i)))).collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| tool_ids[a.0].cmp(&tool_ids[b.0]))
    });
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<T> {
    pub detection_prob: T,
    pub invoked: bool,
    pub ranked: Vec<(String, T)>,
}
