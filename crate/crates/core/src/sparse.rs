//! Unfolded ISTA (LISTA) with optional parameter coupling and weight tying,
//! plus the coupling and convergence-rate diagnostics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container;
use crate::datagen::SparseRecoveryInstance;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use crate::training::{BlockInfo, ParamGroup, Supervision, Trainable};

pub(crate) const CHECKPOINT_MAGIC: &[u8; 6] = b"UNFCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct ListaLayer {
    pub w1: Tensor,
    /// `None` in coupled mode, where `W² = I − W¹H` is materialized on demand.
    pub w2: Option<Tensor>,
    /// Scalar threshold `β`.
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ListaModel {
    /// One entry per layer, or a single shared entry when tied.
    params: Vec<ListaLayer>,
    depth: usize,
    coupled: bool,
    h_ref: Option<Tensor>,
}

impl ListaModel {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn is_coupled(&self) -> bool {
        self.coupled
    }

    pub fn is_tied(&self) -> bool {
        self.params.len() == 1 && self.depth > 1
    }

    fn slot(&self, k: usize) -> usize {
        if self.params.len() == 1 {
            0
        } else {
            k
        }
    }

    /// Parameters used by layer `k` (0-based).
    pub fn layer(&self, k: usize) -> &ListaLayer {
        &self.params[self.slot(k)]
    }

    /// `(m, n)`: observation and signal lengths.
    pub fn dims(&self) -> (usize, usize) {
        let (n, m) = self.params[0].w1.rc();
        (m, n)
    }

    /// `W²` of layer `k`, materialized as `I − W¹H` when coupled.
    pub fn w2(&self, k: usize) -> Tensor {
        let layer = self.layer(k);
        match (&layer.w2, &self.h_ref) {
            (Some(w2), _) => w2.clone(),
            (None, Some(h)) => {
                let (_, n) = self.dims();
                let w1h = linalg::matmul(&layer.w1, h).expect("shapes fixed at construction");
                Tensor::eye(n).sub(&w1h).expect("square")
            }
            (None, None) => unreachable!("coupled model always keeps its operator"),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks().iter().map(|b| b.numel()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (m, n) = self.dims();
        let header = ListaHeader {
            model: "lista".into(),
            depth: self.depth,
            m,
            n,
            coupled: self.coupled,
            tied: self.params.len() == 1,
        };
        let mut blocks = self.blocks();
        blocks.extend(self.h_ref.as_ref());
        container::encode(CHECKPOINT_MAGIC, &header, &blocks)
    }

    pub fn decode(bytes: &[u8]) -> Result<ListaModel> {
        let (h, blocks): (ListaHeader, Vec<Tensor>) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        let bad = |msg: String| Error::Format { offset: 14, msg };
        if h.model != "lista" {
            return Err(bad(format!("checkpoint holds a {} model", h.model)));
        }
        if h.depth == 0 || h.m == 0 || h.n == 0 {
            return Err(bad("empty model dimensions".into()));
        }
        let slots = if h.tied { 1 } else { h.depth };
        let mut layout: Vec<Vec<usize>> = Vec::new();
        for _ in 0..slots {
            layout.push(vec![h.n, h.m]);
            if !h.coupled {
                layout.push(vec![h.n, h.n]);
            }
            layout.push(vec![1]);
        }
        if h.coupled {
            layout.push(vec![h.m, h.n]);
        }
        if blocks.len() != layout.len() || blocks.iter().zip(&layout).any(|(b, d)| b.dims() != d.as_slice()) {
            return Err(bad("parameter blocks do not match the declared model".into()));
        }
        let mut it = blocks.into_iter();
        let mut params = Vec::with_capacity(slots);
        for _ in 0..slots {
            let w1 = it.next().expect("layout checked");
            let w2 = if h.coupled { None } else { it.next() };
            let beta = it.next().expect("layout checked");
            params.push(ListaLayer { w1, w2, beta });
        }
        Ok(ListaModel {
            params,
            depth: h.depth,
            coupled: h.coupled,
            h_ref: it.next(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ListaHeader {
    model: String,
    depth: usize,
    m: usize,
    n: usize,
    coupled: bool,
    tied: bool,
}

/// Every layer set to the ISTA values `W¹ = μHᵀ`, `W² = I − μHᵀH`, `β = μρ`.
pub fn lista_init_from_ista(
    h: &Tensor,
    mu: f64,
    rho: f64,
    depth: usize,
    coupled: bool,
    tied: bool,
) -> Result<ListaModel> {
    if !(mu > 0.0) {
        return Err(Error::Domain(format!("step size {mu}")));
    }
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!("l1 weight {rho}")));
    }
    if depth == 0 {
        return Err(Error::Domain("zero layers".into()));
    }
    let (_, n) = h.rc();
    let w1 = h.transpose().scale(mu);
    let w2 = if coupled {
        None
    } else {
        Some(Tensor::eye(n).sub(&linalg::matmul(&w1, h)?)?)
    };
    let layer = ListaLayer {
        w1,
        w2,
        beta: Tensor::scalar(mu * rho),
    };
    let count = if tied { 1 } else { depth };
    Ok(ListaModel {
        params: vec![layer; count],
        depth,
        coupled,
        h_ref: coupled.then(|| h.clone()),
    })
}

/// Per-layer `‖W²_k − (I − W¹_k H)‖_F`.
pub fn coupling_residual(model: &ListaModel, h: &Tensor) -> Result<Vec<f64>> {
    let (_, n) = h.rc();
    (0..model.depth)
        .map(|k| {
            let target = Tensor::eye(n).sub(&linalg::matmul(&model.layer(k).w1, h)?)?;
            Ok(model.w2(k).sub(&target)?.frobenius())
        })
        .collect()
}

/// Applies the layers to `x` on `tape`; `params` are the model's blocks in
/// [`Trainable::blocks`] order. Returns `s¹ … s^K`.
pub fn lista_forward_on<'t>(
    model: &ListaModel,
    tape: &'t Tape,
    params: &[Var<'t>],
    x: &Tensor,
) -> Result<Vec<Var<'t>>> {
    forward_layers(model, tape, params, x, model.depth)
}

fn forward_layers<'t>(
    model: &ListaModel,
    tape: &'t Tape,
    params: &[Var<'t>],
    x: &Tensor,
    layers: usize,
) -> Result<Vec<Var<'t>>> {
    let (m, n) = model.dims();
    if x.dims() != [m, 1] {
        return Err(Error::Dimension {
            op: "lista_forward",
            lhs: crate::tensor::Shape::matrix(m, 1),
            rhs: x.shape().clone(),
        });
    }
    let per = if model.coupled { 2 } else { 3 };
    let xv = tape.constant(x.clone());
    let h = model.h_ref.as_ref().map(|h| tape.constant(h.clone()));
    let mut s = tape.constant(Tensor::zeros(&[n, 1]));
    let mut out = Vec::with_capacity(layers);
    for k in 0..layers.min(model.depth) {
        let base = model.slot(k) * per;
        let w1 = params[base];
        let beta = params[base + per - 1];
        let drive = w1.matmul(&xv)?;
        let feedback = match &h {
            Some(h) => s.sub(&w1.matmul(&h.matmul(&s)?)?)?,
            None => params[base + 1].matmul(&s)?,
        };
        s = drive.add(&feedback)?.soft_threshold(&beta)?;
        out.push(s);
    }
    Ok(out)
}

/// Forward pass without gradients; returns `s¹ … s^K`.
pub fn lista_forward(model: &ListaModel, x: &Tensor) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let params: Vec<Var> = model.blocks().into_iter().map(|b| tape.constant(b.clone())).collect();
    Ok(lista_forward_on(model, &tape, &params, x)?
        .into_iter()
        .map(|v| v.tensor())
        .collect())
}

/// Per-layer NMSE `‖s^k − s⋆‖² / ‖s⋆‖²`.
pub fn nmse_per_layer(trajectory: &[Tensor], s_star: &Tensor) -> Result<Vec<f64>> {
    let denom = s_star.frobenius_sq();
    trajectory
        .iter()
        .map(|s| Ok(s.sub(s_star)?.frobenius_sq() / denom))
        .collect()
}

impl Trainable for ListaModel {
    type Sample = SparseRecoveryInstance;

    fn depth(&self) -> usize {
        self.depth
    }

    fn blocks(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.params {
            out.push(&p.w1);
            out.extend(p.w2.as_ref());
            out.push(&p.beta);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.params {
            out.push(&mut p.w1);
            out.extend(p.w2.as_mut());
            out.push(&mut p.beta);
        }
        out
    }

    fn block_info(&self) -> Vec<BlockInfo> {
        let tied = self.params.len() == 1;
        let mut out = Vec::new();
        for (k, p) in self.params.iter().enumerate() {
            let stage = (!tied).then_some(k);
            let net = BlockInfo {
                group: ParamGroup::Net,
                stage,
            };
            out.push(net);
            if p.w2.is_some() {
                out.push(net);
            }
            out.push(BlockInfo {
                group: ParamGroup::Hyper,
                stage,
            });
        }
        out
    }

    fn iteration_losses<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        sample: &SparseRecoveryInstance,
        supervision: Supervision,
        upto: usize,
    ) -> Result<Vec<Var<'t>>> {
        let traj = forward_layers(self, tape, params, &sample.x, upto)?;
        match supervision {
            Supervision::Supervised => {
                let target = tape.constant(sample.s_star.clone());
                let denom = sample.s_star.frobenius_sq();
                if denom == 0.0 {
                    return Err(Error::Contract("ground truth is identically zero".into()));
                }
                traj.iter()
                    .map(|s| Ok(s.sub(&target)?.frobenius_sq().scale(1.0 / denom)))
                    .collect()
            }
            Supervision::Unsupervised { lambda } => {
                let h = tape.constant(sample.h.clone());
                let x = tape.constant(sample.x.clone());
                traj.iter()
                    .map(|s| {
                        let fit = x.sub(&h.matmul(s)?)?.frobenius_sq().scale(0.5);
                        fit.add(&s.sum_abs().scale(lambda))
                    })
                    .collect()
            }
        }
    }

    fn project(&mut self) {
        for p in &mut self.params {
            let b = p.beta.data_mut();
            b[0] = b[0].max(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Fitted decay rate `c` in `error_k − floor ≈ B·e^(−ck)`.
    pub c: f64,
    /// `log B`.
    pub log_offset: f64,
    pub floor: f64,
    pub layers_used: usize,
}

/// Least-squares fit of `log(error_k − floor)` against the layer index
/// `k = 1, 2, …`. The floor is the final error when `sigma > 0`, else 0.
pub fn rate_fit(errors: &[f64], sigma: f64) -> Result<RateFit> {
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Fit("errors must be finite and nonnegative".into()));
    }
    let floor = if sigma > 0.0 {
        *errors.last().unwrap_or(&0.0)
    } else {
        0.0
    };
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| e - floor > 0.0)
        .map(|(i, &e)| ((i + 1) as f64, (e - floor).ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Fit(format!("{} usable layers, need at least 3", pts.len())));
    }
    let n = pts.len() as f64;
    let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mk).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mk) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        c: -slope,
        log_offset: my - slope * mk,
        floor,
        layers_used: pts.len(),
    })
}
