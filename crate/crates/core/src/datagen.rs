//! Synthetic sparse-recovery and RPCA problem instances, and their on-disk
//! dataset container (`UNFDS1`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 6] = b"UNFDS1";
const PSI_STREAM: u64 = u64::MAX;
const OPERATOR_STREAM: u64 = u64::MAX - 1;

/// `x = H s⋆ + e` with a sparse `s⋆`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRecoveryInstance {
    pub h: Tensor,
    pub x: Tensor,
    pub s_star: Tensor,
    pub noise_sigma: f64,
}

/// `X = V⋆ + Ψ Y⋆` with rank-`r` `V⋆` and sparse `Y⋆`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpcaInstance {
    pub x_obs: Tensor,
    pub v_star: Tensor,
    pub y_star: Tensor,
    pub psi: Tensor,
    pub rank_r: usize,
    pub sparse_frac: f64,
}

impl RpcaInstance {
    pub fn dims(&self) -> (usize, usize) {
        self.x_obs.rc()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    Identity,
    Orthogonal,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::from_vec(&[rows, cols], data).expect("positive dims")
}

/// Random measurement operator with unit-norm columns.
pub fn gen_operator(m: usize, n: usize, seed: u64) -> Result<Tensor> {
    if m == 0 || n == 0 {
        return Err(Error::Domain(format!("operator dims {m}x{n}")));
    }
    let mut rng = Rng::new(seed);
    let mut h = gaussian(&mut rng, m, n);
    for j in 0..n {
        let norm = (0..m).map(|i| h.at(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..m {
            h.set(i, j, h.at(i, j) / norm);
        }
    }
    Ok(h)
}

pub fn gen_sparse_instance(
    m: usize,
    n: usize,
    k_nonzeros: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SparseRecoveryInstance> {
    let h = gen_operator(m, n, derive_seed(seed, OPERATOR_STREAM))?;
    gen_sparse_instance_with_operator(&h, k_nonzeros, noise_sigma, seed)
}

/// Draws a fresh signal and noise for a fixed operator `h`.
pub fn gen_sparse_instance_with_operator(
    h: &Tensor,
    k_nonzeros: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SparseRecoveryInstance> {
    let (m, n) = h.rc();
    if k_nonzeros > n {
        return Err(Error::Domain(format!("{k_nonzeros} nonzeros requested for length {n}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level {noise_sigma}")));
    }
    let mut rng = Rng::new(seed);
    let mut s = Tensor::zeros(&[n, 1]);
    for idx in rng.sample_indices(n, k_nonzeros) {
        let mag = rng.uniform_in(0.5, 1.5);
        s.data_mut()[idx] = rng.sign() * mag;
    }
    let mut x = linalg::matmul(h, &s)?;
    if noise_sigma > 0.0 {
        for v in x.data_mut() {
            *v += noise_sigma * rng.normal();
        }
    }
    debug_assert_eq!(x.rc(), (m, 1));
    Ok(SparseRecoveryInstance {
        h: h.clone(),
        x,
        s_star: s,
        noise_sigma,
    })
}

/// Sparsifying transform: the identity, or the orthogonal factor of a
/// Gaussian matrix.
pub fn gen_psi(n: usize, mode: PsiMode, seed: u64) -> Tensor {
    match mode {
        PsiMode::Identity => Tensor::eye(n),
        PsiMode::Orthogonal => {
            let mut rng = Rng::new(seed);
            linalg::orthogonal_factor(&gaussian(&mut rng, n, n))
        }
    }
}

pub fn gen_rpca_instance(
    n1: usize,
    n2: usize,
    rank_r: usize,
    sparse_frac: f64,
    psi_mode: PsiMode,
    seed: u64,
) -> Result<RpcaInstance> {
    let psi = gen_psi(n1, psi_mode, derive_seed(seed, PSI_STREAM));
    gen_rpca_instance_with_psi(n2, rank_r, sparse_frac, &psi, seed)
}

/// Instance for a given `n1×n1` transform `psi`.
pub fn gen_rpca_instance_with_psi(
    n2: usize,
    rank_r: usize,
    sparse_frac: f64,
    psi: &Tensor,
    seed: u64,
) -> Result<RpcaInstance> {
    let (n1, c) = psi.rc();
    if n1 != c {
        return Err(Error::Domain(format!("transform must be square, got {}", psi.shape())));
    }
    if n2 == 0 || rank_r == 0 || rank_r > n1.min(n2) {
        return Err(Error::Domain(format!("rank {rank_r} outside 1..={}", n1.min(n2))));
    }
    if !(sparse_frac > 0.0 && sparse_frac < 1.0) {
        return Err(Error::Domain(format!("sparse fraction {sparse_frac} outside (0, 1)")));
    }
    let mut rng = Rng::new(seed);
    let a = gaussian(&mut rng, n1, rank_r).scale(1.0 / (rank_r as f64).sqrt());
    let b = gaussian(&mut rng, n2, rank_r);
    let v_star = linalg::matmul_nt(&a, &b)?;
    let c = v_star.l1() / v_star.numel() as f64;

    let total = n1 * n2;
    let count = ((sparse_frac * total as f64).round() as usize).clamp(1, total - 1);
    let mut y_star = Tensor::zeros(&[n1, n2]);
    for idx in rng.sample_indices(total, count) {
        let mut v = 0.0;
        while v == 0.0 {
            v = rng.uniform_in(-c, c);
        }
        y_star.data_mut()[idx] = v;
    }
    let x_obs = v_star.add(&linalg::matmul(psi, &y_star)?)?;
    Ok(RpcaInstance {
        x_obs,
        v_star,
        y_star,
        psi: psi.clone(),
        rank_r,
        sparse_frac,
    })
}

/// `Ψ + δ·(‖Ψ‖_F/‖G‖_F)·G` with Gaussian `G`; `δ = 0` returns `Ψ` unchanged.
pub fn perturb_objective(psi: &Tensor, delta: f64, seed: u64) -> Result<Tensor> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("perturbation {delta}")));
    }
    if delta == 0.0 {
        return Ok(psi.clone());
    }
    let mut rng = Rng::new(seed);
    let n = psi.numel();
    let g = Tensor::from_vec(psi.dims(), (0..n).map(|_| rng.normal()).collect())?;
    let mut out = psi.clone();
    out.axpy(delta * psi.frobenius() / g.frobenius(), &g);
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Contiguous split: train first, then validation, then test.
    pub fn contiguous(train: usize, val: usize, test: usize) -> Self {
        Split {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        }
    }

    /// Disjoint and covering `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instances {
    Rpca(Vec<RpcaInstance>),
    Sparse(Vec<SparseRecoveryInstance>),
}

impl Instances {
    pub fn len(&self) -> usize {
        match self {
            Instances::Rpca(v) => v.len(),
            Instances::Sparse(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub psi_mode: Option<PsiMode>,
    pub instances: Instances,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcaParams {
    pub n1: usize,
    pub n2: usize,
    pub rank_r: usize,
    pub sparse_frac: f64,
    pub psi_mode: PsiMode,
}

/// RPCA dataset whose instances share one transform drawn from `seed`.
pub fn gen_rpca_dataset(p: &RpcaParams, split: Split, seed: u64) -> Result<Dataset> {
    let psi = gen_psi(p.n1, p.psi_mode, derive_seed(seed, PSI_STREAM));
    let n = split.train.len() + split.val.len() + split.test.len();
    let instances = (0..n)
        .map(|i| gen_rpca_instance_with_psi(p.n2, p.rank_r, p.sparse_frac, &psi, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        psi_mode: Some(p.psi_mode),
        instances: Instances::Rpca(instances),
        split,
    })
}

/// Sparse-recovery dataset over one shared operator.
pub fn gen_sparse_dataset(
    m: usize,
    n: usize,
    k_nonzeros: usize,
    noise_sigma: f64,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    let h = gen_operator(m, n, derive_seed(seed, OPERATOR_STREAM))?;
    let count = split.train.len() + split.val.len() + split.test.len();
    let instances = (0..count)
        .map(|i| gen_sparse_instance_with_operator(&h, k_nonzeros, noise_sigma, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        psi_mode: None,
        instances: Instances::Sparse(instances),
        split,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetKind {
    Rpca {
        n1: usize,
        n2: usize,
        psi_mode: PsiMode,
        rank_r: Vec<usize>,
        sparse_frac: Vec<f64>,
    },
    Sparse {
        m: usize,
        n: usize,
        noise_sigma: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    seed: u64,
    count: usize,
    #[serde(flatten)]
    kind: DatasetKind,
    split: Split,
}

impl Dataset {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let count = self.instances.len();
        let (kind, blocks): (DatasetKind, Vec<&Tensor>) = match &self.instances {
            Instances::Rpca(v) => {
                let (n1, n2) = v.first().map(|i| i.dims()).unwrap_or((0, 0));
                let kind = DatasetKind::Rpca {
                    n1,
                    n2,
                    psi_mode: self.psi_mode.unwrap_or(PsiMode::Identity),
                    rank_r: v.iter().map(|i| i.rank_r).collect(),
                    sparse_frac: v.iter().map(|i| i.sparse_frac).collect(),
                };
                let blocks = v
                    .iter()
                    .flat_map(|i| [&i.x_obs, &i.v_star, &i.y_star, &i.psi])
                    .collect();
                (kind, blocks)
            }
            Instances::Sparse(v) => {
                let (m, n) = v.first().map(|i| i.h.rc()).unwrap_or((0, 0));
                let kind = DatasetKind::Sparse {
                    m,
                    n,
                    noise_sigma: v.iter().map(|i| i.noise_sigma).collect(),
                };
                let blocks = v.iter().flat_map(|i| [&i.h, &i.x, &i.s_star]).collect();
                (kind, blocks)
            }
        };
        let header = DatasetHeader {
            seed: self.seed,
            count,
            kind,
            split: self.split.clone(),
        };
        container::encode(DATASET_MAGIC, &header, &blocks)
    }

    /// Parses a dataset file image. Never returns a partially filled dataset.
    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let (header, blocks): (DatasetHeader, Vec<Tensor>) = container::decode(DATASET_MAGIC, bytes)?;
        let bad = |msg: String| Error::Format { offset: 14, msg };
        if !header.split.is_partition_of(header.count) {
            return Err(bad("split is not a partition of the instances".into()));
        }
        let expect_shapes = |blocks: &[Tensor], per: &[[usize; 2]]| -> Result<()> {
            if blocks.len() != per.len() * header.count {
                return Err(bad(format!("{} blocks for {} instances", blocks.len(), header.count)));
            }
            for (i, b) in blocks.iter().enumerate() {
                let want = per[i % per.len()];
                if b.dims() != want {
                    return Err(bad(format!("block {i} has shape {}, expected {want:?}", b.shape())));
                }
            }
            Ok(())
        };
        let mut blocks = blocks.into_iter();
        let (instances, psi_mode) = match header.kind {
            DatasetKind::Rpca {
                n1,
                n2,
                psi_mode,
                rank_r,
                sparse_frac,
            } => {
                if rank_r.len() != header.count || sparse_frac.len() != header.count {
                    return Err(bad("per-instance metadata length mismatch".into()));
                }
                expect_shapes(blocks.as_slice(), &[[n1, n2], [n1, n2], [n1, n2], [n1, n1]])?;
                let mut out = Vec::with_capacity(header.count);
                for (r, f) in rank_r.into_iter().zip(sparse_frac) {
                    let mut next = || blocks.next().expect("block count checked");
                    out.push(RpcaInstance {
                        x_obs: next(),
                        v_star: next(),
                        y_star: next(),
                        psi: next(),
                        rank_r: r,
                        sparse_frac: f,
                    });
                }
                (Instances::Rpca(out), Some(psi_mode))
            }
            DatasetKind::Sparse { m, n, noise_sigma } => {
                if noise_sigma.len() != header.count {
                    return Err(bad("per-instance metadata length mismatch".into()));
                }
                expect_shapes(blocks.as_slice(), &[[m, n], [m, 1], [n, 1]])?;
                let mut out = Vec::with_capacity(header.count);
                for sigma in noise_sigma {
                    let mut next = || blocks.next().expect("block count checked");
                    out.push(SparseRecoveryInstance {
                        h: next(),
                        x: next(),
                        s_star: next(),
                        noise_sigma: sigma,
                    });
                }
                (Instances::Sparse(out), None)
            }
        };
        Ok(Dataset {
            seed: header.seed,
            psi_mode,
            instances,
            split: header.split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::decode(&std::fs::read(path)?)
    }

    pub fn rpca(&self) -> Option<&[RpcaInstance]> {
        match &self.instances {
            Instances::Rpca(v) => Some(v),
            Instances::Sparse(_) => None,
        }
    }

    pub fn sparse(&self) -> Option<&[SparseRecoveryInstance]> {
        match &self.instances {
            Instances::Sparse(v) => Some(v),
            Instances::Rpca(_) => None,
        }
    }
}
