//! Three-factor adapted linear layer.
//!
//! `h = W0·x + scale · L_up · (L_mid · (L_meta_down · x))`
//!
//! `L_meta_down` (r1 × d1) is shared across identities, `L_mid` (r2 × r1) and
//! `L_up` (d2 × r2) are per identity. Inputs are column batches: `x` is d1 × B and
//! gradients are summed over the batch columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFactors {
    pub l_meta_down: Matrix,
    pub l_mid: Matrix,
    pub l_up: Matrix,
    r1: usize,
    r2: usize,
}

pub fn check_ranks(d1: usize, d2: usize, r1: usize, r2: usize) -> Result<()> {
    if r2 == 0 || r2 > r1 || r1 > d1.min(d2) {
        return Err(Error::Rank(format!(
            "need 1 <= r2 <= r1 <= min(d1, d2); got r1={r1}, r2={r2}, d1={d1}, d2={d2}"
        )));
    }
    Ok(())
}

impl AdapterFactors {
    pub fn new(l_meta_down: Matrix, l_mid: Matrix, l_up: Matrix) -> Result<Self> {
        let (r1, d1) = l_meta_down.shape();
        let (r2, mid_in) = l_mid.shape();
        let (d2, up_in) = l_up.shape();
        if mid_in != r1 {
            return Err(Error::dim("factors(mid·meta_down)", l_mid.shape(), l_meta_down.shape()));
        }
        if up_in != r2 {
            return Err(Error::dim("factors(up·mid)", l_up.shape(), l_mid.shape()));
        }
        check_ranks(d1, d2, r1, r2)?;
        Ok(AdapterFactors {
            l_meta_down,
            l_mid,
            l_up,
            r1,
            r2,
        })
    }

    pub fn r1(&self) -> usize {
        self.r1
    }

    pub fn r2(&self) -> usize {
        self.r2
    }

    pub fn d1(&self) -> usize {
        self.l_meta_down.cols()
    }

    pub fn d2(&self) -> usize {
        self.l_up.rows()
    }

    pub fn as_refs(&self) -> FactorRefs<'_> {
        FactorRefs {
            meta_down: &self.l_meta_down,
            mid: &self.l_mid,
            up: &self.l_up,
        }
    }

    /// Dense `L_up · L_mid · L_meta_down`.
    pub fn delta_w(&self) -> Matrix {
        self.as_refs().delta_w().expect("validated factor shapes")
    }
}

/// Borrowed view of the three factors, for callers that keep them in separate stores.
#[derive(Debug, Clone, Copy)]
pub struct FactorRefs<'a> {
    pub meta_down: &'a Matrix,
    pub mid: &'a Matrix,
    pub up: &'a Matrix,
}

impl FactorRefs<'_> {
    fn check(&self, d1: usize, d2: usize) -> Result<()> {
        if self.meta_down.cols() != d1 {
            return Err(Error::dim("adapter(meta_down)", self.meta_down.shape(), (d2, d1)));
        }
        if self.mid.cols() != self.meta_down.rows() {
            return Err(Error::dim("adapter(mid)", self.mid.shape(), self.meta_down.shape()));
        }
        if self.up.cols() != self.mid.rows() || self.up.rows() != d2 {
            return Err(Error::dim("adapter(up)", self.up.shape(), self.mid.shape()));
        }
        Ok(())
    }

    pub fn delta_w(&self) -> Result<Matrix> {
        self.up.matmul(&self.mid.matmul(self.meta_down)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    x: Matrix,
    down: Option<Matrix>,
    mid: Option<Matrix>,
}

impl ForwardCache {
    pub fn input(&self) -> &Matrix {
        &self.x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads {
    pub meta_down: Matrix,
    pub mid: Matrix,
    pub up: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w0: Matrix,
    pub factors: Option<FactorGrads>,
    pub input: Matrix,
}

/// Factor-by-factor forward pass; `ΔW` is never materialized.
pub fn forward_with(
    w0: &Matrix,
    factors: Option<FactorRefs<'_>>,
    scale: f64,
    x: &Matrix,
) -> Result<(Matrix, ForwardCache)> {
    let (d2, d1) = w0.shape();
    if x.rows() != d1 {
        return Err(Error::dim("forward", w0.shape(), x.shape()));
    }
    let mut out = w0.matmul(x)?;
    let (down, mid) = match factors {
        Some(f) => {
            f.check(d1, d2)?;
            let down = f.meta_down.matmul(x)?;
            let mid = f.mid.matmul(&down)?;
            let up = f.up.matmul(&mid)?;
            out.add_assign(&up.scale(scale))?;
            (Some(down), Some(mid))
        }
        None => (None, None),
    };
    Ok((
        out,
        ForwardCache {
            x: x.clone(),
            down,
            mid,
        },
    ))
}

pub fn backward_with(
    w0: &Matrix,
    factors: Option<FactorRefs<'_>>,
    scale: f64,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<LayerGrads> {
    let (d2, d1) = w0.shape();
    if upstream.rows() != d2 || upstream.cols() != cache.x.cols() {
        return Err(Error::dim("backward", (d2, cache.x.cols()), upstream.shape()));
    }
    let xt = cache.x.transpose();
    let w0_grad = upstream.matmul(&xt)?;
    let mut input = w0.transpose().matmul(upstream)?;
    let factor_grads = match factors {
        Some(f) => {
            f.check(d1, d2)?;
            let (down, mid) = match (&cache.down, &cache.mid) {
                (Some(d), Some(m)) => (d, m),
                _ => return Err(Error::MissingCache),
            };
            let g = upstream.scale(scale);
            let up = g.matmul(&mid.transpose())?;
            let g_mid = f.up.transpose().matmul(&g)?;
            let mid_grad = g_mid.matmul(&down.transpose())?;
            let g_down = f.mid.transpose().matmul(&g_mid)?;
            let meta_down = g_down.matmul(&xt)?;
            input.add_assign(&f.meta_down.transpose().matmul(&g_down)?)?;
            Some(FactorGrads {
                meta_down,
                mid: mid_grad,
                up,
            })
        }
        None => None,
    };
    Ok(LayerGrads {
        w0: w0_grad,
        factors: factor_grads,
        input,
    })
}

/// A frozen base weight with an attached adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLayer {
    w0: Matrix,
    pub factors: AdapterFactors,
    pub scale: f64,
    cache: Option<ForwardCache>,
}

impl AdaptedLayer {
    pub fn new(w0: Matrix, factors: AdapterFactors) -> Result<Self> {
        if factors.d1() != w0.cols() || factors.d2() != w0.rows() {
            return Err(Error::dim("AdaptedLayer::new", w0.shape(), (factors.d2(), factors.d1())));
        }
        Ok(AdaptedLayer {
            w0,
            factors,
            scale: 1.0,
            cache: None,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    /// Runs the forward pass and keeps the intermediates for [`AdaptedLayer::backward`].
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, cache) = forward_with(&self.w0, Some(self.factors.as_refs()), self.scale, x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, upstream: &Matrix) -> Result<LayerGrads> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        backward_with(&self.w0, Some(self.factors.as_refs()), self.scale, cache, upstream)
    }

    pub fn merged(&self) -> MergedLoRA {
        merge(&self.factors)
    }
}

/// Standard two-factor LoRA: `ΔW = up · down`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedLoRA {
    pub down: Matrix,
    pub up: Matrix,
}

impl MergedLoRA {
    pub fn rank_bound(&self) -> usize {
        self.down.rows()
    }

    pub fn delta_w(&self) -> Matrix {
        self.up.matmul(&self.down).expect("merged shapes chain")
    }

    pub fn forward(&self, w0: &Matrix, scale: f64, x: &Matrix) -> Result<Matrix> {
        if x.rows() != w0.cols() || self.down.cols() != w0.cols() || self.up.rows() != w0.rows() {
            return Err(Error::dim("merged forward", w0.shape(), x.shape()));
        }
        let mut out = w0.matmul(x)?;
        out.add_assign(&self.up.matmul(&self.down.matmul(x)?)?.scale(scale))?;
        Ok(out)
    }
}

/// Collapses `L_mid · L_meta_down` into one down factor.
pub fn merge(factors: &AdapterFactors) -> MergedLoRA {
    MergedLoRA {
        down: factors
            .l_mid
            .matmul(&factors.l_meta_down)
            .expect("validated factor shapes"),
        up: factors.l_up.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Gaussian down factors, zero up factor: the adapter starts as a no-op.
    Fresh,
}

/// Per-identity pair `(L_mid, L_up)`: mid ~ N(0, 1/r1), up = 0.
pub fn init_identity_factors(rng: &mut Rng, d2: usize, r1: usize, r2: usize) -> (Matrix, Matrix) {
    let mid = gaussian(rng, r2, r1, 1.0 / (r1 as f64).sqrt());
    (mid, Matrix::zeros(d2, r2))
}

pub fn init_meta_down(rng: &mut Rng, d1: usize, r1: usize) -> Matrix {
    gaussian(rng, r1, d1, 1.0 / (d1 as f64).sqrt())
}

pub fn init_factors(
    rng: &mut Rng,
    d1: usize,
    d2: usize,
    r1: usize,
    r2: usize,
    mode: InitMode,
) -> Result<AdapterFactors> {
    check_ranks(d1, d2, r1, r2)?;
    match mode {
        InitMode::Fresh => {
            let meta_down = init_meta_down(rng, d1, r1);
            let (mid, up) = init_identity_factors(rng, d2, r1, r2);
            AdapterFactors::new(meta_down, mid, up)
        }
    }
}
