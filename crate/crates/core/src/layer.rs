//! Linear layer augmented with one rank-r adapter pair per task.
//!
//! The effective weight for a preference vector `lambda` is
//!
//! ```text
//! W_eff(lambda) = W + (alpha / r) * sum_t lambda_t * A_t * B_t
//! ```
//!
//! with `W` n x m, `A_t` n x r and `B_t` r x m. The same `lambda` that mixes
//! the adapters also weighs the task losses, which is what ties each adapter
//! to its task. `lambda` is not required to lie on the simplex here: probing
//! deliberately evaluates points outside it, so simplex validation belongs to
//! the scheduler.

use crate::tensor::{DenseMatrix, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayerError {
    #[error("adapter rank {rank} must be in 1..=min({n}, {m})")]
    InvalidRank { rank: usize, n: usize, m: usize },
    #[error("layer needs at least one task")]
    NoTasks,
    #[error("scaling alpha must be finite and nonnegative, got {0}")]
    InvalidAlpha(f64),
    #[error("preference has {got} entries, layer has {expected} tasks")]
    PreferenceLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One task's low-rank adapter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// n x r factor, Gaussian at init.
    pub a: DenseMatrix,
    /// r x m factor, zero at init so the composed layer starts at the base.
    pub b: DenseMatrix,
}

/// Base linear map plus per-task low-rank adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct PaLoRALayer {
    weight: DenseMatrix,
    bias: Vec<f64>,
    adapters: Vec<Adapter>,
    rank: usize,
    alpha: f64,
    base_frozen: bool,
}

/// Gradients mirroring a layer's parameter blocks.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    /// n x m; all zeros when the base is frozen.
    pub d_weight: DenseMatrix,
    pub d_bias: Vec<f64>,
    /// Per task: (n x r, r x m).
    pub d_adapters: Vec<(DenseMatrix, DenseMatrix)>,
}

/// Parameter counts split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub base: usize,
    pub bias: usize,
    pub adapters: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.base + self.bias + self.adapters
    }
}

/// A layer frozen at one preference: a plain weight matrix plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLinear {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl MergedLinear {
    /// `x * W^T + bias` for a batch of row inputs.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        let mut out = x.matmul_transposed(&self.weight)?;
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }
}

impl PaLoRALayer {
    /// Fresh layer: Kaiming-style fan-in Gaussian base weight, Gaussian `A_t`
    /// with std `1/sqrt(m)`, zero `B_t`. With every `B_t` zero the composed
    /// layer equals the base layer for any preference.
    pub fn init(
        n: usize,
        m: usize,
        tasks: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, LayerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(n, m, tasks, rank, alpha, &mut rng)
    }

    /// As [`PaLoRALayer::init`] but drawing from a caller-owned generator, so a
    /// whole model can be built from one seed.
    pub fn init_with_rng<R: Rng>(
        n: usize,
        m: usize,
        tasks: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        if tasks == 0 {
            return Err(LayerError::NoTasks);
        }
        if rank == 0 || rank > n.min(m) {
            return Err(LayerError::InvalidRank { rank, n, m });
        }
        if alpha <= 0.0 {
            return Err(LayerError::NonPositiveAlpha(alpha));
        }
        let weight = DenseMatrix::gaussian(n, m, (2.0 / m as f64).sqrt(), rng);
        let a_std = 1.0 / (m as f64).sqrt();
        let adapters = (0..tasks)
            .map(|_| Adapter {
                a: DenseMatrix::gaussian(n, rank, a_std, rng),
                b: DenseMatrix::zeros(rank, m),
            })
            .collect();
        Ok(Self {
            weight,
            bias: vec![0.0; n],
            adapters,
            rank,
            alpha,
            base_frozen: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn tasks(&self) -> usize {
        self.adapters.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn set_base_frozen(&mut self, frozen: bool) {
        self.base_frozen = frozen;
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    /// Mutable access to the raw parameter blocks, in the canonical order
    /// weight, bias, then (A_t, B_t) per task. Used by optimizers and
    /// checkpoint loading.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks: Vec<&mut [f64]> =
            vec![self.weight.values_mut(), self.bias.as_mut_slice()];
        for adapter in &mut self.adapters {
            blocks.push(adapter.a.values_mut());
            blocks.push(adapter.b.values_mut());
        }
        blocks
    }

    /// Read-only view of the parameter blocks in canonical order.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut blocks: Vec<&[f64]> = vec![self.weight.values(), self.bias.as_slice()];
        for adapter in &self.adapters {
            blocks.push(adapter.a.values());
            blocks.push(adapter.b.values());
        }
        blocks
    }

    fn check_preference(&self, lambda: &[f64]) -> Result<(), LayerError> {
        if lambda.len() != self.adapters.len() {
            return Err(LayerError::PreferenceLength {
                expected: self.adapters.len(),
                got: lambda.len(),
            });
        }
        Ok(())
    }

    fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `W + (alpha / r) * sum_t lambda_t A_t B_t`, assembled explicitly.
    pub fn compose_effective_weight(&self, lambda: &[f64]) -> Result<DenseMatrix, LayerError> {
        self.check_preference(lambda)?;
        let mut eff = self.weight.clone();
        let s = self.scaling();
        for (adapter, &l) in self.adapters.iter().zip(lambda) {
            if l == 0.0 {
                continue;
            }
            let prod = adapter.a.matmul(&adapter.b)?;
            eff.axpy(s * l, &prod)?;
        }
        Ok(eff)
    }

    /// Batch forward through the composed layer. Uses the factored form
    /// `x W^T + (alpha / r) sum_t lambda_t (x B_t^T) A_t^T + bias`, which
    /// matches composing the effective weight to machine precision.
    pub fn forward(&self, lambda: &[f64], x: &DenseMatrix) -> Result<DenseMatrix, LayerError> {
        self.check_preference(lambda)?;
        let mut out = x.matmul_transposed(&self.weight)?;
        let s = self.scaling();
        for (adapter, &l) in self.adapters.iter().zip(lambda) {
            if l == 0.0 {
                continue;
            }
            let h = x.matmul_transposed(&adapter.b)?;
            let contrib = h.matmul_transposed(&adapter.a)?;
            out.axpy(s * l, &contrib)?;
        }
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }

    /// Exact gradients of a scalar loss through the composed layer.
    ///
    /// With `M = upstream^T x` (the n x m contraction):
    /// `dW = M` (zero when frozen), `dbias = column sums of upstream`,
    /// `dA_t = (alpha/r) lambda_t M B_t^T`, `dB_t = (alpha/r) lambda_t A_t^T M`,
    /// and `dx = upstream W_eff`. Adapter terms are evaluated in factored form
    /// to avoid materializing `M` per task.
    pub fn backward(
        &self,
        lambda: &[f64],
        x: &DenseMatrix,
        upstream: &DenseMatrix,
    ) -> Result<(LayerGradients, DenseMatrix), LayerError> {
        self.check_preference(lambda)?;
        let (n, m) = self.weight.shape();
        if x.cols() != m || upstream.cols() != n || x.rows() != upstream.rows() {
            return Err(LayerError::Tensor(TensorError::ShapeMismatch {
                op: "layer_backward",
                left: x.shape(),
                right: upstream.shape(),
            }));
        }
        let s = self.scaling();
        let d_weight = if self.base_frozen {
            DenseMatrix::zeros(n, m)
        } else {
            upstream.transposed_matmul(x)?
        };
        let d_bias = upstream.column_sums();

        let mut dx = upstream.matmul(&self.weight)?;
        let mut d_adapters = Vec::with_capacity(self.adapters.len());
        for (adapter, &l) in self.adapters.iter().zip(lambda) {
            if l == 0.0 {
                d_adapters.push((
                    DenseMatrix::zeros(n, self.rank),
                    DenseMatrix::zeros(self.rank, m),
                ));
                continue;
            }
            // h = x B_t^T (batch x r), g = upstream A_t (batch x r)
            let h = x.matmul_transposed(&adapter.b)?;
            let g = upstream.matmul(&adapter.a)?;
            let mut d_a = upstream.transposed_matmul(&h)?;
            d_a.scale(s * l);
            let mut d_b = g.transposed_matmul(x)?;
            d_b.scale(s * l);
            let gb = g.matmul(&adapter.b)?;
            dx.axpy(s * l, &gb)?;
            d_adapters.push((d_a, d_b));
        }
        Ok((
            LayerGradients {
                d_weight,
                d_bias,
                d_adapters,
            },
            dx,
        ))
    }

    /// Base and adapter parameter counts: `n*m` base weights, `n` biases and
    /// `T * r * (m + n)` adapter entries.
    pub fn param_count(&self) -> ParamCount {
        let (n, m) = self.weight.shape();
        ParamCount {
            base: n * m,
            bias: n,
            adapters: self.adapters.len() * self.rank * (n + m),
        }
    }

    /// Snapshot of the layer at one preference, for deployment or evaluation.
    pub fn merge(&self, lambda: &[f64]) -> Result<MergedLinear, LayerError> {
        Ok(MergedLinear {
            weight: self.compose_effective_weight(lambda)?,
            bias: self.bias.clone(),
        })
    }
}
