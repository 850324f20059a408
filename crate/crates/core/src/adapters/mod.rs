//! Adapter parameterizations over a frozen base weight.
//!
//! Every adapter kind exposes the same surface: zero-delta initialization,
//! the effective (merged) weight, reverse-mode gradients of a loss with
//! respect to its trainable tensors, and a flat view of those tensors for
//! the optimizer.

mod baselines;
mod budget;
pub mod cayley;
mod dora;
mod spectral;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use baselines::{LiDBState, LoRAState, OFTState, SVDiffState, VeRAState};
pub use budget::{available_budgets, budget_table, scaling_formula, trainable_param_count};
pub use cayley::{cayley, CayleyMap};
pub use dora::{
    dora_output, dora_spectral_vector_match, match_dora_to_spectral, spectral_vector_output, DoRAMatchReport,
    DoRAVectorState, SpectralVector,
};
pub use spectral::{re_decompose_rotated, SpectralAState, SpectralRState};

use crate::error::{Error, Result};
use crate::linalg::{svd_thin, ColumnSelect, Matrix, SpectralDecomposition};
use crate::rng::{gaussian, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKind {
    SpectralA,
    SpectralR,
    LoRA,
    OFT,
    SVDiff,
    VeRA,
    LiDB,
    DoRAVector,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 8] = [
        AdapterKind::SpectralA,
        AdapterKind::SpectralR,
        AdapterKind::LoRA,
        AdapterKind::OFT,
        AdapterKind::SVDiff,
        AdapterKind::VeRA,
        AdapterKind::LiDB,
        AdapterKind::DoRAVector,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::SpectralA => "SpectralA",
            AdapterKind::SpectralR => "SpectralR",
            AdapterKind::LoRA => "LoRA",
            AdapterKind::OFT => "OFT",
            AdapterKind::SVDiff => "SVDiff",
            AdapterKind::VeRA => "VeRA",
            AdapterKind::LiDB => "LiDB",
            AdapterKind::DoRAVector => "DoRAVector",
        }
    }

    /// Whether the kind reads the singular vectors of the base.
    pub fn is_spectral(&self) -> bool {
        matches!(self, AdapterKind::SpectralA | AdapterKind::SpectralR)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Format(format!("unknown adapter kind '{s}'")))
    }
}

/// Kind-specific hyperparameters that are not the rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterExtras {
    /// Multiplier on the LoRA product. `1.0` is the plain `W + a·bᵀ` form;
    /// [`AdapterExtras::lora_alpha_over_rank`] gives the `α/r` convention.
    pub lora_scale: f64,
    /// OFT shares one generator across all diagonal blocks.
    pub oft_shared: bool,
    /// LiDB auxiliary inner dimensions.
    pub lidb_a: usize,
    pub lidb_b: usize,
    /// Initial value of VeRA's `λ_a`.
    pub vera_lambda_a_init: f64,
}

impl Default for AdapterExtras {
    fn default() -> Self {
        Self {
            lora_scale: 1.0,
            oft_shared: true,
            lidb_a: 50,
            lidb_b: 100,
            vera_lambda_a_init: 1.0,
        }
    }
}

impl AdapterExtras {
    /// LoRA scale `α/r` with `α = 2r` unless given.
    pub fn lora_alpha_over_rank(rank: usize, alpha: Option<f64>) -> f64 {
        match alpha {
            Some(a) if rank > 0 => a / rank as f64,
            _ => 2.0,
        }
    }
}

/// A frozen base weight together with its canonical decomposition.
#[derive(Debug, Clone)]
pub struct AdapterBase {
    weight: Matrix,
    decomposition: SpectralDecomposition,
    fingerprint: String,
}

impl AdapterBase {
    /// Decomposes `weight`; the weight itself is kept bit-for-bit.
    pub fn new(weight: Matrix) -> Result<Self> {
        let decomposition = svd_thin(&weight)?;
        let fingerprint = fingerprint(&decomposition);
        Ok(Self {
            weight,
            decomposition,
            fingerprint,
        })
    }

    /// Uses a precomputed decomposition; the weight is its reconstruction.
    pub fn from_decomposition(decomposition: SpectralDecomposition) -> Self {
        let weight = decomposition.reconstruct();
        let fingerprint = fingerprint(&decomposition);
        Self {
            weight,
            decomposition,
            fingerprint,
        }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.decomposition
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    /// Number of singular triplets, `min(n, m)`.
    pub fn k(&self) -> usize {
        self.decomposition.k()
    }

    /// Hex digest identifying the decomposition.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

impl PartialEq for AdapterBase {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.decomposition == other.decomposition
    }
}

/// SHA-256 over the shape and the little-endian bytes of `u`, `s`, `v`,
/// truncated to 16 hex digits.
pub fn fingerprint(d: &SpectralDecomposition) -> String {
    let mut h = Sha256::new();
    let (n, m) = d.shape();
    h.update((n as u64).to_le_bytes());
    h.update((m as u64).to_le_bytes());
    for x in d.u().as_slice().iter().chain(d.s()).chain(d.v().as_slice()) {
        h.update(x.to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// A named parameter tensor as stored in adapter containers.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

impl NamedTensor {
    pub(crate) fn trainable(name: &str, value: Matrix) -> Self {
        Self {
            name: name.to_string(),
            value,
            frozen: false,
        }
    }

    pub(crate) fn frozen(name: &str, value: Matrix) -> Self {
        Self {
            name: name.to_string(),
            value,
            frozen: true,
        }
    }
}

pub(crate) fn take_tensor(tensors: &mut Vec<NamedTensor>, name: &str) -> Result<Matrix> {
    let pos = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::Format(format!("adapter container is missing tensor '{name}'")))?;
    Ok(tensors.remove(pos).value)
}

pub(crate) fn vec_tensor(values: &[f64]) -> Matrix {
    Matrix::column(values)
}

/// Behaviour shared by every adapter state.
pub trait Adapter {
    fn kind(&self) -> AdapterKind;

    /// The adapted weight.
    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix>;

    /// Gradients of a loss with respect to each trainable tensor, given
    /// `∂L/∂W'` for the effective weight. Aligned with [`Adapter::params`].
    fn backprop(&self, base: &AdapterBase, grad_weight: &Matrix) -> Result<Vec<Vec<f64>>>;

    /// Trainable tensors as flat slices, in a fixed order.
    fn params(&self) -> Vec<&[f64]>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    /// All tensors, trainable and frozen, for serialization.
    fn tensors(&self) -> Vec<NamedTensor>;

    /// Rank hyperparameter (number of OFT blocks for OFT).
    fn rank(&self) -> usize;

    fn num_trainable(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Tagged union over adapter states.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterState {
    SpectralA(SpectralAState),
    SpectralR(SpectralRState),
    LoRA(LoRAState),
    OFT(OFTState),
    SVDiff(SVDiffState),
    VeRA(VeRAState),
    LiDB(LiDBState),
    DoRAVector(DoRAVectorState),
}

macro_rules! dispatch {
    ($self:expr, $s:ident => $body:expr) => {
        match $self {
            AdapterState::SpectralA($s) => $body,
            AdapterState::SpectralR($s) => $body,
            AdapterState::LoRA($s) => $body,
            AdapterState::OFT($s) => $body,
            AdapterState::SVDiff($s) => $body,
            AdapterState::VeRA($s) => $body,
            AdapterState::LiDB($s) => $body,
            AdapterState::DoRAVector($s) => $body,
        }
    };
}

impl Adapter for AdapterState {
    fn kind(&self) -> AdapterKind {
        dispatch!(self, s => s.kind())
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        dispatch!(self, s => s.effective_weight(base))
    }

    fn backprop(&self, base: &AdapterBase, grad_weight: &Matrix) -> Result<Vec<Vec<f64>>> {
        if grad_weight.shape() != base.shape() {
            return Err(Error::shape(
                "backprop",
                format!("gradient {:?} for base {:?}", grad_weight.shape(), base.shape()),
            ));
        }
        dispatch!(self, s => s.backprop(base, grad_weight))
    }

    fn params(&self) -> Vec<&[f64]> {
        dispatch!(self, s => s.params())
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        dispatch!(self, s => s.params_mut())
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        dispatch!(self, s => s.tensors())
    }

    fn rank(&self) -> usize {
        dispatch!(self, s => s.rank())
    }
}

impl AdapterState {
    /// Column selection for the spectral kinds.
    pub fn columns(&self) -> Option<&ColumnSelect> {
        match self {
            AdapterState::SpectralA(s) => Some(&s.columns),
            AdapterState::SpectralR(s) => Some(&s.columns),
            _ => None,
        }
    }

    /// Kind-specific hyperparameters as recorded in containers.
    pub fn extras(&self) -> AdapterExtras {
        let mut e = AdapterExtras::default();
        match self {
            AdapterState::LoRA(s) => e.lora_scale = s.scale,
            AdapterState::OFT(s) => e.oft_shared = s.shared,
            AdapterState::LiDB(s) => {
                e.lidb_a = s.a.rows();
                e.lidb_b = s.b_t.rows();
            }
            _ => {}
        }
        e
    }

    /// Adds `N(0, std²)` noise to every trainable scalar.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        for p in self.params_mut() {
            for x in p.iter_mut() {
                *x += std * gaussian(rng);
            }
        }
    }

    /// Rebuilds a state from container tensors.
    pub fn from_tensors(
        kind: AdapterKind,
        rank: usize,
        columns: Option<ColumnSelect>,
        extras: &AdapterExtras,
        mut tensors: Vec<NamedTensor>,
    ) -> Result<Self> {
        let state = match kind {
            AdapterKind::SpectralA => AdapterState::SpectralA(SpectralAState {
                a_u: take_tensor(&mut tensors, "a_u")?,
                a_v: take_tensor(&mut tensors, "a_v")?,
                columns: columns.ok_or_else(|| Error::Format("SpectralA container needs columns".into()))?,
            }),
            AdapterKind::SpectralR => AdapterState::SpectralR(SpectralRState {
                raw_u: take_tensor(&mut tensors, "raw_u")?,
                raw_v: take_tensor(&mut tensors, "raw_v")?,
                columns: columns.ok_or_else(|| Error::Format("SpectralR container needs columns".into()))?,
            }),
            AdapterKind::LoRA => AdapterState::LoRA(LoRAState {
                a: take_tensor(&mut tensors, "a")?,
                b: take_tensor(&mut tensors, "b")?,
                scale: extras.lora_scale,
            }),
            AdapterKind::OFT => OFTState::from_tensors(rank, extras.oft_shared, &mut tensors).map(AdapterState::OFT)?,
            AdapterKind::SVDiff => AdapterState::SVDiff(SVDiffState {
                delta_s: take_tensor(&mut tensors, "delta_s")?.into_vec(),
            }),
            AdapterKind::VeRA => AdapterState::VeRA(VeRAState {
                a: take_tensor(&mut tensors, "a")?,
                b: take_tensor(&mut tensors, "b")?,
                lambda_a: take_tensor(&mut tensors, "lambda_a")?.into_vec(),
                lambda_b: take_tensor(&mut tensors, "lambda_b")?.into_vec(),
            }),
            AdapterKind::LiDB => AdapterState::LiDB(LiDBState {
                a_aux: take_tensor(&mut tensors, "a_aux")?,
                b_aux: take_tensor(&mut tensors, "b_aux")?,
                a: take_tensor(&mut tensors, "a")?,
                b_t: take_tensor(&mut tensors, "b_t")?,
            }),
            AdapterKind::DoRAVector => AdapterState::DoRAVector(DoRAVectorState {
                magnitude: take_tensor(&mut tensors, "magnitude")?.into_vec(),
                direction_b: take_tensor(&mut tensors, "direction_b")?,
                direction_a: take_tensor(&mut tensors, "direction_a")?,
            }),
        };
        if let Some(extra) = tensors.first() {
            return Err(Error::Format(format!("unexpected tensor '{}' for {kind}", extra.name)));
        }
        Ok(state)
    }
}

/// Initialization request for [`init_adapter`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub rank: usize,
    /// Spectral kinds only; defaults to the top `rank` columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<ColumnSelect>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub extras: AdapterExtras,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, rank: usize) -> Self {
        Self {
            kind,
            rank,
            columns: None,
            seed: 0,
            extras: AdapterExtras::default(),
        }
    }

    pub fn with_columns(mut self, columns: ColumnSelect) -> Self {
        self.columns = Some(columns);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_extras(mut self, extras: AdapterExtras) -> Self {
        self.extras = extras;
        self
    }

    pub fn init(&self, base: &AdapterBase) -> Result<AdapterState> {
        let columns = self.columns.clone().unwrap_or_else(|| ColumnSelect::top(self.rank));
        let (n, m) = base.shape();
        let mut rng = seeded(self.seed);
        let state = match self.kind {
            AdapterKind::SpectralA => {
                spectral::check_columns(base, self.rank, &columns)?;
                AdapterState::SpectralA(SpectralAState::zeros(n, m, columns))
            }
            AdapterKind::SpectralR => {
                spectral::check_columns(base, self.rank, &columns)?;
                AdapterState::SpectralR(SpectralRState::identity(columns))
            }
            AdapterKind::LoRA => AdapterState::LoRA(LoRAState::init(n, m, self.rank, self.extras.lora_scale, &mut rng)),
            AdapterKind::OFT => AdapterState::OFT(OFTState::identity(n, self.rank, self.extras.oft_shared)?),
            AdapterKind::SVDiff => AdapterState::SVDiff(SVDiffState::zeros(base.k())),
            AdapterKind::VeRA => {
                AdapterState::VeRA(VeRAState::init(n, m, self.rank, self.extras.vera_lambda_a_init, &mut rng))
            }
            AdapterKind::LiDB => {
                AdapterState::LiDB(LiDBState::init(n, m, self.rank, self.extras.lidb_a, self.extras.lidb_b, &mut rng))
            }
            AdapterKind::DoRAVector => AdapterState::DoRAVector(DoRAVectorState::init(base.weight(), self.rank, &mut rng)?),
        };
        Ok(state)
    }
}

/// Zero-delta adapter of `kind` over `base`.
pub fn init_adapter(
    kind: AdapterKind,
    base: &AdapterBase,
    rank: usize,
    columns: Option<ColumnSelect>,
    seed: u64,
) -> Result<AdapterState> {
    AdapterSpec {
        kind,
        rank,
        columns,
        seed,
        extras: AdapterExtras::default(),
    }
    .init(base)
}

/// Rank-capacity guarantee warning for Spectral^A with `2·rank > min(n, m)`.
pub fn capacity_warning(kind: AdapterKind, rank: usize, n: usize, m: usize) -> Option<String> {
    (kind == AdapterKind::SpectralA && 2 * rank > n.min(m)).then(|| {
        format!(
            "SpectralA rank {rank} exceeds min(n, m)/2 = {}; the doubled rank capacity no longer applies",
            n.min(m) / 2
        )
    })
}

/// The adapted weight.
pub fn effective_weight(base: &AdapterBase, state: &AdapterState) -> Result<Matrix> {
    state.effective_weight(base)
}

/// Finalizes an adapter into a plain weight matrix.
pub fn merge(base: &AdapterBase, state: &AdapterState) -> Result<Matrix> {
    state.effective_weight(base)
}
