//! Built-in model matrices and contrast presets.
//!
//! The two-parent/two-hybrid design has 4 varieties × 4 libraries (16 samples, variety
//! major: B73, Mo17, B73×Mo17, Mo17×B73) and 5 coefficients:
//!
//! ```text
//! X = [ A ⊗ 1₄ , 1₄ ⊗ (1, 1, −1, −1)ᵀ ]      A = | 1  1 −1  0 |
//!                                                 | 1 −1  1  0 |
//!                                                 | 1  1  1  1 |
//!                                                 | 1  1  1 −1 |
//! ```
//!
//! β₁ is the parental mean, β₂ and β₃ are half-differences between the hybrid mean and
//! Mo17 and B73 respectively, β₄ is half the difference between the hybrids and β₅ is a
//! flow-cell block effect.

use ndarray::{array, Array2};

use crate::error::{Error, Result};
use crate::stats::{ContrastSpec, ContrastTerm, GeneIndex, ParamDims, ParamRef};

pub const HETEROSIS_DESIGN_NAME: &str = "paschold";

/// Kronecker product of two matrices.
pub fn kronecker(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| {
        a[[i / br, j / bc]] * b[[i % br, j % bc]]
    })
}

/// The 16 × 5 two-parent/two-hybrid model matrix.
pub fn heterosis_design() -> Array2<f64> {
    let varieties = array![
        [1.0, 1.0, -1.0, 0.0],
        [1.0, -1.0, 1.0, 0.0],
        [1.0, 1.0, 1.0, 1.0],
        [1.0, 1.0, 1.0, -1.0]
    ];
    let ones = Array2::ones((4, 1));
    let block = array![[1.0], [1.0], [-1.0], [-1.0]];
    ndarray::concatenate![
        ndarray::Axis(1),
        kronecker(&varieties, &ones),
        kronecker(&ones, &block)
    ]
}

/// Sample names matching the rows of [`heterosis_design`].
pub fn heterosis_sample_names() -> Vec<String> {
    let varieties = ["B73", "Mo17", "B73xMo17", "Mo17xB73"];
    varieties
        .iter()
        .flat_map(|v| (1..=4).map(move |r| format!("{v}_{r}")))
        .collect()
}

/// Model matrix by template name.
pub fn named_design(name: &str) -> Option<Array2<f64>> {
    match name {
        HETEROSIS_DESIGN_NAME => Some(heterosis_design()),
        _ => None,
    }
}

/// Per-gene heterosis contrasts for [`heterosis_design`]. Each hybrid is compared with
/// both parents; hybrid minus parent differences are
/// B73×Mo17: 2β₂ + β₄ (vs Mo17) and 2β₃ + β₄ (vs B73);
/// Mo17×B73: 2β₂ − β₄ and 2β₃ − β₄.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heterosis {
    HighParentBxM,
    LowParentBxM,
    HighParentMxB,
    LowParentMxB,
}

impl Heterosis {
    pub const ALL: [Heterosis; 4] = [
        Heterosis::HighParentBxM,
        Heterosis::LowParentBxM,
        Heterosis::HighParentMxB,
        Heterosis::LowParentMxB,
    ];

    pub fn preset_name(self) -> &'static str {
        match self {
            Heterosis::HighParentBxM => "heterosis_high_bxm",
            Heterosis::LowParentBxM => "heterosis_low_bxm",
            Heterosis::HighParentMxB => "heterosis_high_mxb",
            Heterosis::LowParentMxB => "heterosis_low_mxb",
        }
    }

    pub fn from_preset(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.preset_name() == name)
    }

    pub fn contrast(self, dims: &ParamDims) -> Result<ContrastSpec> {
        if dims.coefs < 4 {
            return Err(Error::Contrast {
                id: self.preset_name().into(),
                reason: format!("needs at least 4 coefficients, model has {}", dims.coefs),
            });
        }
        let (sign, hybrid) = match self {
            Heterosis::HighParentBxM => (1.0, 1.0),
            Heterosis::LowParentBxM => (-1.0, 1.0),
            Heterosis::HighParentMxB => (1.0, -1.0),
            Heterosis::LowParentMxB => (-1.0, -1.0),
        };
        let beta = |l| ParamRef::Beta(GeneIndex::Each, l);
        let term = |parent: usize| ContrastTerm {
            coefs: vec![(beta(parent), 2.0 * sign), (beta(3), hybrid * sign)],
            threshold: 0.0,
        };
        ContrastSpec::new(self.preset_name(), vec![term(1), term(2)], dims)
    }
}
