//! Galerkin discretization of anisotropic singular perturbation problems on
//! rectangles, with error diagnostics and semigroup studies.

pub mod assembly;
pub mod coefficients;
pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod export;
pub mod expr;
pub mod field;
pub mod linsolve;
pub mod quadrature;
pub mod semigroup;
pub mod sparse;
pub mod tensor_spaces;

pub use error::{Error, Result};
pub use expr::Expr;
pub use quadrature::QuadratureRule;
pub use sparse::CsrMatrix;
pub use tensor_spaces::{build_space, BasisKind, GalerkinSpace, Interval, TensorDomain};
