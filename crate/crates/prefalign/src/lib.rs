//! Preference alignment on tabular softmax policies.
//!
//! Every policy here is a table of logits, one row per prompt, so the RLHF
//! optimum, the DPO/CPO/E-CPOC losses and their gradients are all available
//! in closed form or by brute force. That makes each guarantee about these
//! losses something a test can check.
//!
//! ```
//! use prefalign::policy::{ResponseSpace, TabularPolicy};
//! use prefalign::prefmodel::RewardTable;
//! use prefalign::solvers::{rlhf_closed_form, rlhf_delta};
//!
//! let space = ResponseSpace::new(vec![2]).unwrap();
//! let reference = TabularPolicy::new(space.clone(), vec![vec![-1.0, 0.0]]).unwrap();
//! let reward = RewardTable::new(space, vec![vec![0.5, 0.0]]).unwrap();
//! let optimal = rlhf_closed_form(&reference, &reward, 0.5).unwrap();
//! let delta = optimal.delta(0, 0, 1).unwrap();
//! assert!((delta - rlhf_delta(-1.0, 0.5, 0.5)).abs() < 1e-12);
//! ```

pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod numeric;
pub mod oracles;
pub mod policy;
pub mod prefmodel;
pub mod solvers;
pub mod trainer;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests through these modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/preferences.md")]
    mod preferences {}
    #[doc = include_str!("../../../book/src/rlhf.md")]
    mod rlhf {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
