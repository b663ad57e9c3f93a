pub mod error;
pub mod grad;
pub mod lqg;
pub mod oracle;
pub mod divergence;
pub mod frank_wolfe;
pub mod output;
pub mod matops;
pub mod random;
pub mod stacked;
pub mod inf_horizon;
pub mod experiments;

pub use error::{Error, Result};
pub use matops::Mat;
