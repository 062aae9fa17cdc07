//! Policy-gradient training for small attention encoder-decoder translation
//! models: smoothed sentence-BLEU rewards with optional shaping, a learned
//! baseline, the mixed MLE/RL objective, monolingual-data recipes, and
//! brute-force oracles for tiny output spaces.

pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rltrain;
pub mod semisup;
pub mod tensor;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
