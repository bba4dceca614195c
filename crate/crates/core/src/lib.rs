pub mod allocation;
pub mod btm;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod inference;
pub mod lm;
pub mod seeding;
pub mod synthetic;

pub use error::{Error, Result};
