pub mod basis;
pub mod error;
pub mod fields;
pub mod mesh;
pub mod quadrature;
pub mod space;
pub mod sparse;
pub mod forms;
pub mod limiter;
pub mod checks;
pub mod diagnostics;
pub mod solver;
pub mod scenarios;
pub mod output;
