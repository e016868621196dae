pub mod explain;
pub mod fit;
pub mod refute;
pub mod run_all;
pub mod simulate;
pub mod trajectory;
