pub mod grad;
pub mod nets;
pub mod shape;
pub mod train;
pub mod transfer;
