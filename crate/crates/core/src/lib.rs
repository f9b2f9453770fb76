pub mod gda;
pub mod grid;
pub mod losses;
pub mod net;
pub mod nn;
pub mod preprocess;
pub mod train;
