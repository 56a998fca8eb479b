pub mod config;
pub mod control;
pub mod ekf;
pub mod geom;
pub mod harness;
pub mod mapio;
pub mod mcl;
pub mod perception;
pub mod sensors;
pub mod slam;
pub mod teleop;
pub mod vehicle;
pub mod world;
