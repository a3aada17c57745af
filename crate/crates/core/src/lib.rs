//! Sequential density ratio estimation laboratory.

pub mod diffcore;
pub mod gauss;
pub mod harness;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod sprt;
pub mod tandem;
