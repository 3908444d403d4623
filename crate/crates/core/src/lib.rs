pub mod anchor;
pub mod audit;
pub mod blindsig;
mod hexser;
pub mod keys;
pub mod merkle;
mod prime;
pub mod protocol;
pub mod registry;
pub mod sim;
pub mod trace;
