//! Desk-scale laboratory for annotation bootstrapping: contrastive reward
//! learning over image views combined with TD-style value bootstrapping
//! between random crops, certified against an exact finite-MDP oracle.

pub mod ad;
pub mod blob;
pub mod bootstrap;
pub mod evalkit;
pub mod run;
pub mod geometry;
pub mod models;
pub mod oracle;
pub mod rewards;
pub mod synthdata;
