#![no_std]
extern crate alloc;

pub mod digest;
pub mod fixed;
pub mod prefix_dag;
pub mod race;
pub mod bounds;
pub mod budget;
pub mod ledger;
pub mod search;
pub mod baselines;
pub mod oracle;
pub mod validator;
