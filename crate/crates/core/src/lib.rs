pub mod agent;
pub mod control;
pub mod dynamics;
pub mod harness;
pub mod mixer;
pub mod neural;
pub mod trajectory;
