pub mod engine;
pub mod topology;
pub mod transport;
pub mod controller;
pub mod fabric;
pub mod replication;
pub mod sim;
pub mod analysis;
