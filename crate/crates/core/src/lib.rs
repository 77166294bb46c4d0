pub mod audit;
pub mod keycore;
pub mod qkdlink;
pub mod relayproto;
pub mod simharness;
pub mod telemetry;
