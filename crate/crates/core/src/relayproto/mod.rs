//! Node roles, the authenticated classical wire protocol, the T/R transfer
//! trigger and the hop-by-hop relay state machine.

mod node;
mod policy;
mod role;
mod wire;

pub use node::{
    node_name, BatchOutcome, Envelope, Input, KeyOp, LinkEnd, LinkEndSnapshot, Micros, Node, NodeCounters, NodeFaults,
    NodeId, NodeSetup, NodeSnapshot, NodeTiming, TriggerRecord, UsageEvent, WireLogEntry, SECOND,
};
pub use policy::{nm_trigger, PolicyError, TransferPolicy};
pub use role::{validate_chain, NodeKind, NodeRole};
pub use wire::{
    decode_wire, encode_wire, frame_len, Channel, ChannelKind, ChannelState, ChannelStats, ErrorCode, KeyHop,
    LinkReport, Payload, StatsReport, WireError, WireMessage, HEADER_LEN, MAX_FRAME_LEN, MIN_FRAME_LEN, TAG_LEN,
    WIRE_VERSION,
};
