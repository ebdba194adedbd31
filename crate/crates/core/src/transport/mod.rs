//! Moving the parameter store between peers over TCP.

mod node;
pub mod wire;

pub use node::{run_node_with, run_peer_node, NodeConfig, NodeOutcome};
pub use wire::{recv_params, send_params, Hello, MessageType, Token, WireMessage};
