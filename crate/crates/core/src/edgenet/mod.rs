//! Edge topology, link cost model and the hello-based perception protocol.

mod hello;
mod perception;
mod topology;

pub use hello::{
    decode_hello, encode_hello, HelloMessage, ResourceStatus, HELLO_LEN, HELLO_TYPE, MODEL_ADVERT_BYTES,
};
pub use perception::{maybe_advertise, neighbor_view, NeighborView, PerceptionAgent, PerceptionConfig};
pub use topology::{transfer_time, CloudLink, EdgeTopology, Hop, LinkSpec, ServerId, ServerSpec};
