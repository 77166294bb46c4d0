//! Statistical emulation of QKD links and ingestion of their key output.
//!
//! Each link is described by a [`LinkProfile`]. A [`LinkEmulator`] samples
//! one secret-key cycle at a time and writes the keys in the link's vendor
//! delivery format to one medium per link end. A [`FeedReader`] watches its
//! end's medium and ingests new material into the link [`KeyTable`].
//!
//! [`KeyTable`]: crate::keycore::KeyTable

mod emulator;
mod feed;
mod frame;
mod profile;

pub use emulator::{sample_cycle, CycleOutput, LinkEmulator};
pub use feed::{
    detect_update, Detection, FeedCounters, FeedMedium, FeedReader, FeedState, FileMedium, LinkStatus,
    MemoryMedium, Observation, UpdateKind,
};
pub use frame::{encode_qix_frame, parse_qix_frame, FrameError, QixFrame, QixStatus, QIX_FRAME_LEN, QIX_MAGIC};
pub use profile::{DeliveryMode, DisturbanceWindow, LinkProfile, Protocol};
