//! Agent server, campaign runner, file formats and CLI around
//! [`probekit_core`].

pub mod agent;
pub mod cli;
pub mod clock;
pub mod formats;
pub mod record;
pub mod remote;
pub mod report;

pub use probekit_core as core;
