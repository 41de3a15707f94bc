//! Command-line front end for CultivAgents: scripted runs, persona file
//! checks, and the WebSocket chat service.

pub mod personas;
pub mod run;
pub mod server;

/// Every round completed and every invariant held.
pub const EXIT_OK: i32 = 0;
/// The invariant checker found a violation.
pub const EXIT_INVARIANT: i32 = 1;
/// Bad input: malformed scenario, invalid persona file, bad configuration.
pub const EXIT_INPUT: i32 = 2;
/// The run did not finish cleanly: a round ended with an error frame, or
/// the session could not be created or persisted.
pub const EXIT_ROUND_ERROR: i32 = 3;
