pub mod cluster;
pub mod corpus;
pub mod guestvm;
pub mod harness;
pub mod kernel;
pub mod memimg;
pub mod runtime;
