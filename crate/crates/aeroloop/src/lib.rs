//! Pipeline driver, review/IAR HTTP service and mock backend server.

pub mod config;
pub mod mock_server;
pub mod pipeline;
pub mod service;
