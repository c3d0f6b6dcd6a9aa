#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use cnp_server::{serve, AppState, DEFAULT_PORT};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let ckpt = std::env::var("CNP_CKPT").context("CNP_CKPT must point at a checkpoint")?;
    let port = match std::env::var("CNP_PORT") {
        Ok(p) => p.parse().context("CNP_PORT is not a port number")?,
        Err(_) => DEFAULT_PORT,
    };
    let data_dir = std::env::var_os("CNP_DATA_DIR").map(PathBuf::from);
    let state = AppState::from_checkpoint(&ckpt, data_dir).with_context(|| format!("loading {ckpt}"))?;
    serve(Arc::new(state), port).await
}
