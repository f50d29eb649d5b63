//! Running axum routers, in the foreground for the CLI or on a background
//! thread for tests and embedding.

use std::net::SocketAddr;
use std::thread::JoinHandle;

use axum::Router;
use tokio::sync::oneshot;

use sciunit_core::{Error, Result};

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Internal(format!("starting the async runtime: {e}")))
}

async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Transport(format!("binding {addr}: {e}")))
}

/// Serves `router` until the process is stopped. `ready` receives the bound address.
pub fn serve_forever(router: Router, addr: SocketAddr, ready: impl FnOnce(SocketAddr)) -> Result<()> {
    runtime()?.block_on(async move {
        let listener = bind(addr).await?;
        let local = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
        ready(local);
        axum::serve(listener, router)
            .await
            .map_err(|e| Error::Transport(format!("serving on {local}: {e}")))
    })
}

/// A server on its own thread, stopped when dropped.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn spawn(router: Router, addr: SocketAddr) -> Result<Self> {
        let rt = runtime()?;
        let listener = rt.block_on(bind(addr))?;
        let local = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(async move {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(BackgroundServer {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
