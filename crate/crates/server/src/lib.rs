//! HTTP front end for the tutor.
//!
//! JSON endpoints plus a server-sent-event stream per message, bound to
//! loopback unless LAN access is explicitly allowed. The listener holds no
//! state of its own: it can be stopped and started again over the same
//! [`AppState`] without losing sessions.

mod api;

use std::io;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tutor_core::config::ServerSection;
use tutor_core::net::{is_loopback, is_private_or_loopback, NetworkLayer};
use tutor_core::Tutor;

pub use api::router;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub bind_address: IpAddr,
    pub port: u16,
    pub allow_lan: bool,
    pub static_ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServerSection::default().into()
    }
}

impl From<ServerSection> for ServiceConfig {
    fn from(s: ServerSection) -> Self {
        Self {
            bind_address: s.bind_address,
            port: s.port,
            allow_lan: s.allow_lan,
            static_ui_dir: s.static_ui_dir,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("refusing to bind {0}: only loopback addresses are allowed without --allow-lan")]
    NotLoopback(IpAddr),
    #[error("refusing to bind {0}: --allow-lan permits loopback or private-range addresses only")]
    NotPrivate(IpAddr),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let ip = self.bind_address;
        if self.allow_lan {
            if !is_private_or_loopback(ip) {
                return Err(ServiceError::NotPrivate(ip));
            }
        } else if !is_loopback(ip) {
            return Err(ServiceError::NotLoopback(ip));
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind_address, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadStatus {
    Pending,
    Loading,
    Ready,
    Failed(String),
}

/// Shared by every request.
#[derive(Debug, Clone)]
pub struct AppState {
    pub tutor: Arc<Tutor>,
    pub started: Instant,
    load: Arc<Mutex<LoadStatus>>,
}

impl AppState {
    pub fn new(tutor: Arc<Tutor>) -> Self {
        Self {
            tutor,
            started: Instant::now(),
            load: Arc::new(Mutex::new(LoadStatus::Pending)),
        }
    }

    pub fn load_status(&self) -> LoadStatus {
        self.load.lock().expect("load status poisoned").clone()
    }

    fn set_load_status(&self, status: LoadStatus) {
        *self.load.lock().expect("load status poisoned") = status;
    }

    /// Selects and loads the startup model on a blocking thread, so the
    /// listener can answer `/health` while the weights load.
    pub fn spawn_model_load(&self) -> JoinHandle<()> {
        let state = self.clone();
        state.set_load_status(LoadStatus::Loading);
        tokio::task::spawn_blocking(move || match state.tutor.select_and_load() {
            Ok(active) => {
                tracing::info!(
                    model = %active.selection.chosen.model_id,
                    tier = active.selection.chosen.tier,
                    reason = %active.selection.reason,
                    "startup model ready"
                );
                state.set_load_status(LoadStatus::Ready);
            }
            Err(e) => {
                tracing::error!("startup model load failed: {e}");
                state.set_load_status(LoadStatus::Failed(e.to_string()));
            }
        })
    }
}

/// A listener serving the API until [`RunningServer::stop`].
#[derive(Debug)]
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl RunningServer {
    pub async fn stop(mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(io::Error::other)?
    }

    /// Resolves when the server exits on its own (it normally does not).
    pub async fn wait(self) -> io::Result<()> {
        self.task.await.map_err(io::Error::other)?
    }
}

/// Binds through the network layer and starts serving on the current
/// tokio runtime.
pub async fn start(state: AppState, config: &ServiceConfig, net: &dyn NetworkLayer) -> Result<RunningServer, ServiceError> {
    config.validate()?;
    let want = config.socket_addr();
    let bind_err = |source| ServiceError::Bind { addr: want, source };
    let std_listener = net.bind(want).map_err(bind_err)?;
    std_listener.set_nonblocking(true).map_err(bind_err)?;
    let listener = tokio::net::TcpListener::from_std(std_listener).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    if config.allow_lan && !is_loopback(addr.ip()) {
        tracing::warn!("serving on {addr} without authentication; anyone on this network can use the tutor");
    }
    let app = router(state, config.static_ui_dir.as_deref());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!("listening on http://{addr}");
    Ok(RunningServer {
        addr,
        shutdown: Some(tx),
        task,
    })
}
