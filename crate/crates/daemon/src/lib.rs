//! The store daemon: owns one store and serves clients over a Unix socket.
//! Each connection is a session with its own temp roots, released when the
//! client goes away. All sessions share one build coordinator, so
//! concurrent requests for the same derivation run one builder.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use hermit_core::build::BuildCoordinator;
use hermit_core::ops::{LocalStore, StoreOps};
use hermit_core::store::{Store, StoreConfig, StorePath};
use hermit_protocol::{Frame, ProtocolError, Request, Response, PROTOCOL_VERSION};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{UnixListener, UnixStream};
use tokio::sync::oneshot;
use tracing::{debug, info, warn};

pub const SOCKET_NAME: &str = "daemon.socket";

pub const STATE_VAR: &str = "HERMIT_STATE";
pub const STORE_VAR: &str = "HERMIT_STORE";

/// `<state_dir>/daemon.socket`.
pub fn socket_path(state_dir: &Path) -> PathBuf {
    state_dir.join(SOCKET_NAME)
}

/// `$HERMIT_STATE`, else `~/.hermit`.
pub fn default_state_dir() -> PathBuf {
    match std::env::var_os(STATE_VAR).filter(|v| !v.is_empty()) {
        Some(dir) => PathBuf::from(dir),
        None => std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("/"))
            .join(".hermit"),
    }
}

/// Store layout for a state directory. The store lives at `logical_root`
/// (default `<state_dir>/store`), which is also where its items are kept.
pub fn store_config(state_dir: &Path, logical_root: Option<&str>) -> hermit_core::Result<StoreConfig> {
    let state_dir = std::path::absolute(state_dir).map_err(|e| hermit_core::Error::Io(format!("{}: {e}", state_dir.display())))?;
    let root = match logical_root {
        Some(r) => r.to_string(),
        None => state_dir
            .join("store")
            .to_str()
            .ok_or_else(|| hermit_core::Error::Io(format!("non-UTF-8 state directory {}", state_dir.display())))?
            .to_string(),
    };
    Ok(StoreConfig::with_state_dir(root, &state_dir)?)
}

struct Shared {
    config: StoreConfig,
    coordinator: Arc<BuildCoordinator>,
    bootstrap: StorePath,
}

/// Prepares the store for serving: drops leftovers of interrupted writes
/// and makes sure the bootstrap seed is present.
fn prepare(config: StoreConfig) -> hermit_core::Result<Shared> {
    let store = Store::open(config.clone())?;
    let discarded = store.discard_unregistered()?;
    if discarded > 0 {
        info!(discarded, "removed unregistered store entries");
    }
    let local = LocalStore::with_coordinator(store, Arc::new(BuildCoordinator::new()));
    let bootstrap = local.bootstrap()?;
    Ok(Shared {
        config,
        coordinator: local.coordinator().clone(),
        bootstrap,
    })
}

fn bind(socket: &Path) -> io::Result<std::os::unix::net::UnixListener> {
    if let Some(dir) = socket.parent() {
        std::fs::create_dir_all(dir)?;
    }
    match std::os::unix::net::UnixListener::bind(socket) {
        Ok(l) => Ok(l),
        Err(e) if e.kind() == io::ErrorKind::AddrInUse => {
            // A socket nobody answers on is left over from a dead daemon.
            if std::os::unix::net::UnixStream::connect(socket).is_ok() {
                return Err(io::Error::new(
                    io::ErrorKind::AddrInUse,
                    format!("a daemon is already listening on {}", socket.display()),
                ));
            }
            std::fs::remove_file(socket)?;
            std::os::unix::net::UnixListener::bind(socket)
        }
        Err(e) => Err(e),
    }
}

fn session_store(shared: &Shared) -> hermit_core::Result<LocalStore> {
    Ok(LocalStore::with_coordinator(
        Store::open(shared.config.clone())?,
        shared.coordinator.clone(),
    ))
}

fn reply<T>(r: hermit_core::Result<T>, f: impl FnOnce(T) -> Response) -> Response {
    match r {
        Ok(v) => f(v),
        Err(e) => Response::error(e.kind(), e.to_string()),
    }
}

fn handle(store: &LocalStore, req: Request) -> Response {
    match req {
        Request::Hello { .. } => Response::error("protocol", "handshake already done"),
        Request::Ping => Response::Pong {
            version: PROTOCOL_VERSION.into(),
        },
        Request::AddContent { name, archive } => reply(
            store.store().add_archive(&name, &archive).map_err(Into::into),
            Response::Path,
        ),
        Request::Realize { graph, options } => reply(store.realize(&graph, options), Response::Realized),
        Request::QueryValid(p) => reply(store.is_valid(&p), Response::Bool),
        Request::QueryRefs(p) => reply(store.references(&p), |r| Response::Paths(r.into_iter().collect())),
        Request::Closure(roots) => reply(store.closure(&roots), Response::Paths),
        Request::AddRoot { name, target, kind } => reply(store.add_root(&name, &target, kind), Response::Name),
        Request::RemoveRoot(name) => reply(store.remove_root(&name), |()| Response::Unit),
        Request::Gc => reply(store.collect_garbage(), Response::Gc),
        Request::Export(roots) => {
            let mut stream = Vec::new();
            reply(store.export(&roots, &mut stream), |count| Response::Exported {
                count: count as u64,
                stream,
            })
        }
        Request::Import(bytes) => reply(store.import(&mut bytes.as_slice()), Response::Imported),
        Request::Stats => Response::Stats {
            spawns: store.coordinator().spawns(),
        },
    }
}

async fn read_request(conn: &mut UnixStream) -> Result<Option<Frame>, ProtocolError> {
    let mut header = [0u8; 4];
    match conn.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = Frame::body_len(header)?;
    let mut body = vec![0u8; len];
    conn.read_exact(&mut body).await?;
    Frame::from_body(body).map(Some)
}

async fn send(conn: &mut UnixStream, resp: &Response) -> io::Result<()> {
    let bytes = resp
        .encode()
        .to_bytes()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    conn.write_all(&bytes).await
}

async fn session(mut conn: UnixStream, shared: Arc<Shared>, id: u64) {
    let store = {
        let shared = shared.clone();
        match tokio::task::spawn_blocking(move || session_store(&shared)).await {
            Ok(Ok(s)) => Arc::new(s),
            Ok(Err(e)) => {
                let _ = send(&mut conn, &Response::error(e.kind(), e.to_string())).await;
                return;
            }
            Err(_) => return,
        }
    };
    let mut greeted = false;
    loop {
        let frame = match read_request(&mut conn).await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                debug!(session = id, "bad frame: {e}");
                let _ = send(&mut conn, &Response::error("protocol", e.to_string())).await;
                break;
            }
        };
        let req = match Request::decode(&frame) {
            Ok(r) => r,
            Err(e) => {
                let _ = send(&mut conn, &Response::error("protocol", e.to_string())).await;
                break;
            }
        };
        if !greeted {
            match req {
                Request::Hello { version } if version == PROTOCOL_VERSION => {
                    greeted = true;
                    let welcome = Response::Welcome {
                        version: PROTOCOL_VERSION.into(),
                        logical_root: shared.config.logical_root.clone(),
                        physical_root: shared.config.physical_root.display().to_string(),
                        bootstrap: shared.bootstrap.clone(),
                    };
                    if send(&mut conn, &welcome).await.is_err() {
                        break;
                    }
                    continue;
                }
                Request::Hello { version } => {
                    let msg = format!("client speaks protocol {version}, daemon speaks {PROTOCOL_VERSION}");
                    let _ = send(&mut conn, &Response::error("version", msg)).await;
                    break;
                }
                _ => {
                    let _ = send(&mut conn, &Response::error("protocol", "expected HELLO first")).await;
                    break;
                }
            }
        }
        let worker = store.clone();
        // Runs to completion even if the client hangs up meanwhile.
        let resp = match tokio::task::spawn_blocking(move || handle(&worker, req)).await {
            Ok(r) => r,
            Err(e) => Response::error("internal", e.to_string()),
        };
        if send(&mut conn, &resp).await.is_err() {
            break;
        }
    }
    // Dropping the last handle releases the session's temp roots.
    tokio::task::spawn_blocking(move || drop(store));
    debug!(session = id, "session closed");
}

async fn accept_loop(listener: UnixListener, shared: Arc<Shared>, shutdown: oneshot::Receiver<()>) {
    let mut shutdown = shutdown;
    let mut next_id = 0u64;
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => match accepted {
                Ok((conn, _)) => {
                    next_id += 1;
                    tokio::spawn(session(conn, shared.clone(), next_id));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    }
}

/// A daemon serving on a background thread.
pub struct Handle {
    socket: PathBuf,
    coordinator: Arc<BuildCoordinator>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Handle {
    pub fn socket(&self) -> &Path {
        &self.socket
    }

    /// Builder processes started so far.
    pub fn spawns(&self) -> u64 {
        self.coordinator.spawns()
    }

    /// Stops accepting connections and waits for the server thread.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.socket);
    }
}

impl Drop for Handle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Starts serving `config` on `socket` from a background thread.
pub fn spawn(config: StoreConfig, socket: &Path) -> hermit_core::Result<Handle> {
    let shared = Arc::new(prepare(config)?);
    let std_listener = bind(socket).map_err(|e| hermit_core::Error::Io(format!("{}: {e}", socket.display())))?;
    std_listener
        .set_nonblocking(true)
        .map_err(|e| hermit_core::Error::Io(e.to_string()))?;
    let (tx, rx) = oneshot::channel();
    let coordinator = shared.coordinator.clone();
    let thread = std::thread::Builder::new()
        .name("hermitd".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = UnixListener::from_std(std_listener).expect("listener");
                accept_loop(listener, shared, rx).await;
            });
            // Let in-flight blocking work (builds) finish before returning.
            rt.shutdown_timeout(std::time::Duration::from_secs(600));
        })
        .map_err(|e| hermit_core::Error::Io(e.to_string()))?;
    info!(socket = %socket.display(), "daemon listening");
    Ok(Handle {
        socket: socket.to_path_buf(),
        coordinator,
        stop: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until SIGINT or SIGTERM.
pub fn run(config: StoreConfig, socket: &Path) -> hermit_core::Result<()> {
    let handle = spawn(config, socket)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| hermit_core::Error::Io(e.to_string()))?;
    rt.block_on(async {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .map_err(|e| hermit_core::Error::Io(e.to_string()))?;
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
        Ok::<_, hermit_core::Error>(())
    })?;
    info!("shutting down");
    handle.stop();
    Ok(())
}
