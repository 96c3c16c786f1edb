//! Blocking client for the store daemon, plus a [`StoreOps`] backend on top
//! of it.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use hermit_core::archive::{self, ImportReport};
use hermit_core::build::{Realization, RealizeOptions};
use hermit_core::deriv::DerivationGraph;
use hermit_core::ops::{RootKind, StoreOps};
use hermit_core::store::{GcReport, StorePath};
use hermit_protocol::{read_frame, write_frame, ProtocolError, Request, Response, PROTOCOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("daemon not running (no listener at {})", .0.display())]
    DaemonNotRunning(PathBuf),
    #[error("daemon speaks protocol {theirs}, this client speaks {ours}")]
    VersionMismatch { ours: String, theirs: String },
    #[error("connection to the daemon failed: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(ProtocolError),
    #[error("unexpected reply from the daemon: {0}")]
    Unexpected(String),
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
}

impl From<ProtocolError> for ClientError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Io(io) => ClientError::Io(io),
            other => ClientError::Protocol(other),
        }
    }
}

impl From<ClientError> for hermit_core::Error {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Remote { kind, message } => hermit_core::Error::Remote { kind, message },
            other => hermit_core::Error::Remote {
                kind: "daemon".into(),
                message: other.to_string(),
            },
        }
    }
}

type Result<T, E = ClientError> = std::result::Result<T, E>;

/// What the daemon announces after the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Welcome {
    pub logical_root: String,
    pub physical_root: PathBuf,
    pub bootstrap: StorePath,
}

/// One session with the daemon. Requests are answered in order.
pub struct Client {
    stream: UnixStream,
    welcome: Welcome,
}

impl Client {
    /// Connects and performs the version handshake. `timeout` bounds every
    /// read and write; `None` waits indefinitely (builds can take long).
    pub fn connect(socket: &Path, timeout: Option<Duration>) -> Result<Self> {
        let stream = UnixStream::connect(socket).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound | io::ErrorKind::ConnectionRefused => {
                ClientError::DaemonNotRunning(socket.to_path_buf())
            }
            _ => ClientError::Io(e),
        })?;
        stream.set_read_timeout(timeout)?;
        stream.set_write_timeout(timeout)?;
        let mut stream = stream;
        write_frame(
            &mut stream,
            &Request::Hello {
                version: PROTOCOL_VERSION.into(),
            }
            .encode(),
        )?;
        let reply = Response::decode(&read_frame(&mut stream)?)?;
        let welcome = match reply {
            Response::Welcome {
                version,
                logical_root,
                physical_root,
                bootstrap,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(ClientError::VersionMismatch {
                        ours: PROTOCOL_VERSION.into(),
                        theirs: version,
                    });
                }
                Welcome {
                    logical_root,
                    physical_root: PathBuf::from(physical_root),
                    bootstrap,
                }
            }
            Response::Error { kind, message } => return Err(ClientError::Remote { kind, message }),
            other => return Err(ClientError::Unexpected(format!("{other:?}"))),
        };
        Ok(Self { stream, welcome })
    }

    pub fn welcome(&self) -> &Welcome {
        &self.welcome
    }

    /// Sends one request; error replies become [`ClientError::Remote`].
    pub fn call(&mut self, req: &Request) -> Result<Response> {
        write_frame(&mut self.stream, &req.encode())?;
        match Response::decode(&read_frame(&mut self.stream)?)? {
            Response::Error { kind, message } => Err(ClientError::Remote { kind, message }),
            r => Ok(r),
        }
    }

    pub fn ping(&mut self) -> Result<String> {
        match self.call(&Request::Ping)? {
            Response::Pong { version } => Ok(version),
            other => Err(unexpected(other)),
        }
    }

    /// Builder processes the daemon has started so far.
    pub fn spawns(&mut self) -> Result<u64> {
        match self.call(&Request::Stats)? {
            Response::Stats { spawns } => Ok(spawns),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(r: Response) -> ClientError {
    ClientError::Unexpected(format!("{r:?}"))
}

/// A store reached through the daemon.
pub struct RemoteStore {
    client: Mutex<Client>,
    welcome: Welcome,
}

impl RemoteStore {
    pub fn connect(socket: &Path, timeout: Option<Duration>) -> Result<Self> {
        let client = Client::connect(socket, timeout)?;
        let welcome = client.welcome().clone();
        Ok(Self {
            client: Mutex::new(client),
            welcome,
        })
    }

    pub fn call(&self, req: &Request) -> Result<Response> {
        self.client.lock().expect("client").call(req)
    }

    pub fn spawns(&self) -> Result<u64> {
        self.client.lock().expect("client").spawns()
    }
}

fn path_reply(r: Response) -> hermit_core::Result<StorePath> {
    match r {
        Response::Path(p) => Ok(p),
        other => Err(unexpected(other).into()),
    }
}

fn paths_reply(r: Response) -> hermit_core::Result<Vec<StorePath>> {
    match r {
        Response::Paths(p) => Ok(p),
        other => Err(unexpected(other).into()),
    }
}

impl StoreOps for RemoteStore {
    fn logical_root(&self) -> &str {
        &self.welcome.logical_root
    }

    fn physical_root(&self) -> &Path {
        &self.welcome.physical_root
    }

    fn bootstrap(&self) -> hermit_core::Result<StorePath> {
        Ok(self.welcome.bootstrap.clone())
    }

    fn add_content(&self, src: &Path, name: &str) -> hermit_core::Result<StorePath> {
        let archive = archive::dump_path(src)?;
        path_reply(self.call(&Request::AddContent {
            name: name.to_string(),
            archive,
        })?)
    }

    fn add_text(&self, name: &str, contents: &[u8]) -> hermit_core::Result<StorePath> {
        path_reply(self.call(&Request::AddContent {
            name: name.to_string(),
            archive: archive::file_archive(contents, false),
        })?)
    }

    fn realize(&self, graph: &DerivationGraph, options: RealizeOptions) -> hermit_core::Result<Realization> {
        match self.call(&Request::Realize {
            graph: graph.clone(),
            options,
        })? {
            Response::Realized(r) => Ok(r),
            other => Err(unexpected(other).into()),
        }
    }

    fn is_valid(&self, path: &StorePath) -> hermit_core::Result<bool> {
        match self.call(&Request::QueryValid(path.clone()))? {
            Response::Bool(b) => Ok(b),
            other => Err(unexpected(other).into()),
        }
    }

    fn references(&self, path: &StorePath) -> hermit_core::Result<BTreeSet<StorePath>> {
        Ok(paths_reply(self.call(&Request::QueryRefs(path.clone()))?)?
            .into_iter()
            .collect())
    }

    fn closure(&self, roots: &[StorePath]) -> hermit_core::Result<Vec<StorePath>> {
        paths_reply(self.call(&Request::Closure(roots.to_vec()))?)
    }

    fn add_root(&self, name: &str, target: &str, kind: RootKind) -> hermit_core::Result<String> {
        match self.call(&Request::AddRoot {
            name: name.to_string(),
            target: target.to_string(),
            kind,
        })? {
            Response::Name(n) => Ok(n),
            other => Err(unexpected(other).into()),
        }
    }

    fn remove_root(&self, name: &str) -> hermit_core::Result<()> {
        match self.call(&Request::RemoveRoot(name.to_string()))? {
            Response::Unit => Ok(()),
            other => Err(unexpected(other).into()),
        }
    }

    fn collect_garbage(&self) -> hermit_core::Result<GcReport> {
        match self.call(&Request::Gc)? {
            Response::Gc(r) => Ok(r),
            other => Err(unexpected(other).into()),
        }
    }

    fn export(&self, roots: &[StorePath], sink: &mut dyn Write) -> hermit_core::Result<usize> {
        match self.call(&Request::Export(roots.to_vec()))? {
            Response::Exported { count, stream } => {
                sink.write_all(&stream).map_err(|e| hermit_core::Error::Io(e.to_string()))?;
                Ok(count as usize)
            }
            other => Err(unexpected(other).into()),
        }
    }

    fn import(&self, source: &mut dyn Read) -> hermit_core::Result<ImportReport> {
        let mut stream = Vec::new();
        source
            .read_to_end(&mut stream)
            .map_err(|e| hermit_core::Error::Io(e.to_string()))?;
        match self.call(&Request::Import(stream))? {
            Response::Imported(r) => Ok(r),
            other => Err(unexpected(other).into()),
        }
    }
}
