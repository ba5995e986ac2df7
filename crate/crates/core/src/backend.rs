//! GPN1: framed binary protocol for out-of-process noise predictors.
//!
//! Every message is one frame, all integers little-endian:
//!
//! ```text
//! offset size field
//!      0    4 magic     "GPN1"
//!      4    1 msg_type  0 = PredictRequest, 1 = PredictResponse, 2 = Error, 3 = Hello
//!      5    2 t         diffusion step (u16)
//!      7    2 batch     number of volumes (u16)
//!      9    6 dims      nx, ny, nz (3 x u16)
//!     15    - payload   4 * batch * nx * ny * nz bytes
//! ```
//!
//! Predict payloads are `f32` volumes in x-fastest order, one after another.
//! Hello frames carry `batch = 0` and advertise the largest window the sender
//! supports in `dims`. Error frames carry a UTF-8 message zero-padded to a
//! multiple of 4 bytes, with `batch = 1` and `dims = (padded_len / 4, 1, 1)`.
//!
//! A session opens with the client sending Hello and the server answering
//! with its own Hello; afterwards the client sends one PredictRequest at a
//! time and waits for a PredictResponse or Error.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::ddpm::{DdpmError, Denoiser};
use crate::voxel::{Dims, ScalarVolume};

pub const MAGIC: &[u8; 4] = b"GPN1";
pub const HEADER_LEN: usize = 15;
/// Frames announcing a larger payload are rejected as malformed.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("timed out connecting to backend")]
    ConnectTimeout,
    #[error("timed out waiting for backend response")]
    RequestTimeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend reported: {0}")]
    Remote(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<BackendError> for DdpmError {
    fn from(e: BackendError) -> Self {
        DdpmError::Backend(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    PredictRequest = 0,
    PredictResponse = 1,
    Error = 2,
    Hello = 3,
}

impl TryFrom<u8> for MsgType {
    type Error = BackendError;
    fn try_from(v: u8) -> Result<Self, BackendError> {
        Ok(match v {
            0 => MsgType::PredictRequest,
            1 => MsgType::PredictResponse,
            2 => MsgType::Error,
            3 => MsgType::Hello,
            other => return Err(BackendError::Protocol(format!("unknown msg_type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub t: u16,
    pub batch: u16,
    pub dims: [u16; 3],
    /// Raw payload bytes; length is `4 * batch * nx * ny * nz`.
    pub payload: Vec<u8>,
}

fn payload_len(batch: u16, dims: [u16; 3]) -> usize {
    let n = 4 * batch as u128 * dims[0] as u128 * dims[1] as u128 * dims[2] as u128;
    usize::try_from(n).unwrap_or(usize::MAX)
}

impl Frame {
    pub fn hello(max_dims: [u16; 3]) -> Self {
        Frame {
            msg_type: MsgType::Hello,
            t: 0,
            batch: 0,
            dims: max_dims,
            payload: Vec::new(),
        }
    }

    pub fn error(message: &str) -> Self {
        let mut payload = message.as_bytes().to_vec();
        payload.truncate(4 * u16::MAX as usize);
        while !payload.len().is_multiple_of(4) {
            payload.push(0);
        }
        Frame {
            msg_type: MsgType::Error,
            t: 0,
            batch: 1,
            dims: [(payload.len() / 4) as u16, 1, 1],
            payload,
        }
    }

    /// Packs equally sized volumes into a predict frame.
    pub fn volumes(msg_type: MsgType, t: u16, volumes: &[ScalarVolume]) -> Result<Self, BackendError> {
        let first = volumes
            .first()
            .ok_or_else(|| BackendError::InvalidRequest("empty batch".into()))?;
        let dims = wire_dims(first.dims())?;
        let batch = u16::try_from(volumes.len())
            .map_err(|_| BackendError::InvalidRequest("batch exceeds u16".into()))?;
        let mut payload = Vec::with_capacity(payload_len(batch, dims));
        for v in volumes {
            if v.dims() != first.dims() {
                return Err(BackendError::InvalidRequest("non-uniform batch dims".into()));
            }
            for &f in v.data() {
                payload.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(Frame {
            msg_type,
            t,
            batch,
            dims,
            payload,
        })
    }

    pub fn to_volumes(&self) -> Result<Vec<ScalarVolume>, BackendError> {
        let dims = Dims::new(self.dims[0] as usize, self.dims[1] as usize, self.dims[2] as usize)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let n = dims.len() * 4;
        self.payload
            .chunks_exact(n)
            .take(self.batch as usize)
            .map(|chunk| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                ScalarVolume::from_vec(dims, data).map_err(|e| BackendError::Protocol(e.to_string()))
            })
            .collect()
    }

    pub fn error_message(&self) -> String {
        let end = self
            .payload
            .iter()
            .rposition(|&b| b != 0)
            .map_or(0, |i| i + 1);
        String::from_utf8_lossy(&self.payload[..end]).into_owned()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.batch.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, BackendError> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor)?
            .ok_or_else(|| BackendError::Protocol("empty input".into()))?;
        if !cursor.is_empty() {
            return Err(BackendError::Protocol(format!("{} trailing bytes", cursor.len())));
        }
        Ok(frame)
    }
}

fn wire_dims(dims: Dims) -> Result<[u16; 3], BackendError> {
    let mut out = [0u16; 3];
    for (o, d) in out.iter_mut().zip(dims.as_array()) {
        *o = u16::try_from(d)
            .map_err(|_| BackendError::InvalidRequest(format!("dimension {d} exceeds u16")))?;
    }
    Ok(out)
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u16, u16, [u16; 3]), BackendError> {
    if &h[0..4] != MAGIC {
        return Err(BackendError::Protocol(format!("bad magic {:?}", &h[0..4])));
    }
    let msg_type = MsgType::try_from(h[4])?;
    let u16_at = |i: usize| u16::from_le_bytes([h[i], h[i + 1]]);
    Ok((msg_type, u16_at(5), u16_at(7), [u16_at(9), u16_at(11), u16_at(13)]))
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before the
/// first header byte.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Frame>, BackendError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(BackendError::Protocol("truncated header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(map_read_error(e)),
        }
    }
    let (msg_type, t, batch, dims) = parse_header(&header)?;
    let len = payload_len(batch, dims);
    if len > MAX_PAYLOAD {
        return Err(BackendError::Protocol(format!("payload of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            BackendError::Protocol("truncated payload".into())
        } else {
            map_read_error(e)
        }
    })?;
    Ok(Some(Frame {
        msg_type,
        t,
        batch,
        dims,
        payload,
    }))
}

fn map_read_error(e: io::Error) -> BackendError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BackendError::RequestTimeout,
        _ => BackendError::Io(e),
    }
}

pub fn write_frame(writer: &mut impl Write, frame: &Frame) -> Result<(), BackendError> {
    writer.write_all(&frame.encode())?;
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// `host:port`
    Tcp(String),
    /// Child process speaking the protocol on stdin/stdout.
    Stdio { program: String, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendEndpoint {
    pub transport: Transport,
    pub timeout: Duration,
}

impl BackendEndpoint {
    pub fn tcp(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            transport: Transport::Tcp(addr.into()),
            timeout,
        }
    }

    /// Parses `tcp:HOST:PORT` or `stdio:PROGRAM [ARGS...]`.
    pub fn parse(spec: &str, timeout: Duration) -> Result<Self, BackendError> {
        if timeout.is_zero() {
            return Err(BackendError::InvalidEndpoint("timeout must be > 0".into()));
        }
        let transport = if let Some(addr) = spec.strip_prefix("tcp:") {
            if !addr.contains(':') {
                return Err(BackendError::InvalidEndpoint(format!("missing port in {spec:?}")));
            }
            Transport::Tcp(addr.to_string())
        } else if let Some(cmd) = spec.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| BackendError::InvalidEndpoint("empty stdio command".into()))?;
            Transport::Stdio {
                program,
                args: parts.collect(),
            }
        } else {
            return Err(BackendError::InvalidEndpoint(format!("unknown transport in {spec:?}")));
        };
        Ok(Self { transport, timeout })
    }
}

/// One protocol session. Requests are strictly sequential.
pub struct BackendClient {
    writer: Box<dyn Write + Send>,
    frames: Receiver<Result<Frame, BackendError>>,
    timeout: Duration,
    max_dims: [u16; 3],
    child: Option<Child>,
    broken: bool,
}

impl std::fmt::Debug for BackendClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendClient")
            .field("max_dims", &self.max_dims)
            .field("timeout", &self.timeout)
            .field("broken", &self.broken)
            .finish()
    }
}

fn spawn_reader(mut reader: impl Read + Send + 'static) -> Receiver<Result<Frame, BackendError>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => {
                if tx.send(Ok(frame)).is_err() {
                    break;
                }
            }
            Ok(None) => {
                let _ = tx.send(Err(BackendError::Protocol("connection closed".into())));
                break;
            }
            Err(e) => {
                let _ = tx.send(Err(e));
                break;
            }
        }
    });
    rx
}

/// Window size a client announces in its Hello.
pub const DEFAULT_WINDOW: [u16; 3] = [32, 32, 32];

/// Opens a session and exchanges Hello frames.
pub fn connect(endpoint: &BackendEndpoint) -> Result<BackendClient, BackendError> {
    if endpoint.timeout.is_zero() {
        return Err(BackendError::InvalidEndpoint("timeout must be > 0".into()));
    }
    let deadline = Instant::now() + endpoint.timeout;
    let (writer, frames, child): (Box<dyn Write + Send>, _, _) = match &endpoint.transport {
        Transport::Tcp(addr) => {
            let stream = connect_tcp(addr, deadline)?;
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            (Box::new(BufWriter::new(stream)), spawn_reader(BufReader::new(reader)), None)
        }
        Transport::Stdio { program, args } => {
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            (
                Box::new(BufWriter::new(stdin)),
                spawn_reader(BufReader::new(stdout)),
                Some(child),
            )
        }
    };
    let mut client = BackendClient {
        writer,
        frames,
        timeout: endpoint.timeout,
        max_dims: [0; 3],
        child,
        broken: false,
    };
    write_frame(&mut client.writer, &Frame::hello(DEFAULT_WINDOW))?;
    let remaining = deadline.saturating_duration_since(Instant::now());
    let reply = match client.frames.recv_timeout(remaining.max(Duration::from_millis(1))) {
        Ok(r) => r?,
        Err(_) => return Err(BackendError::ConnectTimeout),
    };
    match reply.msg_type {
        MsgType::Hello => {
            client.max_dims = reply.dims;
            Ok(client)
        }
        MsgType::Error => Err(BackendError::Remote(reply.error_message())),
        other => Err(BackendError::Protocol(format!("expected Hello, got {other:?}"))),
    }
}

fn connect_tcp(addr: &str, deadline: Instant) -> Result<TcpStream, BackendError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| BackendError::InvalidEndpoint(format!("{addr}: {e}")))?
        .collect();
    loop {
        for a in &addrs {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(BackendError::ConnectTimeout);
            }
            if let Ok(s) = TcpStream::connect_timeout(a, remaining) {
                return Ok(s);
            }
        }
        if Instant::now() >= deadline {
            return Err(BackendError::ConnectTimeout);
        }
        // the server may still be starting
        thread::sleep(Duration::from_millis(20).min(deadline - Instant::now()));
    }
}

impl BackendClient {
    /// Largest window the server advertised.
    pub fn max_dims(&self) -> [u16; 3] {
        self.max_dims
    }

    pub fn predict_noise_remote(
        &mut self,
        batch: &[ScalarVolume],
        t: usize,
    ) -> Result<Vec<ScalarVolume>, BackendError> {
        if self.broken {
            return Err(BackendError::Protocol("session is no longer usable".into()));
        }
        let t = u16::try_from(t).map_err(|_| BackendError::InvalidRequest(format!("step {t} exceeds u16")))?;
        let request = Frame::volumes(MsgType::PredictRequest, t, batch)?;
        if (0..3).any(|a| request.dims[a] > self.max_dims[a]) {
            return Err(BackendError::InvalidRequest(format!(
                "dims {:?} exceed backend maximum {:?}",
                request.dims, self.max_dims
            )));
        }
        let result = self.round_trip(&request);
        if result.is_err() {
            self.broken = true;
        }
        let response = result?;
        match response.msg_type {
            MsgType::PredictResponse => {}
            MsgType::Error => {
                self.broken = false;
                return Err(BackendError::Remote(response.error_message()));
            }
            other => {
                self.broken = true;
                return Err(BackendError::Protocol(format!("unexpected {other:?}")));
            }
        }
        if response.batch != request.batch || response.dims != request.dims {
            self.broken = true;
            return Err(BackendError::Protocol(format!(
                "response shape {}x{:?} does not match request {}x{:?}",
                response.batch, response.dims, request.batch, request.dims
            )));
        }
        response.to_volumes()
    }

    fn round_trip(&mut self, request: &Frame) -> Result<Frame, BackendError> {
        write_frame(&mut self.writer, request)?;
        match self.frames.recv_timeout(self.timeout) {
            Ok(frame) => frame,
            Err(RecvTimeoutError::Timeout) => Err(BackendError::RequestTimeout),
            Err(RecvTimeoutError::Disconnected) => {
                Err(BackendError::Protocol("connection closed".into()))
            }
        }
    }
}

impl Drop for BackendClient {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A [`Denoiser`] backed by a pool of protocol sessions; concurrent callers
/// each get their own connection.
pub struct RemoteDenoiser {
    endpoint: BackendEndpoint,
    idle: Mutex<Vec<BackendClient>>,
}

impl RemoteDenoiser {
    pub fn new(endpoint: BackendEndpoint) -> Self {
        Self {
            endpoint,
            idle: Mutex::new(Vec::new()),
        }
    }

    /// Connects eagerly so configuration errors surface early.
    pub fn connect(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        let client = connect(&endpoint)?;
        Ok(Self {
            endpoint,
            idle: Mutex::new(vec![client]),
        })
    }

    fn checkout(&self) -> Result<BackendClient, BackendError> {
        let pooled = self.idle.lock().expect("pool poisoned").pop();
        match pooled {
            Some(c) => Ok(c),
            None => connect(&self.endpoint),
        }
    }
}

impl Denoiser for RemoteDenoiser {
    fn predict_noise(&self, batch: &[ScalarVolume], t: usize) -> Result<Vec<ScalarVolume>, DdpmError> {
        let mut client = self.checkout()?;
        let out = client.predict_noise_remote(batch, t);
        if !client.broken {
            self.idle.lock().expect("pool poisoned").push(client);
        }
        Ok(out?)
    }
}

/// Serves one session over `reader`/`writer` until the peer closes it.
pub fn serve_connection(
    denoiser: &dyn Denoiser,
    max_dims: [u16; 3],
    reader: &mut impl Read,
    writer: &mut impl Write,
) -> Result<(), BackendError> {
    let hello = match read_frame(reader)? {
        Some(f) => f,
        None => return Ok(()),
    };
    if hello.msg_type != MsgType::Hello {
        write_frame(writer, &Frame::error("expected Hello"))?;
        return Err(BackendError::Protocol("session did not start with Hello".into()));
    }
    write_frame(writer, &Frame::hello(max_dims))?;
    loop {
        let frame = match read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = write_frame(writer, &Frame::error(&e.to_string()));
                return Err(e);
            }
        };
        let reply = match frame.msg_type {
            MsgType::PredictRequest => handle_predict(denoiser, max_dims, &frame),
            MsgType::Hello => Frame::hello(max_dims),
            other => Frame::error(&format!("unexpected {other:?}")),
        };
        write_frame(writer, &reply)?;
    }
}

fn handle_predict(denoiser: &dyn Denoiser, max_dims: [u16; 3], frame: &Frame) -> Frame {
    if (0..3).any(|a| frame.dims[a] > max_dims[a]) {
        return Frame::error(&format!("dims {:?} exceed maximum {:?}", frame.dims, max_dims));
    }
    if frame.batch == 0 {
        return Frame::error("empty batch");
    }
    let volumes = match frame.to_volumes() {
        Ok(v) => v,
        Err(e) => return Frame::error(&e.to_string()),
    };
    let predicted = match denoiser.predict_noise(&volumes, frame.t as usize) {
        Ok(p) => p,
        Err(e) => return Frame::error(&e.to_string()),
    };
    if predicted.len() != volumes.len() || predicted.iter().any(|p| p.dims() != volumes[0].dims()) {
        return Frame::error("denoiser returned a mismatched batch");
    }
    Frame::volumes(MsgType::PredictResponse, frame.t, &predicted)
        .unwrap_or_else(|e| Frame::error(&e.to_string()))
}

/// Running TCP server; stops accepting and closes live sessions on
/// [`ServerHandle::shutdown`] or drop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sessions: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self, timeout: Duration) -> BackendEndpoint {
        BackendEndpoint::tcp(self.addr.to_string(), timeout)
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        for s in self.sessions.lock().expect("session list poisoned").drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serves `denoiser` on `addr` (e.g. `127.0.0.1:0`), one thread per session.
pub fn serve_loopback(
    denoiser: Arc<dyn Denoiser>,
    addr: &str,
    max_dims: [u16; 3],
) -> Result<ServerHandle, BackendError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let sessions = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let stop = stop.clone();
        let sessions = sessions.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    sessions.lock().expect("session list poisoned").push(clone);
                }
                let denoiser = denoiser.clone();
                thread::spawn(move || {
                    let Ok(read_half) = stream.try_clone() else { return };
                    let mut reader = BufReader::new(read_half);
                    let mut writer = BufWriter::new(stream);
                    let _ = serve_connection(denoiser.as_ref(), max_dims, &mut reader, &mut writer);
                });
            }
        })
    };
    Ok(ServerHandle {
        addr: local,
        stop,
        sessions,
        acceptor: Some(acceptor),
    })
}

/// Serves a single session on this process's stdin/stdout.
pub fn serve_stdio(denoiser: &dyn Denoiser, max_dims: [u16; 3]) -> Result<(), BackendError> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut reader = BufReader::new(stdin.lock());
    let mut writer = BufWriter::new(stdout.lock());
    serve_connection(denoiser, max_dims, &mut reader, &mut writer)
}
