//! Binary wire protocol for external denoiser backends.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! handshake   client → server   "ZDNZ" u32 version
//!             server → client   "ZDNZ" u32 version        (echo)
//!
//! request     u32 version
//!             u64 request id
//!             u32 level
//!             u32 timestep t
//!             u8  conditional (1 = prompt applies, 0 = unconditional)
//!             u32 prompt length, prompt bytes (UTF-8; empty when unconditional)
//!             u32 H, u32 W, u32 C
//!             H·W·C × f32 latent z (row-major, channel-last)
//!
//! response    u64 request id
//!             u8  status (0 = ok)
//!             status == 0: H·W·C × f32 noise prediction (dims of the request)
//!             status != 0: u32 length, UTF-8 error message
//! ```
//!
//! Responses may arrive in any order; the client matches them by id.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::denoiser::{DenoiseQuery, Denoiser};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MAGIC: &[u8; 4] = b"ZDNZ";
pub const VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// Upper bound on H·W·C accepted from the wire.
pub const MAX_ELEMENTS: usize = 1 << 28;
pub const MAX_TEXT: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseRequest {
    pub id: u64,
    pub level: u32,
    pub t: u32,
    pub conditional: bool,
    pub prompt: String,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub z: Vec<f32>,
}

impl DenoiseRequest {
    pub fn from_query(id: u64, q: &DenoiseQuery<'_>) -> Result<Self> {
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Protocol(format!("{what} {v} exceeds u32")))
        };
        let (h, w, c) = q.z.shape();
        Ok(Self {
            id,
            level: to_u32(q.level, "level")?,
            t: to_u32(q.t, "timestep")?,
            conditional: q.prompt.is_some(),
            prompt: q.prompt.unwrap_or_default().to_owned(),
            height: to_u32(h, "height")?,
            width: to_u32(w, "width")?,
            channels: to_u32(c, "channels")?,
            z: q.z.data().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn element_count(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub fn latent(&self) -> Result<Image> {
        Image::from_vec(
            self.height as usize,
            self.width as usize,
            self.channels as usize,
            self.z.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn encode(&self, out: &mut impl Write) -> io::Result<()> {
        if self.z.len() != self.element_count() {
            return Err(io::Error::new(
                ErrorKind::InvalidInput,
                "payload length does not match header dims",
            ));
        }
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.id.to_le_bytes())?;
        out.write_all(&self.level.to_le_bytes())?;
        out.write_all(&self.t.to_le_bytes())?;
        out.write_all(&[self.conditional as u8])?;
        write_text(out, &self.prompt)?;
        out.write_all(&self.height.to_le_bytes())?;
        out.write_all(&self.width.to_le_bytes())?;
        out.write_all(&self.channels.to_le_bytes())?;
        write_f32s(out, &self.z)
    }

    /// Reads one request. `Ok(None)` on clean end of stream.
    pub fn decode(input: &mut impl Read) -> Result<Option<Self>> {
        let mut first = [0u8; 4];
        match read_exact_or_eof(input, &mut first)? {
            false => return Ok(None),
            true => {}
        }
        let version = u32::from_le_bytes(first);
        if version != VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {version}")));
        }
        let id = read_u64(input)?;
        let level = read_u32(input)?;
        let t = read_u32(input)?;
        let conditional = match read_u8(input)? {
            0 => false,
            1 => true,
            other => return Err(Error::Protocol(format!("bad conditional flag {other}"))),
        };
        let prompt = read_text(input)?;
        let height = read_u32(input)?;
        let width = read_u32(input)?;
        let channels = read_u32(input)?;
        let count = checked_count(height, width, channels)?;
        let z = read_f32s(input, count)?;
        Ok(Some(Self {
            id,
            level,
            t,
            conditional,
            prompt,
            height,
            width,
            channels,
            z,
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseResponse {
    pub id: u64,
    pub body: std::result::Result<Vec<f32>, String>,
}

impl DenoiseResponse {
    pub fn encode(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(&self.id.to_le_bytes())?;
        match &self.body {
            Ok(values) => {
                out.write_all(&[0])?;
                write_f32s(out, values)
            }
            Err(msg) => {
                out.write_all(&[1])?;
                write_text(out, msg)
            }
        }
    }

    /// Reads one response; `expected` maps the id to its payload length.
    pub fn decode(
        input: &mut impl Read,
        expected: impl FnOnce(u64) -> Option<usize>,
    ) -> Result<Self> {
        let id = read_u64(input)?;
        let status = read_u8(input)?;
        if status != 0 {
            return Ok(Self {
                id,
                body: Err(read_text(input)?),
            });
        }
        let count = expected(id)
            .ok_or_else(|| Error::Protocol(format!("response for unknown request id {id}")))?;
        Ok(Self {
            id,
            body: Ok(read_f32s(input, count)?),
        })
    }
}

fn checked_count(h: u32, w: u32, c: u32) -> Result<usize> {
    let count = (h as u64) * (w as u64) * (c as u64);
    if count == 0 || count > MAX_ELEMENTS as u64 {
        return Err(Error::Protocol(format!("implausible tensor dims {h}x{w}x{c}")));
    }
    Ok(count as usize)
}

fn proto_io(e: io::Error) -> Error {
    match e.kind() {
        ErrorKind::UnexpectedEof => Error::Protocol("truncated frame".into()),
        _ => Error::Io(e),
    }
}

fn read_exact_or_eof(input: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Protocol("truncated frame".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(true)
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input.read_exact(&mut b).map_err(proto_io)?;
    Ok(b)
}

fn read_u8(input: &mut impl Read) -> Result<u8> {
    Ok(read_array::<1>(input)?[0])
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}

fn read_text(input: &mut impl Read) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > MAX_TEXT {
        return Err(Error::Protocol(format!("string of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf).map_err(proto_io)?;
    String::from_utf8(buf).map_err(|_| Error::Protocol("string is not valid UTF-8".into()))
}

fn write_text(out: &mut impl Write, s: &str) -> io::Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| io::Error::new(ErrorKind::InvalidInput, "string too long"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn read_f32s(input: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes).map_err(proto_io)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn write_f32s(out: &mut impl Write, values: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)
}

fn handshake_bytes() -> [u8; 8] {
    let mut b = [0u8; 8];
    b[..4].copy_from_slice(MAGIC);
    b[4..].copy_from_slice(&VERSION.to_le_bytes());
    b
}

fn check_handshake(b: &[u8; 8]) -> Result<()> {
    if &b[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad handshake magic {:?}", &b[..4])));
    }
    let version = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
    if version != VERSION {
        return Err(Error::Protocol(format!(
            "peer speaks protocol version {version}, expected {VERSION}"
        )));
    }
    Ok(())
}

/// Client side of the handshake.
pub fn client_handshake(reader: &mut impl Read, writer: &mut impl Write) -> Result<()> {
    writer.write_all(&handshake_bytes())?;
    writer.flush()?;
    let reply: [u8; 8] = read_array(reader)?;
    check_handshake(&reply)
}

/// Server side of the handshake: validate and echo.
pub fn server_handshake(reader: &mut impl Read, writer: &mut impl Write) -> Result<()> {
    let hello: [u8; 8] = read_array(reader)?;
    check_handshake(&hello)?;
    writer.write_all(&hello)?;
    writer.flush()?;
    Ok(())
}

/// Answers requests with `denoiser` until the client closes the stream.
/// Backend failures become status-1 responses; framing errors end the session.
pub fn serve(
    denoiser: &dyn Denoiser,
    mut reader: impl Read,
    mut writer: impl Write,
) -> Result<()> {
    server_handshake(&mut reader, &mut writer)?;
    while let Some(req) = DenoiseRequest::decode(&mut reader)? {
        let body = answer(denoiser, &req);
        DenoiseResponse { id: req.id, body }.encode(&mut writer)?;
        writer.flush()?;
    }
    Ok(())
}

fn answer(denoiser: &dyn Denoiser, req: &DenoiseRequest) -> std::result::Result<Vec<f32>, String> {
    let z = req.latent().map_err(|e| e.to_string())?;
    let query = DenoiseQuery {
        z: &z,
        t: req.t as usize,
        level: req.level as usize,
        prompt: req.conditional.then_some(req.prompt.as_str()),
    };
    let eps = denoiser.predict_noise(&query).map_err(|e| e.to_string())?;
    if eps.shape() != z.shape() {
        return Err(format!("backend returned shape {:?}", eps.shape()));
    }
    if !eps.is_finite() {
        return Err("backend returned non-finite values".into());
    }
    Ok(eps.data().iter().map(|&v| v as f32).collect())
}

/// Where a remote backend lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Subprocess(String),
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("remote:").or_else(|| s.strip_prefix("tcp:")) {
            Ok(Endpoint::Tcp(addr.to_owned()))
        } else if let Some(cmd) = s.strip_prefix("subprocess:") {
            Ok(Endpoint::Subprocess(cmd.to_owned()))
        } else {
            Err(Error::invalid(format!(
                "endpoint '{s}' must be remote:ADDR or subprocess:CMD"
            )))
        }
    }
}

type Reply = std::result::Result<Vec<f32>, Error>;

struct Pending {
    count: usize,
    reply: Sender<Reply>,
}

#[derive(Default)]
struct Shared {
    pending: HashMap<u64, Pending>,
    failed: Option<String>,
}

/// Pipelined client. Safe to call from many threads at once.
pub struct RemoteDenoiser {
    writer: Mutex<Box<dyn Write + Send>>,
    shared: Arc<Mutex<Shared>>,
    next_id: AtomicU64,
    timeout: Duration,
    child: Option<Mutex<Child>>,
    socket: Option<TcpStream>,
}

impl RemoteDenoiser {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => Self::connect_tcp(addr, timeout),
            Endpoint::Subprocess(cmd) => Self::spawn(cmd, timeout),
        }
    }

    pub fn connect_tcp(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Backend(format!("cannot connect: {e}")))?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let socket = stream.try_clone()?;
        let mut client = Self::from_streams(reader, stream, timeout)?;
        client.socket = Some(socket);
        Ok(client)
    }

    /// Spawns `sh -c cmd` and speaks the protocol over its stdio.
    pub fn spawn(cmd: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot spawn '{cmd}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(stdout, stdin, timeout)?;
        client.child = Some(Mutex::new(child));
        Ok(client)
    }

    /// Handshakes, then starts the response reader thread.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut writer = BufWriter::new(writer);
        client_handshake(&mut reader, &mut writer)?;
        let shared = Arc::new(Mutex::new(Shared::default()));
        let thread_shared = Arc::clone(&shared);
        thread::Builder::new()
            .name("denoiser-reader".into())
            .spawn(move || read_loop(reader, thread_shared))?;
        Ok(Self {
            writer: Mutex::new(Box::new(writer)),
            shared,
            next_id: AtomicU64::new(1),
            timeout,
            child: None,
            socket: None,
        })
    }

    fn call(&self, q: &DenoiseQuery<'_>) -> Result<Image> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = DenoiseRequest::from_query(id, q)?;
        let (tx, rx) = mpsc::channel();
        {
            let mut shared = self.shared.lock().expect("remote state poisoned");
            if let Some(why) = &shared.failed {
                return Err(Error::Backend(format!("connection unusable: {why}")));
            }
            shared.pending.insert(
                id,
                Pending {
                    count: req.element_count(),
                    reply: tx,
                },
            );
        }
        let sent = {
            let mut w = self.writer.lock().expect("remote writer poisoned");
            req.encode(&mut *w).and_then(|_| w.flush())
        };
        if let Err(e) = sent {
            self.shared.lock().expect("remote state poisoned").pending.remove(&id);
            return Err(Error::Backend(format!("send failed: {e}")));
        }
        let reply = match rx.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.shared.lock().expect("remote state poisoned").pending.remove(&id);
                return Err(Error::Backend(format!(
                    "request {id} timed out after {:?}",
                    self.timeout
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Backend("backend connection closed".into()))
            }
        }?;
        let (h, w, c) = q.z.shape();
        Image::from_vec(h, w, c, reply.into_iter().map(|v| v as f64).collect())
    }
}

fn read_loop(mut reader: impl Read, shared: Arc<Mutex<Shared>>) {
    let failure = loop {
        let decoded = DenoiseResponse::decode(&mut reader, |id| {
            shared
                .lock()
                .ok()
                .and_then(|s| s.pending.get(&id).map(|p| p.count))
        });
        match decoded {
            Ok(resp) => {
                let pending = shared.lock().ok().and_then(|mut s| s.pending.remove(&resp.id));
                if let Some(p) = pending {
                    let reply = resp
                        .body
                        .map_err(|msg| Error::Backend(format!("backend reported: {msg}")));
                    let _ = p.reply.send(reply);
                }
            }
            Err(e) => break e.to_string(),
        }
    };
    if let Ok(mut s) = shared.lock() {
        for (_, p) in s.pending.drain() {
            let _ = p.reply.send(Err(Error::Protocol(failure.clone())));
        }
        s.failed = Some(failure);
    }
}

impl Denoiser for RemoteDenoiser {
    fn predict_noise(&self, query: &DenoiseQuery<'_>) -> Result<Image> {
        self.call(query)
    }
}

impl Drop for RemoteDenoiser {
    fn drop(&mut self) {
        if let Some(socket) = &self.socket {
            // unblocks the reader thread
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &self.child {
            if let Ok(mut w) = self.writer.lock() {
                // closing stdin tells the backend to exit
                *w = Box::new(io::sink());
            }
            if let Ok(mut c) = child.lock() {
                let _ = c.wait();
            }
        }
    }
}
