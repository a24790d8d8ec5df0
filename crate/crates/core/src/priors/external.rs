//! Client and server halves of the external denoiser wire protocol.
//!
//! Request:  `SNDQ`, u16 version, u32 N, f64 σ, N x f32 x̃.
//! Response: `SNDR`, u16 version, u32 N, N x f32 D(x̃, σ).
//! All integers and floats are little-endian.

use std::io::{ErrorKind, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use super::ScoreModel;
use crate::error::{argument, check_dim, Result, SnipsError};

pub const REQUEST_MAGIC: &[u8; 4] = b"SNDQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"SNDR";
pub const PROTOCOL_VERSION: u16 = 1;

const REQUEST_HEADER: usize = 18;
const RESPONSE_HEADER: usize = 10;

fn protocol(message: impl Into<String>, header: &[u8]) -> SnipsError {
    SnipsError::Protocol {
        message: message.into(),
        header: header.to_vec(),
    }
}

pub fn encode_request(x: &[f64], sigma: f64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(REQUEST_HEADER + 4 * x.len());
    buf.extend_from_slice(REQUEST_MAGIC);
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(x.len() as u32).to_le_bytes());
    buf.extend_from_slice(&sigma.to_le_bytes());
    for v in x {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn encode_response(d: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(RESPONSE_HEADER + 4 * d.len());
    buf.extend_from_slice(RESPONSE_MAGIC);
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
    for v in d {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn check_header(header: &[u8], magic: &[u8; 4]) -> Result<usize> {
    if &header[..4] != magic {
        return Err(protocol("bad magic", header));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != PROTOCOL_VERSION {
        return Err(protocol(format!("unsupported version {version}"), header));
    }
    Ok(u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize)
}

fn f32s(body: &[u8]) -> Vec<f32> {
    body.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserRequest {
    pub sigma: f64,
    pub x: Vec<f32>,
}

/// Parses one complete request frame.
pub fn decode_request(bytes: &[u8]) -> Result<DenoiserRequest> {
    if bytes.len() < REQUEST_HEADER {
        return Err(protocol("truncated request header", bytes));
    }
    let header = &bytes[..REQUEST_HEADER];
    let n = check_header(header, REQUEST_MAGIC)?;
    let sigma = f64::from_le_bytes(header[10..18].try_into().unwrap());
    let body = &bytes[REQUEST_HEADER..];
    if body.len() != 4 * n {
        return Err(protocol(
            format!("request body has {} bytes, expected {}", body.len(), 4 * n),
            header,
        ));
    }
    Ok(DenoiserRequest { sigma, x: f32s(body) })
}

/// Parses one complete response frame and checks its length against `expected`.
pub fn decode_response(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() < RESPONSE_HEADER {
        return Err(protocol("truncated response header", bytes));
    }
    let header = &bytes[..RESPONSE_HEADER];
    let n = check_header(header, RESPONSE_MAGIC)?;
    if n != expected {
        return Err(protocol(
            format!("response has dimension {n}, expected {expected}"),
            header,
        ));
    }
    let body = &bytes[RESPONSE_HEADER..];
    if body.len() != 4 * n {
        return Err(protocol(
            format!("response body has {} bytes, expected {}", body.len(), 4 * n),
            header,
        ));
    }
    Ok(f32s(body))
}

/// Answers requests from `input` with `denoise(x̃, σ)` until `input` closes on
/// a frame boundary.
pub fn serve_denoiser<R, W, F>(mut input: R, mut output: W, mut denoise: F) -> Result<()>
where
    R: Read,
    W: Write,
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    loop {
        let mut header = [0u8; REQUEST_HEADER];
        match read_full(&mut input, &mut header)? {
            0 => return Ok(()),
            k if k < REQUEST_HEADER => {
                return Err(protocol("truncated request header", &header[..k]));
            }
            _ => {}
        }
        let n = check_header(&header, REQUEST_MAGIC)?;
        let sigma = f64::from_le_bytes(header[10..18].try_into().unwrap());
        let mut body = vec![0u8; 4 * n];
        if read_full(&mut input, &mut body)? < body.len() {
            return Err(protocol("truncated request body", &header));
        }
        let x: Vec<f64> = f32s(&body).into_iter().map(f64::from).collect();
        let d = denoise(&x, sigma)?;
        check_dim(n, d.len(), "denoiser output")?;
        let d: Vec<f32> = d.into_iter().map(|v| v as f32).collect();
        output.write_all(&encode_response(&d))?;
        output.flush()?;
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

struct Session {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    broken: bool,
}

impl Session {
    fn take(&mut self, count: usize, deadline: Instant) -> Result<Vec<u8>> {
        while self.pending.len() < count {
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.incoming.recv_timeout(wait) {
                Ok(chunk) => self.pending.extend_from_slice(&chunk),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(protocol("timed out waiting for response", &self.pending));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(protocol("denoiser closed the stream mid-response", &self.pending));
                }
            }
        }
        Ok(self.pending.drain(..count).collect())
    }

    fn round_trip(&mut self, request: &[u8], n: usize, timeout: Duration) -> Result<Vec<f32>> {
        if self.broken {
            return Err(protocol("session unusable after an earlier protocol error", &[]));
        }
        let result = (|| {
            self.writer.write_all(request)?;
            self.writer.flush()?;
            let deadline = Instant::now() + timeout;
            let header = self.take(RESPONSE_HEADER, deadline)?;
            let got = check_header(&header, RESPONSE_MAGIC)?;
            if got != n {
                return Err(protocol(
                    format!("response has dimension {got}, expected {n}"),
                    &header,
                ));
            }
            let body = self.take(4 * n, deadline).map_err(|e| match e {
                SnipsError::Protocol { message, .. } => protocol(message, &header),
                other => other,
            })?;
            Ok(f32s(&body))
        })();
        if result.is_err() {
            self.broken = true;
        }
        result
    }
}

/// Score model backed by an external denoiser process.
///
/// One request is in flight at a time; concurrent callers are serialised.
pub struct ExternalDenoiser {
    dim: usize,
    timeout: Duration,
    session: Mutex<Session>,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDenoiser")
            .field("dim", &self.dim)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl ExternalDenoiser {
    /// Launches `program args…` and talks to it over stdin/stdout.
    pub fn spawn(command: &[String], dim: usize, timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| argument("external denoiser command is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut me = Self::connect(stdout, stdin, dim, timeout, false)?;
        me.child = Some(child);
        me.handshake()?;
        Ok(me)
    }

    /// Uses an already connected byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, dim: usize, timeout: Duration) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::connect(reader, writer, dim, timeout, true)
    }

    fn connect<R, W>(mut reader: R, writer: W, dim: usize, timeout: Duration, handshake: bool) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        if dim == 0 {
            return Err(argument("denoiser dimension must be positive"));
        }
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("snips-denoiser-reader".into())
            .spawn(move || {
                let mut buf = vec![0u8; 1 << 16];
                loop {
                    match reader.read(&mut buf) {
                        Ok(0) => break,
                        Ok(k) => {
                            if tx.send(buf[..k].to_vec()).is_err() {
                                break;
                            }
                        }
                        Err(e) if e.kind() == ErrorKind::Interrupted => {}
                        Err(_) => break,
                    }
                }
            })?;
        let me = Self {
            dim,
            timeout,
            session: Mutex::new(Session {
                writer: Box::new(writer),
                incoming: rx,
                pending: Vec::new(),
                broken: false,
            }),
            child: None,
        };
        if handshake {
            me.handshake()?;
        }
        Ok(me)
    }

    /// Sends a zero probe at `σ = 1` and requires a well-formed reply of the
    /// right dimension.
    fn handshake(&self) -> Result<()> {
        self.denoise(&DVector::zeros(self.dim), 1.0).map(|_| ())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `D(x̃, σ)` exactly as returned by the process, widened to `f64`.
    pub fn denoise(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        Ok(self.exchange(x, sigma)?.1)
    }

    /// Returns the `f32`-rounded input that was actually sent, and the reply.
    fn exchange(&self, x: &DVector<f64>, sigma: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim(self.dim, x.len(), "external denoiser input")?;
        let request = encode_request(x.as_slice(), sigma);
        let mut session = self.session.lock().unwrap_or_else(|p| p.into_inner());
        let reply = session.round_trip(&request, self.dim, self.timeout)?;
        let sent = DVector::from_iterator(self.dim, x.iter().map(|v| f64::from(*v as f32)));
        let d = DVector::from_iterator(self.dim, reply.into_iter().map(f64::from));
        Ok((sent, d))
    }
}

impl ScoreModel for ExternalDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    /// `(D - x̃) / σ²`, with `x̃` taken at the precision it was transmitted.
    fn score(&self, x: &DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(argument(format!("external score needs sigma > 0, got {sigma}")));
        }
        let (sent, d) = self.exchange(x, sigma)?;
        Ok((d - sent) / (sigma * sigma))
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
