//! Request/response carriers between the client and a [`CloudWorker`].

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::{self, JoinHandle};

use crate::error::{Error, ProtocolErrorKind, Result};
use crate::protocol::{decode_frame, write_frame, Frame, Opcode};
use crate::worker::CloudWorker;

/// Sends one request frame and waits for its response.
pub trait Transport {
    fn exchange(&mut self, request: &Frame) -> Result<Frame>;

    /// Bytes sent and received so far, frame headers included.
    fn traffic(&self) -> (u64, u64);
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn exchange(&mut self, request: &Frame) -> Result<Frame> {
        (**self).exchange(request)
    }

    fn traffic(&self) -> (u64, u64) {
        (**self).traffic()
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn exchange(&mut self, request: &Frame) -> Result<Frame> {
        (**self).exchange(request)
    }

    fn traffic(&self) -> (u64, u64) {
        (**self).traffic()
    }
}

/// Checks a response against its request: ERROR frames become
/// [`Error::Remote`], and the opcode and session id must match.
pub fn expect_response(request: &Frame, response: Frame, expected: Opcode) -> Result<Frame> {
    if response.opcode == Opcode::Error {
        let (code, message) = response.remote_error()?;
        return Err(Error::Remote { code, message });
    }
    if response.opcode != expected {
        return Err(Error::protocol(
            ProtocolErrorKind::UnexpectedOpcode,
            format!("expected {expected:?}, got {:?}", response.opcode),
        ));
    }
    if response.session_id != request.session_id {
        return Err(Error::protocol(
            ProtocolErrorKind::UnexpectedOpcode,
            format!(
                "response for session {:#x}, expected {:#x}",
                response.session_id, request.session_id
            ),
        ));
    }
    Ok(response)
}

/// Frames over any byte stream (TCP socket, pipe).
#[derive(Debug)]
pub struct StreamTransport<S> {
    stream: S,
    sent: u64,
    received: u64,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        StreamTransport {
            stream,
            sent: 0,
            received: 0,
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl StreamTransport<TcpStream> {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(StreamTransport::new(stream))
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn exchange(&mut self, request: &Frame) -> Result<Frame> {
        write_frame(&mut self.stream, request)?;
        self.sent += request.encoded_len() as u64;
        let response = decode_frame(&mut self.stream)?;
        self.received += response.encoded_len() as u64;
        Ok(response)
    }

    fn traffic(&self) -> (u64, u64) {
        (self.sent, self.received)
    }
}

/// Runs a worker in the calling thread. Frames are still encoded and decoded
/// so the wire format is exercised.
#[derive(Debug)]
pub struct InProcessTransport {
    worker: CloudWorker,
    sent: u64,
    received: u64,
}

impl InProcessTransport {
    pub fn new(worker: CloudWorker) -> Self {
        InProcessTransport {
            worker,
            sent: 0,
            received: 0,
        }
    }

    pub fn worker(&self) -> &CloudWorker {
        &self.worker
    }

    pub fn into_worker(self) -> CloudWorker {
        self.worker
    }
}

impl Transport for InProcessTransport {
    fn exchange(&mut self, request: &Frame) -> Result<Frame> {
        let bytes = request.encode()?;
        self.sent += bytes.len() as u64;
        let response = self.worker.handle_frame(&Frame::decode(&bytes)?);
        let bytes = response.encode()?;
        self.received += bytes.len() as u64;
        Frame::decode(&bytes)
    }

    fn traffic(&self) -> (u64, u64) {
        (self.sent, self.received)
    }
}

/// One end of an in-memory byte pipe. Dropping an end makes the other end
/// read EOF.
#[derive(Debug)]
pub struct PipeEnd {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

/// A connected pair of pipe ends.
pub fn duplex() -> (PipeEnd, PipeEnd) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        PipeEnd {
            tx: tx_a,
            rx: rx_a,
            buf: Vec::new(),
            pos: 0,
        },
        PipeEnd {
            tx: tx_b,
            rx: rx_b,
            buf: Vec::new(),
            pos: 0,
        },
    )
}

impl Read for PipeEnd {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        while self.pos >= self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(data.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed the pipe"))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Starts `worker` on its own thread behind a pipe. The thread ends when the
/// returned transport is dropped and hands the worker back.
pub fn spawn_pipe_worker(
    mut worker: CloudWorker,
) -> (
    StreamTransport<PipeEnd>,
    JoinHandle<(CloudWorker, Result<()>)>,
) {
    let (client, server) = duplex();
    let handle = thread::spawn(move || {
        let outcome = worker.serve(server);
        (worker, outcome)
    });
    (StreamTransport::new(client), handle)
}
