//! The untrusted cloud worker.
//!
//! Computation 1 returns the Gram matrix of the masked input and caches the
//! masked input for the session. Computation 2 inverts the masked regularised
//! Gram matrix and multiplies by the cached masked input transposed.
//! A [`FaultMode`] other than `Honest` corrupts every response in a way that
//! keeps its shape intact.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{Read, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, ProtocolErrorKind, RemoteErrorCode, Result};
use crate::matrix::{dense_inverse_counted, gram, mat_mul, mat_mul_ops, DenseMatrix};
use crate::protocol::{read_frame, write_frame, Frame, Opcode};

pub const SESSION_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum FaultMode {
    #[default]
    Honest,
    /// Adds `epsilon` to one uniformly chosen entry of each result.
    Perturb(f64),
    /// Skips the computation and returns i.i.d. uniform `[-1, 1]` entries.
    RandomResult,
    /// Skips the computation and returns an identity-padded matrix.
    LazyIdentity,
}

impl FaultMode {
    pub fn is_honest(&self) -> bool {
        matches!(self, FaultMode::Honest)
    }
}

impl fmt::Display for FaultMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultMode::Honest => f.write_str("honest"),
            FaultMode::Perturb(eps) => write!(f, "perturb:{eps:e}"),
            FaultMode::RandomResult => f.write_str("random"),
            FaultMode::LazyIdentity => f.write_str("lazy"),
        }
    }
}

impl FromStr for FaultMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "honest" => Ok(FaultMode::Honest),
            "random" | "random_result" => Ok(FaultMode::RandomResult),
            "lazy" | "lazy_identity" => Ok(FaultMode::LazyIdentity),
            _ => {
                let eps = s
                    .strip_prefix("perturb:")
                    .and_then(|e| e.parse::<f64>().ok())
                    .filter(|e| e.is_finite())
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "unknown fault mode {s:?} (honest|perturb:<eps>|random|lazy)"
                        ))
                    })?;
                Ok(FaultMode::Perturb(eps))
            }
        }
    }
}

/// Masked inputs retained between the two rounds, least recently used first.
#[derive(Debug, Default)]
struct SessionCache {
    entries: HashMap<u64, DenseMatrix>,
    order: VecDeque<u64>,
}

impl SessionCache {
    fn touch(&mut self, id: u64) {
        if let Some(pos) = self.order.iter().position(|&s| s == id) {
            self.order.remove(pos);
        }
        self.order.push_back(id);
    }

    fn insert(&mut self, id: u64, masked: DenseMatrix) {
        self.entries.insert(id, masked);
        self.touch(id);
        while self.order.len() > SESSION_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }

    fn get(&mut self, id: u64) -> Option<&DenseMatrix> {
        if self.entries.contains_key(&id) {
            self.touch(id);
        }
        self.entries.get(&id)
    }
}

/// Work done by a worker so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    /// Scalar multiply-adds in the Gram products, inversions and inverse products.
    pub ops: u64,
    pub compute_time: Duration,
    pub gram_requests: u64,
    pub invprod_requests: u64,
}

#[derive(Debug)]
pub struct CloudWorker {
    fault: FaultMode,
    rng: ChaCha8Rng,
    sessions: SessionCache,
    stats: WorkerStats,
}

impl CloudWorker {
    /// `seed` drives the fault injector only.
    pub fn new(fault: FaultMode, seed: u64) -> Self {
        CloudWorker {
            fault,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sessions: SessionCache::default(),
            stats: WorkerStats::default(),
        }
    }

    pub fn honest() -> Self {
        Self::new(FaultMode::Honest, 0)
    }

    pub fn fault_mode(&self) -> FaultMode {
        self.fault
    }

    pub fn stats(&self) -> WorkerStats {
        self.stats
    }

    pub fn has_session(&self, session_id: u64) -> bool {
        self.sessions.entries.contains_key(&session_id)
    }

    /// Computation 1: `A'^T A'`. Caches `A'` under `session_id`.
    pub fn handle_gram(&mut self, session_id: u64, masked: DenseMatrix) -> Result<DenseMatrix> {
        let start = Instant::now();
        self.stats.gram_requests += 1;
        let n = masked.cols();
        let result = if self.computes() {
            let g = gram(&masked)?;
            self.stats.ops += (masked.rows() * n * n) as u64;
            self.corrupt(g)
        } else {
            self.fabricate(n, n)
        };
        self.sessions.insert(session_id, masked);
        self.stats.compute_time += start.elapsed();
        Ok(result)
    }

    /// Computation 2: `R2^-1 A'^T` using the `A'` cached for `session_id`.
    pub fn handle_invprod(&mut self, session_id: u64, r2: &DenseMatrix) -> Result<DenseMatrix> {
        let start = Instant::now();
        self.stats.invprod_requests += 1;
        let masked_t = self
            .sessions
            .get(session_id)
            .ok_or_else(|| {
                Error::State(format!(
                    "no masked input cached for session {session_id:#x}"
                ))
            })?
            .transpose();
        let n = masked_t.rows();
        if !r2.is_square() || r2.rows() != n {
            return Err(Error::dim(format!(
                "R2 must be {n}x{n} to match the cached input, got {}x{}",
                r2.rows(),
                r2.cols()
            )));
        }
        let result = if self.computes() {
            let (inv, inv_ops) = dense_inverse_counted(r2)?;
            let r3 = mat_mul(&inv, &masked_t)?;
            self.stats.ops += inv_ops + mat_mul_ops(&inv, &masked_t);
            self.corrupt(r3)
        } else {
            self.fabricate(n, masked_t.cols())
        };
        self.stats.compute_time += start.elapsed();
        Ok(result)
    }

    fn computes(&self) -> bool {
        matches!(self.fault, FaultMode::Honest | FaultMode::Perturb(_))
    }

    fn corrupt(&mut self, m: DenseMatrix) -> DenseMatrix {
        match self.fault {
            FaultMode::Perturb(eps) => {
                let (r, c) = m.shape();
                let idx = self.rng.random_range(0..r * c);
                let v = m.as_slice()[idx] + eps;
                m.with_entry(idx / c, idx % c, v).unwrap_or(m)
            }
            _ => m,
        }
    }

    fn fabricate(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        match self.fault {
            FaultMode::LazyIdentity => DenseMatrix::identity_padded(rows, cols),
            _ => DenseMatrix::random_uniform(rows, cols, &mut self.rng),
        }
    }

    /// Services one request frame. Failures become ERROR frames.
    pub fn handle_frame(&mut self, request: &Frame) -> Frame {
        let sid = request.session_id;
        let outcome = match request.opcode {
            Opcode::GramReq => request
                .matrix()
                .and_then(|m| self.handle_gram(sid, m))
                .map(|g| Frame::with_matrix(Opcode::GramResp, sid, &g)),
            Opcode::InvProdReq => request
                .matrix()
                .and_then(|m| self.handle_invprod(sid, &m))
                .map(|r3| Frame::with_matrix(Opcode::InvProdResp, sid, &r3)),
            other => {
                return Frame::error(
                    sid,
                    RemoteErrorCode::UnexpectedOpcode,
                    &format!("{other:?} is not a request"),
                )
            }
        };
        outcome.unwrap_or_else(|e| Frame::error(sid, remote_code(&e), &e.to_string()))
    }

    /// Serves requests until the peer closes the stream. A framing error is
    /// answered with an ERROR frame and ends the connection.
    pub fn serve<S: Read + Write>(&mut self, mut stream: S) -> Result<()> {
        loop {
            match read_frame(&mut stream) {
                Ok(Some(request)) => {
                    let response = self.handle_frame(&request);
                    write_frame(&mut stream, &response)?;
                }
                Ok(None) => return Ok(()),
                Err(e) => {
                    if e.protocol_kind() != Some(ProtocolErrorKind::Transport) {
                        let _ = write_frame(
                            &mut stream,
                            &Frame::error(0, RemoteErrorCode::Malformed, &e.to_string()),
                        );
                    }
                    return Err(e);
                }
            }
        }
    }
}

fn remote_code(e: &Error) -> RemoteErrorCode {
    match e {
        Error::SingularMatrix { .. } | Error::NonFinite(_) => RemoteErrorCode::Singular,
        Error::State(_) => RemoteErrorCode::NoSession,
        Error::Dimension(_) => RemoteErrorCode::Dimension,
        Error::Protocol { .. } | Error::InvalidArgument(_) => RemoteErrorCode::Malformed,
        _ => RemoteErrorCode::Internal,
    }
}

/// Accepts TCP connections forever, one thread and one session cache per
/// connection. Connection `k` seeds its fault injector with `seed + k`.
pub fn serve_tcp<A: ToSocketAddrs>(addr: A, fault: FaultMode, seed: u64) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    serve_listener(listener, fault, seed)
}

pub fn serve_listener(listener: TcpListener, fault: FaultMode, seed: u64) -> Result<()> {
    for (k, conn) in listener.incoming().enumerate() {
        let stream = conn?;
        let mut worker = CloudWorker::new(fault, seed.wrapping_add(k as u64));
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = worker.serve(stream) {
                eprintln!("cloud-worker: connection {peer:?} ended with error: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn gram_examples() {
        let mut w = CloudWorker::honest();
        assert_eq!(
            w.handle_gram(1, DenseMatrix::identity(2)).unwrap(),
            DenseMatrix::identity(2)
        );
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(
            w.handle_gram(2, a).unwrap(),
            m(&[&[10.0, 14.0], &[14.0, 20.0]])
        );
        assert!(w.has_session(2));
        assert_eq!(w.stats().ops, 8 + 8);
    }

    #[test]
    fn perturb_hits_exactly_one_entry() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[0.5, -1.0]]);
        let honest = CloudWorker::honest().handle_gram(1, a.clone()).unwrap();
        let mut w = CloudWorker::new(FaultMode::Perturb(1e-3), 3);
        let faulty = w.handle_gram(1, a).unwrap();
        let diffs: Vec<f64> = faulty
            .as_slice()
            .iter()
            .zip(honest.as_slice())
            .map(|(x, y)| x - y)
            .filter(|d| *d != 0.0)
            .collect();
        assert_eq!(diffs.len(), 1);
        assert!((diffs[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn invprod_examples() {
        let mut w = CloudWorker::honest();
        w.handle_gram(5, DenseMatrix::identity(2)).unwrap();
        assert_eq!(
            w.handle_invprod(5, &DenseMatrix::identity(2)).unwrap(),
            DenseMatrix::identity(2)
        );
        let two = DenseMatrix::diagonal(&[2.0, 2.0]).unwrap();
        assert_eq!(
            w.handle_invprod(5, &two).unwrap(),
            DenseMatrix::diagonal(&[0.5, 0.5]).unwrap()
        );
        assert!(matches!(w.handle_invprod(6, &two), Err(Error::State(_))));
        assert!(matches!(
            w.handle_invprod(5, &DenseMatrix::zeros(2, 2)),
            Err(Error::SingularMatrix { .. })
        ));
        assert!(matches!(
            w.handle_invprod(5, &DenseMatrix::identity(3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fault_modes_preserve_shape() {
        let a = DenseMatrix::from_fn(6, 3, |i, j| (i + 2 * j) as f64 * 0.25 - 1.0);
        for fault in [
            FaultMode::Honest,
            FaultMode::Perturb(0.5),
            FaultMode::RandomResult,
            FaultMode::LazyIdentity,
        ] {
            let mut w = CloudWorker::new(fault, 9);
            let g = w.handle_gram(1, a.clone()).unwrap();
            assert_eq!(g.shape(), (3, 3), "{fault}");
            let r3 = w.handle_invprod(1, &DenseMatrix::identity(3)).unwrap();
            assert_eq!(r3.shape(), (3, 6), "{fault}");
            if fault == FaultMode::RandomResult {
                assert!(r3.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            if fault == FaultMode::LazyIdentity {
                assert_eq!(r3, DenseMatrix::identity_padded(3, 6));
            }
        }
    }

    #[test]
    fn lru_evicts_oldest_session() {
        let mut w = CloudWorker::honest();
        for id in 0..=SESSION_CAPACITY as u64 {
            w.handle_gram(id, DenseMatrix::identity(1)).unwrap();
        }
        assert!(!w.has_session(0));
        assert!(w.has_session(1));
        // touching session 1 protects it from the next eviction
        w.handle_invprod(1, &DenseMatrix::identity(1)).unwrap();
        w.handle_gram(1000, DenseMatrix::identity(1)).unwrap();
        assert!(w.has_session(1));
        assert!(!w.has_session(2));
    }

    #[test]
    fn frames_map_errors_to_codes() {
        let mut w = CloudWorker::honest();
        let resp = w.handle_frame(&Frame::with_matrix(
            Opcode::InvProdReq,
            3,
            &DenseMatrix::identity(2),
        ));
        assert_eq!(resp.remote_error().unwrap().0, RemoteErrorCode::NoSession);

        let resp = w.handle_frame(&Frame::new(Opcode::GramReq, 3, vec![1, 2, 3]));
        assert_eq!(resp.remote_error().unwrap().0, RemoteErrorCode::Malformed);

        let resp = w.handle_frame(&Frame::with_matrix(
            Opcode::GramReq,
            3,
            &DenseMatrix::identity(2),
        ));
        assert_eq!(resp.opcode, Opcode::GramResp);
        let resp = w.handle_frame(&Frame::with_matrix(
            Opcode::InvProdReq,
            3,
            &DenseMatrix::zeros(2, 2),
        ));
        assert_eq!(resp.remote_error().unwrap().0, RemoteErrorCode::Singular);

        let resp = w.handle_frame(&Frame::new(Opcode::GramResp, 3, vec![]));
        assert_eq!(
            resp.remote_error().unwrap().0,
            RemoteErrorCode::UnexpectedOpcode
        );
    }

    #[test]
    fn fault_mode_parsing() {
        assert_eq!("honest".parse::<FaultMode>().unwrap(), FaultMode::Honest);
        assert_eq!(
            "perturb:1e-3".parse::<FaultMode>().unwrap(),
            FaultMode::Perturb(1e-3)
        );
        assert_eq!(
            "random".parse::<FaultMode>().unwrap(),
            FaultMode::RandomResult
        );
        assert_eq!(
            "lazy".parse::<FaultMode>().unwrap(),
            FaultMode::LazyIdentity
        );
        assert!("perturb:x".parse::<FaultMode>().is_err());
        assert!("evil".parse::<FaultMode>().is_err());
    }
}
