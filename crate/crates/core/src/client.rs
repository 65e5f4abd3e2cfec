//! Client-side masking, recovery and verification.
//!
//! With secret keys `P` (signed permutation) and `Q` (scaled permutation):
//!
//! ```text
//! A'  = P A Q                         transform1
//! G   = Q^-T (A'^T A') Q^-1 = A^T A   recover1
//! R1  = lambda I + G,  R2 = Q^T R1 Q  transform2
//! R4  = Q R3 P = R1^-1 A^T            recover2, R3 = R2^-1 A'^T from the worker
//! ```
//!
//! The result is accepted when `|R4 (A g) - g|_inf <= tol * |g|_inf` for
//! random vectors `g`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::keygen::MaskKeys;
use crate::matrix::{dense_inverse_counted, gram, mat_mul, mat_mul_ops, mat_vec, DenseMatrix};
use crate::protocol::{Frame, Opcode};
use crate::transport::{expect_response, Transport};

pub const DEFAULT_LAMBDA: f64 = 1e-8;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_VERIFY_ROUNDS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationReport {
    pub accepted: bool,
    pub rounds: usize,
    /// Largest `|R4 A g - g|_inf / |g|_inf` over all rounds.
    pub max_residual: f64,
    pub tolerance: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )))
    }
}

fn check_keys(a: &DenseMatrix, keys: &MaskKeys) -> Result<()> {
    let (m, n) = keys.shape();
    if a.shape() != (m, n) {
        return Err(Error::dim(format!(
            "keys are sized for {m}x{n} inputs, matrix is {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

/// `A' = P A Q`.
pub fn transform1(a: &DenseMatrix, keys: &MaskKeys) -> Result<DenseMatrix> {
    check_keys(a, keys)?;
    keys.q().apply_right(&keys.p().apply_left(a)?)
}

/// `A^T A` from the masked Gram matrix `A'^T A'`.
pub fn recover1(masked_gram: &DenseMatrix, keys: &MaskKeys) -> Result<DenseMatrix> {
    let n = keys.q().size();
    if masked_gram.shape() != (n, n) {
        return Err(Error::dim(format!(
            "masked Gram must be {n}x{n}, got {}x{}",
            masked_gram.rows(),
            masked_gram.cols()
        )));
    }
    keys.q().unconjugate(masked_gram)
}

/// Returns `(R1, R2)` with `R1 = lambda I + gram` and `R2 = Q^T R1 Q`.
pub fn transform2(
    gram: &DenseMatrix,
    lambda: f64,
    keys: &MaskKeys,
) -> Result<(DenseMatrix, DenseMatrix)> {
    check_lambda(lambda)?;
    let n = keys.q().size();
    if gram.shape() != (n, n) {
        return Err(Error::dim(format!(
            "Gram matrix must be {n}x{n}, got {}x{}",
            gram.rows(),
            gram.cols()
        )));
    }
    let r1 = gram.add_diagonal(lambda)?;
    let r2 = keys.q().conjugate(&r1)?;
    Ok((r1, r2))
}

/// `R4 = Q R3 P`.
pub fn recover2(r3: &DenseMatrix, keys: &MaskKeys) -> Result<DenseMatrix> {
    let (m, n) = keys.shape();
    if r3.shape() != (n, m) {
        return Err(Error::dim(format!(
            "R3 must be {n}x{m}, got {}x{}",
            r3.rows(),
            r3.cols()
        )));
    }
    keys.p().apply_right(&keys.q().apply_left(r3)?)
}

/// Checks `R4 A g = g` for `rounds` random `g` with entries uniform on `[-1, 1]`.
///
/// The identity holds only when `A` has full column rank, so wide inputs are
/// refused outright.
pub fn verify<R: Rng + ?Sized>(
    r4: &DenseMatrix,
    a: &DenseMatrix,
    rounds: usize,
    tol: f64,
    rng: &mut R,
) -> Result<VerificationReport> {
    if a.rows() < a.cols() {
        return Err(Error::invalid(format!(
            "verification needs rows >= cols (a {}x{} matrix has no left inverse, so R4 A g = g cannot hold)",
            a.rows(),
            a.cols()
        )));
    }
    if r4.shape() != (a.cols(), a.rows()) {
        return Err(Error::dim(format!(
            "R4 must be {}x{}, got {}x{}",
            a.cols(),
            a.rows(),
            r4.rows(),
            r4.cols()
        )));
    }
    if rounds == 0 {
        return Err(Error::invalid("verification needs at least one round"));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::invalid(format!(
            "tolerance must be nonnegative, got {tol}"
        )));
    }
    let mut max_residual = 0.0f64;
    for _ in 0..rounds {
        let g: Vec<f64> = (0..a.cols())
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let v = mat_vec(r4, &mat_vec(a, &g)?)?;
        let err = v
            .iter()
            .zip(&g)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let residual = if scale > 0.0 { err / scale } else { err };
        // NaN must not slip through as "not greater than"
        max_residual = if residual.is_nan() {
            f64::NAN
        } else {
            max_residual.max(residual)
        };
    }
    Ok(VerificationReport {
        accepted: max_residual <= tol,
        rounds,
        max_residual,
        tolerance: tol,
    })
}

/// Multiply-adds spent by [`verify`].
pub fn verify_ops(m: usize, n: usize, rounds: usize) -> u64 {
    (2 * m * n * rounds) as u64
}

/// `(lambda I + A^T A)^-1 A^T` computed locally.
pub fn local_pinv(a: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    local_pinv_counted(a, lambda).map(|(p, _)| p)
}

/// Like [`local_pinv`], also returning the multiply-add count.
pub fn local_pinv_counted(a: &DenseMatrix, lambda: f64) -> Result<(DenseMatrix, u64)> {
    check_lambda(lambda)?;
    let at = a.transpose();
    let g = gram(a)?;
    let r1 = g.add_diagonal(lambda)?;
    let (inv, inv_ops) = dense_inverse_counted(&r1)?;
    let out = mat_mul(&inv, &at)?;
    let ops = mat_mul_ops(&at, a) + inv_ops + mat_mul_ops(&inv, &at);
    Ok((out, ops))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Created,
    Masked,
    GramRecovered,
    Transformed,
    Recovered,
    Verified,
}

/// Client multiply-adds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientOps {
    pub transform: u64,
    pub recover: u64,
    pub verify: u64,
}

impl ClientOps {
    pub fn total(&self) -> u64 {
        self.transform + self.recover + self.verify
    }
}

/// Client wall time per phase, plus time spent waiting on the worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub transform: Duration,
    pub recover: Duration,
    pub verify: Duration,
    pub remote: Duration,
}

impl PhaseTimings {
    pub fn client_total(&self) -> Duration {
        self.transform + self.recover + self.verify
    }
}

/// One outsourced ridge pseudoinverse, advanced stage by stage.
#[derive(Debug, Clone)]
pub struct OutsourceSession {
    keys: MaskKeys,
    lambda: f64,
    a: DenseMatrix,
    session_id: u64,
    stage: Stage,
    masked: Option<DenseMatrix>,
    gram: Option<DenseMatrix>,
    r1: Option<DenseMatrix>,
    r2: Option<DenseMatrix>,
    r3: Option<DenseMatrix>,
    r4: Option<DenseMatrix>,
    report: Option<VerificationReport>,
    ops: ClientOps,
    timings: PhaseTimings,
}

impl OutsourceSession {
    pub fn new(a: DenseMatrix, lambda: f64, keys: MaskKeys, session_id: u64) -> Result<Self> {
        check_lambda(lambda)?;
        check_keys(&a, &keys)?;
        Ok(OutsourceSession {
            keys,
            lambda,
            a,
            session_id,
            stage: Stage::Created,
            masked: None,
            gram: None,
            r1: None,
            r2: None,
            r3: None,
            r4: None,
            report: None,
            ops: ClientOps::default(),
            timings: PhaseTimings::default(),
        })
    }

    fn require(&self, stage: Stage, action: &str) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::State(format!(
                "{action} requires stage {stage:?}, session is at {:?}",
                self.stage
            )))
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn keys(&self) -> &MaskKeys {
        &self.keys
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn input(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn masked_input(&self) -> Option<&DenseMatrix> {
        self.masked.as_ref()
    }

    pub fn gram(&self) -> Option<&DenseMatrix> {
        self.gram.as_ref()
    }

    pub fn r1(&self) -> Option<&DenseMatrix> {
        self.r1.as_ref()
    }

    pub fn r2(&self) -> Option<&DenseMatrix> {
        self.r2.as_ref()
    }

    pub fn r3(&self) -> Option<&DenseMatrix> {
        self.r3.as_ref()
    }

    pub fn r4(&self) -> Option<&DenseMatrix> {
        self.r4.as_ref()
    }

    pub fn report(&self) -> Option<&VerificationReport> {
        self.report.as_ref()
    }

    pub fn ops(&self) -> ClientOps {
        self.ops
    }

    pub fn op_count(&self) -> u64 {
        self.ops.total()
    }

    pub fn timings(&self) -> PhaseTimings {
        self.timings
    }

    pub fn transform1(&mut self) -> Result<&DenseMatrix> {
        self.require(Stage::Created, "transform1")?;
        let start = Instant::now();
        let masked = transform1(&self.a, &self.keys)?;
        self.timings.transform += start.elapsed();
        self.ops.transform += 2 * (self.a.rows() * self.a.cols()) as u64;
        self.stage = Stage::Masked;
        Ok(self.masked.insert(masked))
    }

    pub fn recover1(&mut self, masked_gram: &DenseMatrix) -> Result<&DenseMatrix> {
        self.require(Stage::Masked, "recover1")?;
        let start = Instant::now();
        let g = recover1(masked_gram, &self.keys)?;
        self.timings.recover += start.elapsed();
        let n = self.a.cols() as u64;
        self.ops.recover += 2 * n * n;
        self.stage = Stage::GramRecovered;
        Ok(self.gram.insert(g))
    }

    /// Returns `R2`, the matrix sent in the second round.
    pub fn transform2(&mut self) -> Result<&DenseMatrix> {
        self.require(Stage::GramRecovered, "transform2")?;
        let start = Instant::now();
        let g = self.gram.as_ref().expect("set by recover1");
        let (r1, r2) = transform2(g, self.lambda, &self.keys)?;
        self.timings.transform += start.elapsed();
        let n = self.a.cols() as u64;
        self.ops.transform += n + 2 * n * n;
        self.r1 = Some(r1);
        self.stage = Stage::Transformed;
        Ok(self.r2.insert(r2))
    }

    pub fn recover2(&mut self, r3: &DenseMatrix) -> Result<&DenseMatrix> {
        self.require(Stage::Transformed, "recover2")?;
        let start = Instant::now();
        let r4 = recover2(r3, &self.keys)?;
        self.timings.recover += start.elapsed();
        self.ops.recover += 2 * (self.a.rows() * self.a.cols()) as u64;
        self.r3 = Some(r3.clone());
        self.stage = Stage::Recovered;
        Ok(self.r4.insert(r4))
    }

    pub fn verify<R: Rng + ?Sized>(
        &mut self,
        rounds: usize,
        tol: f64,
        rng: &mut R,
    ) -> Result<VerificationReport> {
        self.require(Stage::Recovered, "verify")?;
        let start = Instant::now();
        let r4 = self.r4.as_ref().expect("set by recover2");
        let report = verify(r4, &self.a, rounds, tol, rng)?;
        self.timings.verify += start.elapsed();
        self.ops.verify += verify_ops(self.a.rows(), self.a.cols(), rounds);
        self.stage = Stage::Verified;
        self.report = Some(report);
        Ok(report)
    }

    /// Runs both rounds over `transport` and verifies. Returns `R4` on
    /// acceptance and [`Error::ResultRejected`] otherwise.
    pub fn run<T: Transport + ?Sized, R: Rng + ?Sized>(
        &mut self,
        transport: &mut T,
        rounds: usize,
        tol: f64,
        rng: &mut R,
    ) -> Result<DenseMatrix> {
        let req = Frame::with_matrix(Opcode::GramReq, self.session_id, self.transform1()?);
        let masked_gram = self.round_trip(transport, &req, Opcode::GramResp)?;
        self.recover1(&masked_gram)?;

        let req = Frame::with_matrix(Opcode::InvProdReq, self.session_id, self.transform2()?);
        let r3 = self.round_trip(transport, &req, Opcode::InvProdResp)?;
        self.recover2(&r3)?;

        let report = self.verify(rounds, tol, rng)?;
        if !report.accepted {
            return Err(Error::ResultRejected(report));
        }
        Ok(self.r4.clone().expect("set by recover2"))
    }

    fn round_trip<T: Transport + ?Sized>(
        &mut self,
        transport: &mut T,
        request: &Frame,
        expected: Opcode,
    ) -> Result<DenseMatrix> {
        let start = Instant::now();
        let response = transport.exchange(request);
        self.timings.remote += start.elapsed();
        expect_response(request, response?, expected)?.matrix()
    }
}

/// Knobs for [`outsourced_pinv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutsourceOptions {
    pub verify_rounds: usize,
    pub tolerance: f64,
    /// Extra attempts after a rejected result.
    pub retries: usize,
    /// Seeds the verification vectors and session ids.
    pub seed: u64,
}

impl Default for OutsourceOptions {
    fn default() -> Self {
        OutsourceOptions {
            verify_rounds: DEFAULT_VERIFY_ROUNDS,
            tolerance: DEFAULT_TOLERANCE,
            retries: 0,
            seed: 0,
        }
    }
}

/// The ridge pseudoinverse of `a`, computed by the worker behind `transport`
/// and verified before it is returned.
pub fn outsourced_pinv<T: Transport + ?Sized>(
    a: &DenseMatrix,
    lambda: f64,
    keys: &MaskKeys,
    transport: &mut T,
    options: &OutsourceOptions,
) -> Result<DenseMatrix> {
    outsourced_pinv_session(a, lambda, keys, transport, options)
        .map(|s| s.r4.expect("accepted sessions carry R4"))
}

/// Like [`outsourced_pinv`] but returns the accepted session for inspection.
pub fn outsourced_pinv_session<T: Transport + ?Sized>(
    a: &DenseMatrix,
    lambda: f64,
    keys: &MaskKeys,
    transport: &mut T,
    options: &OutsourceOptions,
) -> Result<OutsourceSession> {
    if a.rows() < a.cols() {
        return Err(Error::invalid(format!(
            "outsourcing needs rows >= cols for verification, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
    let mut attempt = 0;
    loop {
        let mut session = OutsourceSession::new(a.clone(), lambda, keys.clone(), rng.random())?;
        match session.run(
            transport,
            options.verify_rounds,
            options.tolerance,
            &mut rng,
        ) {
            Ok(_) => return Ok(session),
            Err(Error::ResultRejected(_)) if attempt < options.retries => attempt += 1,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{generate_keys, ScaleMode};
    use crate::matrix::{ScaledPermutation, SignedPermutation};
    use crate::transport::InProcessTransport;
    use crate::worker::{CloudWorker, FaultMode};

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) -> bool {
        a.shape() == b.shape() && a.sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn transform1_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(transform1(&a, &MaskKeys::identity(2, 2)).unwrap(), a);
        let keys = MaskKeys::from_parts(
            SignedPermutation::new(vec![1, 0], vec![1, 1]).unwrap(),
            ScaledPermutation::new(vec![0, 1], vec![1, 2]).unwrap(),
            0,
            ScaleMode::Pow2,
        )
        .unwrap();
        assert_eq!(
            transform1(&a, &keys).unwrap(),
            m(&[&[3.0, 8.0], &[1.0, 4.0]])
        );
        assert!(matches!(
            transform1(&a, &MaskKeys::identity(3, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn transform2_examples() {
        let id = MaskKeys::identity(2, 2);
        let (r1, r2) = transform2(&DenseMatrix::zeros(2, 2), 1.0, &id).unwrap();
        assert_eq!(r1, DenseMatrix::identity(2));
        assert_eq!(r2, DenseMatrix::identity(2));

        let g = m(&[&[10.0, 14.0], &[14.0, 20.0]]);
        let (r1, _) = transform2(&g, 1e-8, &id).unwrap();
        assert_eq!(r1, m(&[&[10.0 + 1e-8, 14.0], &[14.0, 20.0 + 1e-8]]));

        let keys = MaskKeys::from_parts(
            SignedPermutation::identity(2),
            ScaledPermutation::new(vec![0, 1], vec![2, 1]).unwrap(),
            0,
            ScaleMode::Pow2,
        )
        .unwrap();
        let (_, r2) = transform2(&DenseMatrix::zeros(2, 2), 1.0, &keys).unwrap();
        assert_eq!(r2, DenseMatrix::diagonal(&[4.0, 1.0]).unwrap());
        assert!(transform2(&g, -1.0, &id).is_err());
    }

    #[test]
    fn session_runs_end_to_end() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let keys = generate_keys(2, 2, 5, ScaleMode::Pow2).unwrap();
        let mut worker = CloudWorker::honest();
        let mut s = OutsourceSession::new(a.clone(), 1e-8, keys, 1).unwrap();
        let masked = s.transform1().unwrap().clone();
        let mg = worker.handle_gram(1, masked).unwrap();
        assert_eq!(
            s.recover1(&mg).unwrap(),
            &m(&[&[10.0, 14.0], &[14.0, 20.0]])
        );
        let r2 = s.transform2().unwrap().clone();
        let r3 = worker.handle_invprod(1, &r2).unwrap();
        s.recover2(&r3).unwrap();
        let report = s
            .verify(1, 1e-6, &mut ChaCha20Rng::seed_from_u64(0))
            .unwrap();
        assert!(report.accepted, "{report:?}");
        assert_eq!(s.ops().total(), 8 + 8 + 10 + 8 + 8);
    }

    #[test]
    fn stage_order_is_enforced() {
        let mut s =
            OutsourceSession::new(DenseMatrix::identity(2), 0.0, MaskKeys::identity(2, 2), 1)
                .unwrap();
        assert!(matches!(s.transform2(), Err(Error::State(_))));
        assert!(matches!(
            s.verify(1, 1e-6, &mut ChaCha20Rng::seed_from_u64(0)),
            Err(Error::State(_))
        ));
        s.transform1().unwrap();
        assert!(matches!(s.transform1(), Err(Error::State(_))));
        assert!(matches!(
            s.recover2(&DenseMatrix::identity(2)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn recover2_examples() {
        let r3 = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(recover2(&r3, &MaskKeys::identity(3, 2)).unwrap(), r3);

        let mut t = InProcessTransport::new(CloudWorker::honest());
        let mut s =
            OutsourceSession::new(DenseMatrix::identity(2), 0.0, MaskKeys::identity(2, 2), 1)
                .unwrap();
        let r4 = s
            .run(&mut t, 1, 1e-6, &mut ChaCha20Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r4, DenseMatrix::identity(2));

        let a = m(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        let keys = generate_keys(3, 2, 8, ScaleMode::Paper).unwrap();
        let r4 = outsourced_pinv(&a, 1e-10, &keys, &mut t, &OutsourceOptions::default()).unwrap();
        assert!(close(&r4, &m(&[&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.0]]), 1e-8));
    }

    #[test]
    fn verify_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let id = DenseMatrix::identity(2);
        let r = verify(&id, &id, 1, 1e-6, &mut rng).unwrap();
        assert!(r.accepted);
        assert_eq!(r.max_residual, 0.0);

        let bad = id.with_entry(0, 1, 1e-3).unwrap();
        let r = verify(&bad, &id, 1, 1e-6, &mut rng).unwrap();
        assert!(!r.accepted);
        assert!(r.max_residual > 1e-6);

        let wide = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            verify(&DenseMatrix::zeros(3, 2), &wide, 1, 1e-6, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            verify(&id, &DenseMatrix::identity(3), 1, 1e-6, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn local_pinv_examples() {
        let p = local_pinv(&m(&[&[2.0]]), 1e-12).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-9);
        assert_eq!(
            local_pinv(&DenseMatrix::identity(3), 0.0).unwrap(),
            DenseMatrix::identity(3)
        );
        let a = m(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        assert!(close(
            &local_pinv(&a, 1e-8).unwrap(),
            &m(&[&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.0]]),
            1e-8
        ));
        assert!(matches!(
            local_pinv(&m(&[&[1.0, 1.0], &[1.0, 1.0]]), 0.0),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn faulty_workers_are_caught() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = DenseMatrix::random_uniform(20, 6, &mut rng);
        let keys = generate_keys(20, 6, 3, ScaleMode::Pow2).unwrap();
        for fault in [
            FaultMode::LazyIdentity,
            FaultMode::RandomResult,
            FaultMode::Perturb(1e-2),
        ] {
            let mut t = InProcessTransport::new(CloudWorker::new(fault, 4));
            let err =
                outsourced_pinv(&a, 1e-8, &keys, &mut t, &OutsourceOptions::default()).unwrap_err();
            assert!(
                matches!(err, Error::ResultRejected(r) if !r.accepted),
                "{fault}"
            );
        }
    }

    #[test]
    fn retries_reissue_the_request() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = DenseMatrix::random_uniform(12, 4, &mut rng);
        let keys = generate_keys(12, 4, 3, ScaleMode::Pow2).unwrap();
        let mut t = InProcessTransport::new(CloudWorker::new(FaultMode::RandomResult, 4));
        let opts = OutsourceOptions {
            retries: 2,
            ..Default::default()
        };
        assert!(outsourced_pinv(&a, 1e-8, &keys, &mut t, &opts).is_err());
        assert_eq!(t.worker().stats().gram_requests, 3);
    }
}
