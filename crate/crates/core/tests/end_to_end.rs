use std::net::TcpListener;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pbls::bls::{train, BlsConfig, LocalPinv, OutsourcedPinv};
use pbls::client::{local_pinv, outsourced_pinv, OutsourceOptions};
use pbls::data::synthetic_blobs_split;
use pbls::error::Error;
use pbls::keygen::{generate_keys, ScaleMode};
use pbls::matrix::DenseMatrix;
use pbls::protocol::{read_frame, write_frame, Frame, Opcode};
use pbls::transport::{spawn_pipe_worker, InProcessTransport, StreamTransport, Transport};
use pbls::worker::{serve_listener, CloudWorker, FaultMode};

fn tcp_worker(fault: FaultMode) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || serve_listener(listener, fault, 1));
    addr
}

#[test]
fn tcp_outsourcing_matches_local() {
    let addr = tcp_worker(FaultMode::Honest);
    let mut transport = StreamTransport::connect(addr).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(40);
    let a = DenseMatrix::random_uniform(40, 12, &mut rng);
    let keys = generate_keys(40, 12, 9, ScaleMode::Paper).unwrap();
    let r4 = outsourced_pinv(
        &a,
        1e-8,
        &keys,
        &mut transport,
        &OutsourceOptions::default(),
    )
    .unwrap();
    let local = local_pinv(&a, 1e-8).unwrap();
    assert!(r4.relative_frobenius_distance(&local).unwrap() < 1e-8);
    let (sent, received) = transport.traffic();
    assert_eq!(sent, (22 + 16 + 40 * 12 * 8) + (22 + 16 + 12 * 12 * 8));
    assert_eq!(received, (22 + 16 + 12 * 12 * 8) + (22 + 16 + 12 * 40 * 8));
}

#[test]
fn identity_pinv_over_pipe() {
    let (mut transport, _handle) = spawn_pipe_worker(CloudWorker::honest());
    let keys = generate_keys(4, 4, 2, ScaleMode::Pow2).unwrap();
    let r4 = outsourced_pinv(
        &DenseMatrix::identity(4),
        1e-10,
        &keys,
        &mut transport,
        &Default::default(),
    )
    .unwrap();
    assert!(r4.sub(&DenseMatrix::identity(4)).unwrap().max_abs() < 1e-9);
}

#[test]
fn faulty_tcp_workers_are_rejected() {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let a = DenseMatrix::random_uniform(30, 10, &mut rng);
    let keys = generate_keys(30, 10, 3, ScaleMode::Pow2).unwrap();
    for fault in [
        FaultMode::LazyIdentity,
        FaultMode::RandomResult,
        FaultMode::Perturb(1e-3),
    ] {
        let mut transport = StreamTransport::connect(tcp_worker(fault)).unwrap();
        let err =
            outsourced_pinv(&a, 1e-8, &keys, &mut transport, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::ResultRejected(_)), "{fault}: {err}");
    }
}

#[test]
fn random_results_are_always_rejected() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut transport = InProcessTransport::new(CloudWorker::new(FaultMode::RandomResult, 5));
    for t in 0..100u64 {
        let n = 8 + (t as usize % 25);
        let a = DenseMatrix::random_uniform(2 * n + 4, n, &mut rng);
        let keys = generate_keys(a.rows(), n, t, ScaleMode::Pow2).unwrap();
        let err =
            outsourced_pinv(&a, 1e-8, &keys, &mut transport, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::ResultRejected(_)));
    }
}

#[test]
fn tcp_worker_answers_garbage_with_an_error_frame() {
    let addr = tcp_worker(FaultMode::Honest);
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    use std::io::Write;
    // exactly one header's worth, so the worker leaves nothing unread
    stream.write_all(b"GET / HTTP/1.1\r\nHost:x").unwrap();
    let resp = read_frame(&mut stream).unwrap().unwrap();
    assert_eq!(resp.opcode, Opcode::Error);
    // the connection is closed afterwards
    assert!(read_frame(&mut stream).unwrap().is_none());
}

#[test]
fn sessions_are_per_connection() {
    let addr = tcp_worker(FaultMode::Honest);
    let mut first = std::net::TcpStream::connect(addr).unwrap();
    write_frame(
        &mut first,
        &Frame::with_matrix(Opcode::GramReq, 5, &DenseMatrix::identity(2)),
    )
    .unwrap();
    assert_eq!(
        read_frame(&mut first).unwrap().unwrap().opcode,
        Opcode::GramResp
    );

    let mut second = StreamTransport::connect(addr).unwrap();
    let resp = second
        .exchange(&Frame::with_matrix(
            Opcode::InvProdReq,
            5,
            &DenseMatrix::identity(2),
        ))
        .unwrap();
    assert_eq!(resp.opcode, Opcode::Error);
}

#[test]
fn bls_backends_agree() {
    let (train_set, test_set) = synthetic_blobs_split(2, 100, 100, 10, 6.0, 3).unwrap();
    let config = BlsConfig {
        seed: 3,
        ..Default::default()
    };
    let local = train(&train_set, &config, &mut LocalPinv).unwrap();
    let (transport, _handle) = spawn_pipe_worker(CloudWorker::honest());
    let mut backend =
        OutsourcedPinv::new(transport, ScaleMode::Pow2, 3, OutsourceOptions::default());
    let outsourced = train(&train_set, &config, &mut backend).unwrap();
    let (wl, wo) = (
        local.output_weights().unwrap(),
        outsourced.output_weights().unwrap(),
    );
    assert!(wo.relative_frobenius_distance(wl).unwrap() < 1e-7);
    assert!(local.evaluate(&train_set).unwrap() >= 0.95);
    assert_eq!(
        local.predict(&test_set.x).unwrap(),
        outsourced.predict(&test_set.x).unwrap()
    );
    assert!(backend.last_ops().total() > 0);

    let again = train(&train_set, &config, &mut LocalPinv).unwrap();
    let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(again.output_weights().unwrap()), bits(wl));
}

#[test]
fn bls_training_against_a_cheating_worker_fails() {
    let (train_set, _) = synthetic_blobs_split(2, 100, 10, 10, 6.0, 4).unwrap();
    let transport = InProcessTransport::new(CloudWorker::new(FaultMode::RandomResult, 0));
    let mut backend =
        OutsourcedPinv::new(transport, ScaleMode::Pow2, 4, OutsourceOptions::default());
    let err = train(&train_set, &BlsConfig::default(), &mut backend).unwrap_err();
    assert!(matches!(err, Error::ResultRejected(_)));
}

#[test]
fn separated_blobs_are_centroid_separable() {
    let blobs = pbls::data::synthetic_blobs_raw(2, 200, 2, 10.0, 8).unwrap();
    let fresh = pbls::data::synthetic_blobs_split(2, 200, 200, 2, 10.0, 8)
        .unwrap()
        .1;
    // nearest centroid in the normalised space of the training set
    let scaled = fresh.scaling.transform(&blobs.centers).unwrap();
    let correct = (0..fresh.len())
        .filter(|&i| {
            let d = |k: usize| {
                (0..2)
                    .map(|j| (fresh.x[(i, j)] - scaled[(k, j)]).powi(2))
                    .sum::<f64>()
            };
            let guess = if d(0) <= d(1) { 0 } else { 1 };
            guess == fresh.labels[i]
        })
        .count();
    assert_eq!(correct, fresh.len());
}

#[test]
fn indistinguishable_blobs_are_at_chance() {
    let (train_set, test_set) = synthetic_blobs_split(2, 500, 500, 10, 0.0, 6).unwrap();
    let model = train(&train_set, &BlsConfig::default(), &mut LocalPinv).unwrap();
    let acc = model.evaluate(&test_set).unwrap();
    assert!((acc - 0.5).abs() < 0.08, "accuracy {acc}");
}
