use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pbls::client::{recover1, recover2, transform1};
use pbls::data::{parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
use pbls::keygen::{generate_keys, MaskKeys, ScaleMode};
use pbls::matrix::{
    dense_inverse, gram, mat_mul, DenseMatrix, ScaledPermutation, SignedPermutation,
};
use pbls::protocol::{read_frame, Frame, Opcode};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c)
            .prop_map(move |v| DenseMatrix::new(r, c, v).unwrap())
    })
}

fn mode() -> impl Strategy<Value = ScaleMode> {
    prop_oneof![Just(ScaleMode::Pow2), Just(ScaleMode::Paper)]
}

fn opcode() -> impl Strategy<Value = Opcode> {
    prop_oneof![
        Just(Opcode::GramReq),
        Just(Opcode::GramResp),
        Just(Opcode::InvProdReq),
        Just(Opcode::InvProdResp),
        Just(Opcode::Error),
    ]
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn structured_products_match_dense(a in matrix(12, 12), seed in any::<u64>(), mode in mode()) {
        let keys = generate_keys(a.rows(), a.cols(), seed, mode).unwrap();
        let p = keys.p().to_dense();
        let q = keys.q().to_dense();
        let dense = mat_mul(&mat_mul(&p, &a).unwrap(), &q).unwrap();
        prop_assert_eq!(transform1(&a, &keys).unwrap(), dense);
    }

    #[test]
    fn conjugation_inverts(m in matrix(10, 10), seed in any::<u64>(), mode in mode()) {
        let n = m.rows();
        let m = DenseMatrix::from_fn(n, n, |i, j| m[(i, j % m.cols())]);
        let q = generate_keys(1, n, seed, mode).unwrap().q().clone();
        let back = q.unconjugate(&q.conjugate(&m).unwrap()).unwrap();
        match mode {
            ScaleMode::Pow2 => prop_assert_eq!(back, m),
            ScaleMode::Paper => prop_assert!(max_abs_diff(&back, &m) <= 1e-15 * m.max_abs().max(1.0)),
        }
    }

    #[test]
    fn masked_gram_recovers(a in matrix(16, 8), seed in any::<u64>()) {
        let keys = generate_keys(a.rows(), a.cols(), seed, ScaleMode::Pow2).unwrap();
        let masked = transform1(&a, &keys).unwrap();
        prop_assert_eq!(recover1(&gram(&masked).unwrap(), &keys).unwrap(), gram(&a).unwrap());
    }

    #[test]
    fn recover2_is_q_r3_p(r3 in matrix(8, 12), seed in any::<u64>(), mode in mode()) {
        let keys = generate_keys(r3.cols(), r3.rows(), seed, mode).unwrap();
        let dense = mat_mul(&mat_mul(&keys.q().to_dense(), &r3).unwrap(), &keys.p().to_dense()).unwrap();
        prop_assert_eq!(recover2(&r3, &keys).unwrap(), dense);
    }

    #[test]
    fn signed_permutation_is_orthogonal(seed in any::<u64>(), m in 1usize..20) {
        let p: SignedPermutation = generate_keys(m, 1, seed, ScaleMode::Pow2).unwrap().p().clone();
        let d = p.to_dense();
        prop_assert_eq!(mat_mul(&d, &d.transpose()).unwrap(), DenseMatrix::identity(m));
        prop_assert_eq!(p.transpose().to_dense(), d.transpose());
    }

    #[test]
    fn scaled_permutation_inverse(seed in any::<u64>(), n in 1usize..20) {
        let q: ScaledPermutation = generate_keys(1, n, seed, ScaleMode::Pow2).unwrap().q().clone();
        prop_assert_eq!(mat_mul(&q.to_dense(), &q.inverse_dense()).unwrap(), DenseMatrix::identity(n));
    }

    #[test]
    fn mat_mul_is_exactly_rounded_on_integers(a in matrix(6, 6), b in matrix(6, 6)) {
        // scaled to integers below 2^20: every partial sum is exact
        let a = a.map(|v| (v * 1048576.0).trunc()).unwrap();
        let b = DenseMatrix::from_fn(a.cols(), b.cols(), |i, j| (b[(i % b.rows(), j)] * 1048576.0).trunc());
        let p = mat_mul(&a, &b).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let exact: i128 = (0..a.cols()).map(|k| a[(i, k)] as i128 * b[(k, j)] as i128).sum();
                prop_assert_eq!(p[(i, j)], exact as f64);
            }
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity(a in matrix(8, 8)) {
        let n = a.rows();
        // diagonally dominant, hence well conditioned
        let m = DenseMatrix::from_fn(n, n, |i, j| a[(i, j % a.cols())] + if i == j { n as f64 + 1.0 } else { 0.0 });
        let inv = dense_inverse(&m).unwrap();
        prop_assert!(max_abs_diff(&mat_mul(&m, &inv).unwrap(), &DenseMatrix::identity(n)) < 1e-12);
    }

    #[test]
    fn matrix_bytes_round_trip(a in matrix(9, 9)) {
        let bytes = a.to_bytes();
        prop_assert_eq!(bytes.len(), a.encoded_len());
        prop_assert_eq!(DenseMatrix::from_bytes(&bytes).unwrap(), a.clone());
        prop_assert!(DenseMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn frames_round_trip(op in opcode(), sid in any::<u64>(), payload in prop::collection::vec(any::<u8>(), 0..300)) {
        let f = Frame::new(op, sid, payload);
        let bytes = f.encode().unwrap();
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn frame_prefixes_never_decode(op in opcode(), payload in prop::collection::vec(any::<u8>(), 0..64), cut in any::<prop::sample::Index>()) {
        let bytes = Frame::new(op, 3, payload).encode().unwrap();
        let cut = cut.index(bytes.len());
        let r = read_frame(&mut &bytes[..cut]);
        if cut == 0 {
            prop_assert!(matches!(r, Ok(None)));
        } else {
            prop_assert!(r.is_err());
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = Frame::decode(&bytes);
        let _ = DenseMatrix::from_bytes(&bytes);
        let _ = parse_idx_images(&bytes);
        let _ = parse_idx_labels(&bytes);
        let _ = MaskKeys::import(bytes.as_slice());
    }

    #[test]
    fn idx_round_trip(count in 0usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..count * h * w).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..count).map(|_| rng.random_range(0..10)).collect();
        let mut img = Vec::new();
        write_idx_images(&mut img, count, h, w, &pixels).unwrap();
        let mut lbl = Vec::new();
        write_idx_labels(&mut lbl, &labels).unwrap();
        prop_assert_eq!(parse_idx_images(&img).unwrap(), (count, h, w, pixels));
        prop_assert_eq!(parse_idx_labels(&lbl).unwrap(), labels);
    }

    #[test]
    fn key_files_round_trip(m in 1usize..12, n in 1usize..12, seed in any::<u64>(), mode in mode()) {
        let keys = generate_keys(m, n, seed, mode).unwrap();
        let mut buf = Vec::new();
        keys.export(&mut buf).unwrap();
        let (p, q) = MaskKeys::import(buf.as_slice()).unwrap();
        prop_assert_eq!(&p, keys.p());
        prop_assert_eq!(&q, keys.q());
    }

    #[test]
    fn keys_are_reproducible(m in 1usize..30, n in 1usize..30, seed in any::<u64>(), mode in mode()) {
        let k = generate_keys(m, n, seed, mode).unwrap();
        prop_assert_eq!(&k, &generate_keys(m, n, seed, mode).unwrap());
        let max = mode.max_scale(n);
        prop_assert!(k.q().scales().iter().all(|&s| s >= 1 && s <= max));
    }
}
