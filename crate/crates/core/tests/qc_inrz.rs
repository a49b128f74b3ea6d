use izoo_core::inrz::{load_inr2d, save_inr2d, FormatError, InrRecord, VERSION};
use izoo_core::qc::{run_three_phase, Phase, QcPolicy};
use izoo_core::synth::{noise_image, smooth_image};
use izoo_core::{Arch, ImageGrid, Inr2d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn policy(basic: usize) -> QcPolicy {
    QcPolicy {
        basic_iters: basic,
        ..QcPolicy::default()
    }
}

#[test]
fn constant_image_passes_in_basic_phase() {
    let img = ImageGrid::filled(8, 8, [0.3, 0.5, 0.7]).unwrap();
    let (_, rec) = run_three_phase("c", &img, Arch::preset("cifar").unwrap(), &policy(200), 1).unwrap();
    assert_eq!(rec.phase, Phase::Basic);
    assert!(rec.passed);
    assert_eq!(rec.iterations, 200);
}

#[test]
fn noise_with_tiny_model_fails_at_hard_cap() {
    let img = noise_image(16, 16, 2).unwrap();
    let p = policy(20);
    let (inr, rec) = run_three_phase("n", &img, Arch::new(2, 4), &p, 3).unwrap();
    assert_eq!(rec.phase, Phase::Failed);
    assert!(!rec.passed);
    assert_eq!(rec.iterations, 20 * (1 + 3 + 10));
    assert_eq!(rec.iterations, p.max_iterations());
    // The failed item still carries its fit and measured PSNR.
    assert_eq!(inr.psnr_against(&img).unwrap(), rec.psnr);
}

#[test]
fn zero_threshold_passes_everything_in_basic() {
    let p = QcPolicy {
        threshold: 0.0,
        ..policy(30)
    };
    for seed in 0..3 {
        let img = noise_image(8, 8, seed).unwrap();
        let (_, rec) = run_three_phase("z", &img, Arch::new(2, 4), &p, seed).unwrap();
        assert_eq!((rec.phase, rec.iterations, rec.passed), (Phase::Basic, 30, true));
    }
}

#[test]
fn record_phase_agrees_with_iterations() {
    let p = policy(100);
    let arch = Arch::preset("cifar").unwrap();
    for seed in 0..4 {
        let img = smooth_image(16, 16, seed).unwrap();
        let (_, rec) = run_three_phase("s", &img, arch, &p, seed).unwrap();
        assert_eq!(rec.passed, rec.psnr >= p.threshold);
        assert!(rec.iterations <= p.max_iterations());
        match rec.phase {
            Phase::Basic => assert_eq!(rec.iterations, 100),
            Phase::Extended => assert!(rec.iterations > 100 && rec.iterations <= 400),
            Phase::Final => assert!(rec.iterations > 400),
            Phase::Failed => assert_eq!(rec.iterations, p.max_iterations()),
        }
        // Early stops land on the check interval.
        if rec.phase == Phase::Extended {
            assert_eq!((rec.iterations - 100) % p.check_interval(), 0);
        }
    }
}

fn random_inr(seed: u64) -> Inr2d {
    Inr2d::siren_init(Arch::preset("cifar").unwrap(), seed).unwrap()
}

#[test]
fn inrz_round_trip_is_bit_identical_on_queries() {
    let dir = tempfile::tempdir().unwrap();
    let inr = random_inr(9);
    let path = dir.path().join("a.inrz");
    save_inr2d(&inr, &path).unwrap();
    let back = load_inr2d(&path).unwrap();
    // Weights are stored as f32 and siren_init already rounds to f32.
    assert_eq!(back, inr);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coords: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = inr.query_points(&coords).unwrap();
    let b = back.query_points(&coords).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    // Writing again gives the same bytes.
    let path2 = dir.path().join("b.inrz");
    save_inr2d(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn inrz_rejects_damage() {
    let bytes = InrRecord::from(&random_inr(2)).to_bytes().unwrap();

    for pos in [40, 100, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(matches!(InrRecord::from_bytes(&bad), Err(FormatError::CrcMismatch { .. })), "byte {pos}");
    }

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert_eq!(
        InrRecord::from_bytes(&bad),
        Err(FormatError::UnsupportedVersion { found: VERSION + 1 })
    );

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(InrRecord::from_bytes(&bad), Err(FormatError::BadMagic));

    assert!(matches!(InrRecord::from_bytes(&bytes[..6]), Err(FormatError::Truncated(_))));
    assert!(matches!(InrRecord::from_bytes(&bytes[..50]), Err(FormatError::Truncated(_))));
    assert!(InrRecord::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(InrRecord::from_bytes(&bytes[..bytes.len() - 200]).is_err());
}

#[test]
fn truncated_but_consistent_crc_is_still_rejected() {
    // Drop a layer's tail and re-seal the CRC: the shape check must catch it.
    let bytes = InrRecord::from(&random_inr(3)).to_bytes().unwrap();
    let mut body = bytes[..bytes.len() - 4 - 8].to_vec();
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(InrRecord::from_bytes(&body), Err(FormatError::Truncated(_))));
}
