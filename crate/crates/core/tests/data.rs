use iamnn_core::data::{load_cifar_dir, Split};
use iamnn_core::{gen_synthetic, load_cifar_binary, CifarVariant, NoiseSpec, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PIXELS: usize = 3072;

fn random_records(n: usize, label_bytes: usize, classes: u8, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(n * (label_bytes + PIXELS));
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        if label_bytes == 2 {
            bytes.push(rng.random_range(0..20));
        }
        bytes.push(label);
        labels.push(label);
        bytes.extend((0..PIXELS).map(|_| rng.random::<u8>()));
    }
    (bytes, labels)
}

/// Per-channel mean and variance straight from the byte stream.
fn byte_stats(bytes: &[u8], label_bytes: usize) -> [(f64, f64); 3] {
    let mut acc = [(0.0, 0.0, 0usize); 3];
    for rec in bytes.chunks(label_bytes + PIXELS) {
        for (c, plane) in rec[label_bytes..].chunks(1024).enumerate() {
            for &b in plane {
                let v = b as f64 / 255.0;
                acc[c].0 += v;
                acc[c].1 += v * v;
                acc[c].2 += 1;
            }
        }
    }
    acc.map(|(s, sq, n)| {
        let m = s / n as f64;
        (m, sq / n as f64 - m * m)
    })
}

#[test]
fn full_cifar10_batch_parses_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let (bytes, labels) = random_records(10_000, 1, 10, 3);
    assert_eq!(bytes.len(), 30_730_000);
    std::fs::write(&path, &bytes).unwrap();

    let ds = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert!(ds.labels().iter().zip(&labels).all(|(&a, &b)| a == b as usize));

    let stats = byte_stats(&bytes, 1);
    let norm = ds.normalization();
    for c in 0..3 {
        assert!((norm.mean[c] as f64 - stats[c].0).abs() < 1e-5);
        assert!((norm.std[c] as f64 - stats[c].1.sqrt()).abs() < 1e-5);
    }
    // post-load channel means
    let data = ds.images().data();
    for c in 0..3 {
        let mean: f64 = data
            .chunks(1024)
            .enumerate()
            .filter(|(i, _)| i % 3 == c)
            .flat_map(|(_, p)| p.iter().map(|&v| v as f64))
            .sum::<f64>()
            / (10_000.0 * 1024.0);
        assert!(mean.abs() < 1e-3, "channel {c} mean {mean}");
    }
    // one pixel by hand: record 17, green channel, row 5, column 9
    let (rec, c, y, x) = (17, 1, 5, 9);
    let raw = bytes[rec * 3073 + 1 + c * 1024 + y * 32 + x] as f32 / 255.0;
    let got = data[((rec * 3 + c) * 32 + y) * 32 + x];
    assert!((got - (raw - norm.mean[c]) / norm.std[c]).abs() < 1e-5);

    let again = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap();
    assert_eq!(again.images(), ds.images());
}

#[test]
fn cifar100_reads_the_fine_label() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    let (bytes, labels) = random_records(50, 2, 100, 4);
    std::fs::write(&path, &bytes).unwrap();
    let ds = load_cifar_binary(&path, CifarVariant::Cifar100).unwrap();
    assert!(ds.labels().iter().zip(&labels).all(|(&a, &b)| a == b as usize));
}

#[test]
fn truncated_file_reports_offset_of_partial_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let (bytes, _) = random_records(3, 1, 10, 5);
    std::fs::write(&path, &bytes[..2 * 3073 + 100]).unwrap();
    match load_cifar_binary(&path, CifarVariant::Cifar10) {
        Err(iamnn_core::Error::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
        other => panic!("unexpected {:?}", other.err()),
    }
}

#[test]
fn synthetic_export_reloads_through_the_cifar_reader() {
    let mut spec = SyntheticSpec::new(4, 32, 6);
    spec.noise = NoiseSpec::Constant(0.2);
    let ds = gen_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for f in CifarVariant::Cifar10.files(Split::Test) {
        ds.export_cifar(&dir.path().join(f), CifarVariant::Cifar10).unwrap();
    }
    let back = load_cifar_dir(dir.path(), CifarVariant::Cifar10, Split::Test, None).unwrap();
    assert_eq!(back.labels(), ds.labels());
    let (a, b) = (ds.raw_images().unwrap(), back.raw_images().unwrap());
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 0.5 / 255.0 + 1e-5, "quantization error {worst}");
}

#[test]
fn noise_changes_samples_of_the_same_class() {
    let mut spec = SyntheticSpec::new(2, 8, 4);
    spec.noise = NoiseSpec::Alternating(0.5);
    let ds = gen_synthetic(&spec).unwrap();
    let raw = ds.raw_images().unwrap();
    let per = 3 * 8 * 8;
    // class 0 holds ids 0, 2, 4: clean, noisy, clean
    let sample = |i: usize| &raw.data()[i * per..(i + 1) * per];
    assert_eq!(ds.noise_levels()[0], 0.0);
    assert_eq!(ds.noise_levels()[2], 0.5);
    let diff: f32 = sample(0).iter().zip(sample(2)).map(|(a, b)| (a - b).abs()).sum::<f32>() / per as f32;
    assert!(diff > 0.0);
    assert_eq!(sample(0), sample(4));
}
