//! CIFAR-10 binary loading against small hand-made files.

use std::fs;
use std::path::Path;

use batchlens::data::{load_cifar10_with, pad_image, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use batchlens::Error;

const PER_FILE: usize = 3;

fn record(label: u8, seed: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072u32).map(|i| (i as u8).wrapping_mul(7).wrapping_add(seed)));
    r
}

fn write_files(dir: &Path) {
    for (f, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let bytes: Vec<u8> = (0..PER_FILE)
            .flat_map(|i| record(((f * PER_FILE + i) % 10) as u8, i as u8))
            .collect();
        fs::write(dir.join(name), bytes).unwrap();
    }
    let test: Vec<u8> = (0..PER_FILE).flat_map(|i| record(9 - i as u8, 100 + i as u8)).collect();
    fs::write(dir.join(CIFAR_TEST_FILE), test).unwrap();
}

#[test]
fn loads_padded_normalized_images() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path());
    let (train, test, norm) = load_cifar10_with(dir.path(), PER_FILE).unwrap();
    assert_eq!((train.len(), test.len()), (5 * PER_FILE, PER_FILE));
    assert_eq!(train.image_dims(), [3, 40, 40]);
    assert_eq!(test.labels(), vec![9, 8, 7]);
    assert_eq!(train.image(4).label, 4);

    // border pixels hold the normalized zero
    let img = test.image(0).pixels.data();
    for c in 0..3 {
        let border = img[c * 1600];
        assert!((border - (-norm.mean[c] / norm.std[c])).abs() < 1e-6);
    }
    // the interior is the raw record scaled and normalized
    let raw = record(9, 100);
    let canvas = pad_image(&raw[1..], 4);
    let (y, x) = (4 + 10, 4 + 17);
    let v = canvas[1600 + y * 40 + x];
    assert_eq!(v, raw[1 + 1024 + 10 * 32 + 17] as f32 / 255.0);
    assert!((img[1600 + y * 40 + x] - (v - norm.mean[1]) / norm.std[1]).abs() < 1e-6);
}

#[test]
fn accepts_the_nested_distribution_directory() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("cifar-10-batches-bin");
    fs::create_dir(&nested).unwrap();
    write_files(&nested);
    assert!(load_cifar10_with(dir.path(), PER_FILE).is_ok());
}

#[test]
fn rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path());

    // wrong record count
    assert!(matches!(
        load_cifar10_with(dir.path(), PER_FILE + 1),
        Err(Error::Data(_))
    ));

    // truncated record
    let test = dir.path().join(CIFAR_TEST_FILE);
    let mut bytes = fs::read(&test).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&test, &bytes).unwrap();
    assert!(load_cifar10_with(dir.path(), PER_FILE).is_err());

    // label out of range
    bytes = (0..PER_FILE).flat_map(|_| record(10, 0)).collect();
    assert_eq!(bytes.len(), PER_FILE * CIFAR_RECORD);
    fs::write(&test, &bytes).unwrap();
    let err = load_cifar10_with(dir.path(), PER_FILE).unwrap_err();
    assert!(err.to_string().contains("label"), "{err}");

    // missing file names the path
    fs::remove_file(&test).unwrap();
    let err = load_cifar10_with(dir.path(), PER_FILE).unwrap_err();
    assert!(err.to_string().contains(CIFAR_TEST_FILE), "{err}");
}
