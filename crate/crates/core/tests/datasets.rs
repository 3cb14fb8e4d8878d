use std::path::{Path, PathBuf};

use dybnn::data::{load_cifar10_files, load_mnist, CIFAR_RECORD, MNIST_MEAN, MNIST_STD};
use dybnn::Error;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist-mini")
}

/// Plain reader for IDX files, independent of the library loader.
fn oracle_idx(path: &Path) -> (Vec<u32>, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let ndims = bytes[3] as usize;
    let dims: Vec<u32> = (0..=ndims)
        .map(|i| u32::from_be_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]))
        .collect();
    (dims, bytes[4 + 4 * ndims..].to_vec())
}

#[test]
fn mnist_fixture_matches_independent_parser() {
    let splits = load_mnist(&fixture()).unwrap();
    for (split, prefix) in [(&splits.train, "train"), (&splits.test, "t10k")] {
        let (dims, labels) = oracle_idx(&fixture().join(format!("{prefix}-labels-idx1-ubyte")));
        assert_eq!(dims[0], 2049);
        assert_eq!(split.len(), dims[1] as usize);
        let want: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        assert_eq!(split.labels(), &want[..]);

        let (dims, pixels) = oracle_idx(&fixture().join(format!("{prefix}-images-idx3-ubyte")));
        assert_eq!(dims[0], 2051);
        assert_eq!(split.sample_shape(), (1, dims[2] as usize, dims[3] as usize));
        let b = split.batch(&[0]);
        for (got, &p) in b.images.data().iter().zip(&pixels[..784]) {
            assert_eq!(*got, (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD);
        }
    }
}

#[test]
fn canonical_mnist_first_label_is_five() {
    let Ok(dir) = std::env::var("DYBNN_MNIST_DIR") else {
        eprintln!("DYBNN_MNIST_DIR not set; skipping canonical MNIST check");
        return;
    };
    let (_, labels) = oracle_idx(&Path::new(&dir).join("train-labels-idx1-ubyte"));
    let splits = load_mnist(Path::new(&dir)).unwrap();
    assert_eq!(splits.train.len(), 60_000);
    assert_eq!(splits.test.len(), 10_000);
    assert_eq!(labels[0], 5);
    assert_eq!(splits.train.labels()[0], 5);
}

fn copy_fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for e in std::fs::read_dir(fixture()).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), dir.path().join(e.file_name())).unwrap();
    }
    dir
}

#[test]
fn corrupt_magic_names_the_file() {
    let dir = copy_fixture();
    let file = dir.path().join("t10k-labels-idx1-ubyte");
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[3] = 0x02;
    std::fs::write(&file, bytes).unwrap();
    match load_mnist(dir.path()) {
        Err(Error::MagicMismatch { file: f, found, expected }) => {
            assert_eq!(f, file);
            assert_eq!((found, expected), (2050, 2049));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn images_and_labels_must_agree_in_count() {
    let dir = copy_fixture();
    std::fs::copy(dir.path().join("t10k-labels-idx1-ubyte"), dir.path().join("train-labels-idx1-ubyte")).unwrap();
    assert!(matches!(load_mnist(dir.path()), Err(Error::LengthMismatch { images: 256, labels: 128 })));
}

fn cifar_file(dir: &Path, name: &str, records: usize) -> PathBuf {
    let mut bytes = Vec::with_capacity(records * CIFAR_RECORD);
    for r in 0..records {
        bytes.push((r % 10) as u8);
        bytes.extend((0..3072).map(|i| ((i + r) % 256) as u8));
    }
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn cifar_records_parse_with_labels_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let train = cifar_file(dir.path(), "data_batch_1.bin", 6);
    let test = cifar_file(dir.path(), "test_batch.bin", 3);
    let s = load_cifar10_files(&[train], &[test]).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (6, 3));
    assert!(s.train.labels()[0] <= 9);
    assert!(s.train.augments() && !s.test.augments());
    assert_eq!(s.test.eval_batches(2), s.test.eval_batches(2));
    assert_ne!(s.train.train_batches(6, 0, 0), s.train.train_batches(6, 0, 1));
}

#[test]
fn cifar_size_not_multiple_of_record() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data_batch_1.bin");
    std::fs::write(&p, vec![0u8; CIFAR_RECORD + 5]).unwrap();
    match load_cifar10_files(&[p.clone()], &[p.clone()]) {
        Err(Error::RecordSizeMismatch { file, size, record }) => {
            assert_eq!((file, size, record), (p, CIFAR_RECORD as u64 + 5, CIFAR_RECORD));
        }
        other => panic!("unexpected {other:?}"),
    }
}
