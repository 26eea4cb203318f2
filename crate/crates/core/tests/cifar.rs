use stylerecal::data::{encode_cifar10, load_cifar10, Split, CIFAR10_MEAN, CIFAR10_PER_FILE, CIFAR10_RECORD, CIFAR10_STD};
use stylerecal::Error;

fn fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
    let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
    let pixels: Vec<u8> = (0..n * (CIFAR10_RECORD - 1)).map(|i| (i * 31 % 256) as u8).collect();
    (labels, pixels)
}

#[test]
fn loads_a_full_test_batch() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, pixels) = fixture(CIFAR10_PER_FILE);
    std::fs::write(dir.path().join("test_batch.bin"), encode_cifar10(&labels, &pixels).unwrap()).unwrap();
    let ds = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(ds.len(), CIFAR10_PER_FILE);
    assert_eq!(ds.image_shape(), [3, 32, 32]);
    assert_eq!(ds.labels.iter().map(|&l| l as u8).collect::<Vec<_>>(), labels);
    // pixel (image 123, channel 2, row 4, col 5)
    let (img, ch, off) = (123, 2, 4 * 32 + 5);
    let raw = pixels[img * 3072 + ch * 1024 + off] as f32;
    let expected = (raw / 255.0 - CIFAR10_MEAN[ch]) / CIFAR10_STD[ch];
    assert!((ds.image(img)[ch * 1024 + off] - expected).abs() < 1e-6);
}

#[test]
fn short_file_reports_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, pixels) = fixture(10);
    std::fs::write(dir.path().join("test_batch.bin"), encode_cifar10(&labels, &pixels).unwrap()).unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Format { .. })));
}

#[test]
fn truncated_and_corrupt_records_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, pixels) = fixture(CIFAR10_PER_FILE);
    let mut bytes = encode_cifar10(&labels, &pixels).unwrap();
    bytes.truncate(bytes.len() - 100);
    std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
    match load_cifar10(dir.path(), Split::Test) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, (CIFAR10_PER_FILE - 1) * CIFAR10_RECORD),
        other => panic!("{other:?}"),
    }

    let mut bytes = encode_cifar10(&labels, &pixels).unwrap();
    bytes[5 * CIFAR10_RECORD] = 12;
    std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
    match load_cifar10(dir.path(), Split::Test) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, 5 * CIFAR10_RECORD),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_training_batches_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Train), Err(Error::Io(_))));
}
