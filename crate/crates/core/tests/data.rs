mod common;

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use milab::data::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, split_disjoint, synth_blobs,
    SplitSpec,
};
use proptest::prelude::*;

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

#[test]
fn mnist_sized_header_parses() {
    let bytes = encode_idx_images(2, 28, 28, &[0u8; 1568]);
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    let t = parse_idx_images(&bytes).unwrap();
    assert_eq!(t.shape(), &[2, 1, 28, 28]);
}

#[test]
fn pixel_endpoints_map_to_unit_interval() {
    let t = parse_idx_images(&encode_idx_images(1, 1, 2, &[0, 255])).unwrap();
    assert_eq!(t.data(), &[-1.0, 1.0]);
}

#[test]
fn gzip_and_plain_files_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 4 * 4).map(|i| (i * 5) as u8).collect();
    let img = encode_idx_images(3, 4, 4, &pixels);
    let lab = encode_idx_labels(&[2, 0, 1]);
    std::fs::write(dir.path().join("i.idx"), &img).unwrap();
    std::fs::write(dir.path().join("l.idx"), &lab).unwrap();
    std::fs::write(dir.path().join("i.idx.gz"), gz(&img)).unwrap();
    std::fs::write(dir.path().join("l.idx.gz"), gz(&lab)).unwrap();
    let a = load_idx(&dir.path().join("i.idx"), &dir.path().join("l.idx")).unwrap();
    let b = load_idx(&dir.path().join("i.idx.gz"), &dir.path().join("l.idx.gz")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels(), &[2, 0, 1]);
}

#[test]
fn image_label_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("i"), encode_idx_images(10, 2, 2, &[7u8; 40])).unwrap();
    std::fs::write(dir.path().join("l"), encode_idx_labels(&[0u8; 9])).unwrap();
    let err = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
    assert!(err.to_string().contains("10") && err.to_string().contains("9"), "{err}");
}

#[test]
fn missing_file_names_the_path() {
    let err = load_idx("/nonexistent/a.idx".as_ref(), "/nonexistent/b.idx".as_ref()).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/a.idx"), "{err}");
}

#[test]
fn mnist_split_is_class_disjoint_and_complete() {
    let (img, lab) = common::mnist_paths();
    let all = load_idx(&img, &lab).unwrap();
    assert_eq!(all.image_shape(), [1, 28, 28]);
    let s = split_disjoint(&all, &SplitSpec::new(0..5, 5..10)).unwrap();
    assert_eq!(s.private.len() + s.public.len(), all.len());
    assert_eq!(s.private.class_set().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(s.public.class_set().iter().all(|c| (5..10).contains(c)));
    assert_eq!(s.dense_to_raw, vec![0, 1, 2, 3, 4]);
}

#[test]
fn degenerate_splits_are_rejected() {
    let d = synth_blobs(3, 2, 4, 0).unwrap();
    assert!(split_disjoint(&d, &SplitSpec::new(0..3, Vec::new())).is_err());
    assert!(split_disjoint(&d, &SplitSpec::new([0, 1], [1, 2])).is_err());
}

proptest! {
    #[test]
    fn idx_roundtrip(n in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..n * h * w).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let t = parse_idx_images(&encode_idx_images(n, h, w, &pixels)).unwrap();
        prop_assert_eq!(t.shape(), &[n, 1, h, w]);
        for (v, p) in t.data().iter().zip(&pixels) {
            prop_assert!(((v + 1.0) * 127.5 - *p as f64).abs() < 1e-9);
        }
        let labels: Vec<u8> = pixels.iter().map(|p| p % 10).collect();
        let back = parse_idx_labels(&encode_idx_labels(&labels)).unwrap();
        prop_assert_eq!(back, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_image_files_are_rejected(cut in 1usize..20) {
        let bytes = encode_idx_images(2, 3, 3, &[1u8; 18]);
        prop_assert!(parse_idx_images(&bytes[..bytes.len() - cut]).is_err());
    }
}
