use std::fs;

use attestfl::data::load_idx;
use attestfl::Error;

fn images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn labels(values: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(values.len() as u32).to_be_bytes());
    b.extend_from_slice(values);
    b
}

#[test]
fn two_image_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    // two 2x3 images
    fs::write(&img, images(2, 2, 3, &[0, 51, 102, 153, 204, 255, 255, 0, 17, 34, 68, 136])).unwrap();
    fs::write(&lbl, labels(&[7, 3])).unwrap();
    let d = load_idx(&img, &lbl).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.input_dim(), 6);
    assert_eq!(d.labels(), &[7, 3]);
    assert_eq!(d.row(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(d.row(1)[0], 1.0);
    assert_eq!(d.row(1)[2], 17.0 / 255.0);
    assert_eq!(d.class_count(), 10);
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    let good = images(2, 2, 2, &[1, 2, 3, 4, 5, 6, 7, 8]);

    fs::write(&img, &good[..good.len() - 1]).unwrap();
    fs::write(&lbl, labels(&[0, 1])).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(Error::IdxFormat { .. })));

    let mut wrong_magic = good.clone();
    wrong_magic[3] = 1;
    fs::write(&img, &wrong_magic).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(Error::IdxFormat { .. })));

    fs::write(&img, &good).unwrap();
    fs::write(&lbl, labels(&[0, 1, 2])).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(Error::IdxConsistency(_))));

    assert!(matches!(load_idx(&dir.path().join("missing"), &lbl), Err(Error::Io { .. })));
}
