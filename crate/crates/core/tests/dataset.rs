use std::fs;

use lrdnet::dataset::{load_folder, save_folder, MANIFEST};
use lrdnet::synth::{gen_fake, gen_real};
use lrdnet::{Error, Family, Label};

#[test]
fn two_files_round_trip_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let real = gen_real(1, 32).unwrap();
    let (fake, _) = gen_fake(&real, Family::T2iProxy, 2).unwrap();
    save_folder(dir.path(), &[real.clone(), fake]).unwrap();
    let loaded = load_folder(dir.path(), &dir.path().join(MANIFEST), 32).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].label, Label::Real);
    assert_eq!((loaded[1].label, loaded[1].family), (Label::Fake, Some(Family::T2iProxy)));
    // 8-bit quantization is the only loss.
    for (a, b) in loaded[0].pixels.data().iter().zip(real.pixels.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }

    let again = load_folder(dir.path(), &dir.path().join(MANIFEST), 32).unwrap();
    for (a, b) in loaded.iter().zip(&again) {
        let bytes = |v: &[f32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(a.pixels.data()), bytes(b.pixels.data()));
    }

    let resized = load_folder(dir.path(), &dir.path().join(MANIFEST), 48).unwrap();
    assert_eq!(resized[0].pixels.shape(), [3, 48, 48]);
    assert!(resized[0].pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn bad_label_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    save_folder(dir.path(), &[gen_real(3, 32).unwrap()]).unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "filename,label\nimg_00000.png,0\nimg_00000.png,2\n").unwrap();
    match load_folder(dir.path(), &labels, 32) {
        Err(Error::Parse { line, reason, .. }) => {
            assert_eq!(line, 3);
            assert!(reason.contains('2'), "{reason}");
        }
        other => panic!("{:?}", other.map(|v| v.len())),
    }
}

#[test]
fn empty_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "filename,label\n").unwrap();
    assert!(matches!(load_folder(dir.path(), &labels, 32), Err(Error::Empty(_))));
    fs::write(&labels, "missing.png,1\n").unwrap();
    assert!(matches!(load_folder(dir.path(), &labels, 32), Err(Error::Image { .. })));
    assert!(load_folder(dir.path(), &dir.path().join("none.csv"), 32).is_err());
}
