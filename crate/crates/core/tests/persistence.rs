use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use binnet::checkpoint::{Checkpoint, ModelKind};
use binnet::compress::{select_channels, SelectionPolicy};
use binnet::data::{load_cifar10, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use binnet::network::{NetworkSpec, Student, Teacher};
use binnet::train::{OptimizerKind, TrainState};
use binnet::Error;

#[test]
fn saved_student_reloads_and_checksums_match() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    let spec = NetworkSpec::toy().with_shortcuts(2);
    let mut s = Student::new(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let report = select_channels(&mut s, &SelectionPolicy::global(0.4)).unwrap();
    let ck = Checkpoint::from_student(&s, None, Some(&report));
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.checksum(), ck.checksum());
    assert_eq!(back.meta.kind, ModelKind::Student);
    assert_eq!(back.to_student().unwrap(), s);
    assert_eq!(back.meta.selection.as_ref().unwrap().total_kept, report.total_kept);
    let state = back.train_state(OptimizerKind::Adam, 0.0);
    assert_eq!(state.step, 0);
}

#[test]
fn tampered_file_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    let t = Teacher::new(&NetworkSpec::toy(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    Checkpoint::from_teacher(&t, Some(&TrainState::new(&Default::default())))
        .save(&path)
        .unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 3;
    bytes[mid] ^= 0x10;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Corruption(_))));
    // truncation as well
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn cifar_loader_reports_missing_and_malformed_archives() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cifar");
    assert!(matches!(load_cifar10(&root), Err(Error::MissingData(_))));

    fs::create_dir(&root).unwrap();
    fs::write(root.join(CIFAR_TRAIN_FILES[0]), vec![0u8; CIFAR_RECORD]).unwrap();
    assert!(matches!(load_cifar10(&root), Err(Error::MissingData(_))));

    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        fs::write(root.join(name), vec![0u8; 2 * CIFAR_RECORD]).unwrap();
    }
    assert!(matches!(load_cifar10(&root), Err(Error::Data { .. })));
}
