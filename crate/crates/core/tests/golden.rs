use std::path::PathBuf;
use std::process::Command;

use lsrm::golden::{self, compare_bytes};
use lsrm::harness::verify::{compare_golden_set, golden_set};
use lsrm::tensor::Tensor;
use lsrm::LsrmError;
use proptest::prelude::*;

fn frozen_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn desk_goldens_match_frozen_files_and_corruption_is_located() {
    let fresh = golden_set().unwrap();
    let ok = compare_golden_set(&frozen_dir(), &fresh);
    assert!(ok.passed, "{ok:?}");

    let tmp = tempfile::tempdir().unwrap();
    for (name, _) in &fresh {
        std::fs::copy(frozen_dir().join(name), tmp.path().join(name)).unwrap();
    }
    let target = tmp.path().join("sparse_stage.gv");
    let mut bytes = std::fs::read(&target).unwrap();
    bytes[4321] ^= 0x40;
    std::fs::write(&target, &bytes).unwrap();
    let bad = compare_golden_set(tmp.path(), &fresh);
    assert!(!bad.passed);
    let diag = bad.first_failure.unwrap();
    assert!(diag.starts_with("sparse_stage.gv") && diag.contains("byte 4321"), "{diag}");
}

#[test]
fn cli_verify_fails_on_corrupted_golden() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["dense_stage.gv", "sparse_stage.gv", "sparse_tokens.coords"] {
        std::fs::copy(frozen_dir().join(name), tmp.path().join(name)).unwrap();
    }
    let target = tmp.path().join("dense_stage.gv");
    let mut bytes = std::fs::read(&target).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&target, &bytes).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lsrm"))
        .args(["verify", "--suite", "golden", "--golden"])
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&format!("byte {}", bytes.len())), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("verify_golden.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}

fn tensors() -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(
        prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(any::<f32>(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        }),
        0..4,
    )
}

proptest! {
    #[test]
    fn encode_decode_round_trip(ts in tensors()) {
        let refs: Vec<&Tensor> = ts.iter().collect();
        let bytes = golden::encode(&refs);
        let back = golden::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), ts.len());
        for (a, b) in back.iter().zip(&ts) {
            prop_assert_eq!(a.shape(), b.shape());
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
        prop_assert_eq!(golden::encode(&back.iter().collect::<Vec<_>>()), bytes);
    }

    #[test]
    fn truncation_is_a_located_format_error(ts in tensors(), cut in 0.0..1.0f64) {
        let bytes = golden::encode(&ts.iter().collect::<Vec<_>>());
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assume!(keep < bytes.len());
        match golden::decode(&bytes[..keep]) {
            Err(LsrmError::Format { offset, .. }) => prop_assert!(offset as usize <= keep),
            other => prop_assert!(false, "expected format error, got {:?}", other.map(|t| t.len())),
        }
        let err = compare_bytes(&bytes, &bytes[..keep]).unwrap_err();
        let located = matches!(err, LsrmError::Format { offset, .. } if offset as usize == keep);
        prop_assert!(located);
    }

    #[test]
    fn coords_round_trip(c in prop::collection::vec(any::<[u32; 3]>(), 0..50)) {
        prop_assert_eq!(golden::decode_coords(&golden::encode_coords(&c)).unwrap(), c);
    }
}
