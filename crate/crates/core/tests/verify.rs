use isofuse::blocks::checkpoint::Checkpoint;
use isofuse::blocks::{BlockConfig, BlockKind, BlockParams};
use isofuse::numerics::{DenseArray, Rng};
use isofuse::verify::golden::{make_fixture, GoldenOp};
use isofuse::verify::{golden_compare, run_suite, write_summary, Suite, GOLDEN_TOL};

#[test]
fn property_and_oracle_suites_pass_sorted() {
    for suite in [Suite::Properties, Suite::Oracles] {
        let reports = run_suite(suite, 3);
        assert!(!reports.is_empty());
        assert!(reports.windows(2).all(|w| w[0].name <= w[1].name), "{suite:?} unsorted");
        for r in &reports {
            assert!(r.pass, "{}", r.line());
            assert!(r.cases > 0, "{}", r.name);
        }
    }
}

#[test]
fn summary_has_a_row_per_report() {
    let reports = run_suite(Suite::Golden, 0);
    let mut buf = Vec::new();
    write_summary(&reports, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,pass,max_abs_err,max_rel_err,cases,seed");
    assert_eq!(lines.len(), reports.len() + 1);
    for (line, r) in lines[1..].iter().zip(&reports) {
        assert!(line.starts_with(&format!("{},{},", r.name, r.pass)), "{line}");
    }
}

fn fixture_file(dir: &std::path::Path) -> (std::path::PathBuf, Checkpoint) {
    let cfg = BlockConfig::new(8, 12);
    let mut rng = Rng::new(9);
    let BlockParams::Sgst(p) = BlockParams::init(BlockKind::Sgst, &cfg, &mut rng).unwrap() else {
        unreachable!()
    };
    let x = DenseArray::uniform(&[12, 8], -1.0, 1.0, &mut rng);
    let ck = make_fixture(GoldenOp::SgstBlock, &x, &p, &[("C", "8".into()), ("N", "12".into())]).unwrap();
    let path = dir.join("fixture.ckpt");
    ck.save(&path).unwrap();
    (path, ck)
}

#[test]
fn golden_file_compares_and_detects_drift() {
    let dir = tempfile::tempdir().unwrap();
    let (path, mut ck) = fixture_file(dir.path());
    let r = golden_compare(&path, GOLDEN_TOL).unwrap();
    assert!(r.pass, "{}", r.line());
    assert_eq!(r.max_abs_err, 0.0);

    let expected = ck.tensors.iter_mut().find(|(n, _)| n == "expected").unwrap();
    expected.1.data_mut()[0] += 1e-6;
    ck.save(&path).unwrap();
    let r = golden_compare(&path, GOLDEN_TOL).unwrap();
    assert!(!r.pass);
    assert!((r.max_abs_err - 1e-6).abs() < 1e-9, "{}", r.max_abs_err);
}

#[test]
fn missing_golden_file_is_an_error() {
    assert!(golden_compare(std::path::Path::new("/nonexistent/fixture.ckpt"), GOLDEN_TOL).is_err());
}
