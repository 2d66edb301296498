use aap_core::data::generate_synthetic;
use aap_core::{CoOccurrencePriors, SyntheticSpec, SyntheticSplits};

#[test]
fn priors_survive_export() {
    let splits = generate_synthetic(&SyntheticSpec::default_entangled(11)).unwrap();
    let pri = CoOccurrencePriors::from_labels(&splits.train.labels, 0.25).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("priors.json");
    pri.export(&path).unwrap();
    let back = CoOccurrencePriors::load(&path).unwrap();
    assert_eq!(back, pri);
    assert!(back.validate().passed());
}

#[test]
fn synthetic_splits_survive_save() {
    let spec = SyntheticSpec::default_entangled(3);
    let splits = generate_synthetic(&spec).unwrap();
    assert_eq!(
        (splits.train.len(), splits.val.len(), splits.test.len()),
        (5000, 500, 1000)
    );
    let dir = tempfile::tempdir().unwrap();
    splits.save(dir.path()).unwrap();
    let back = SyntheticSplits::load(dir.path()).unwrap();
    assert_eq!(back.train.features, splits.train.features);
    assert_eq!(back.test.labels, splits.test.labels);
}

#[test]
fn empirical_statistics_track_the_generator() {
    let spec = SyntheticSpec::default_entangled(8);
    let (p, joint) = spec.implied_statistics();
    let splits = generate_synthetic(&spec).unwrap();
    let pri = CoOccurrencePriors::from_labels(&splits.train.labels, 0.0).unwrap();
    for i in 0..spec.k() {
        assert!((pri.p[i] - p[i]).abs() < 0.04, "p[{i}] {} vs {}", pri.p[i], p[i]);
        for j in 0..spec.k() {
            assert!((pri.joint[(i, j)] - joint[(i, j)]).abs() < 0.04);
        }
    }
}
