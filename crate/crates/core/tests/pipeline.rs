use sig_core::baselines::{train_encoder, EncoderConfig};
use sig_core::corpus::io::{read_corpus, write_corpus};
use sig_core::corpus::split::{read_splits, write_splits};
use sig_core::corpus::{make_cross_domain_splits, make_holdout_split, make_in_domain_split};
use sig_core::evaluation::evaluate_predictions;
use sig_core::synthetic::{generate_synthetic, SyntheticConfig};
use sig_core::Error;

#[test]
fn corpus_and_splits_round_trip_through_disk() {
    let corpus = generate_synthetic(&SyntheticConfig { novels: 3, quotes_per_novel: 12, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus).unwrap();
    assert_eq!(read_corpus(dir.path()).unwrap(), corpus);

    let protocols = [
        vec![make_in_domain_split(&corpus).unwrap()],
        vec![make_holdout_split(&corpus, 0.25, 1).unwrap()],
        make_cross_domain_splits(&corpus, 3, 1, 0).unwrap(),
    ];
    let path = dir.path().join("splits.jsonl");
    for splits in protocols {
        write_splits(&path, &splits).unwrap();
        assert_eq!(read_splits(&path).unwrap(), splits);
    }
}

#[test]
fn encoder_baseline_fits_synthetic_holdout() {
    let corpus = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let split = make_holdout_split(&corpus, 0.2, 0).unwrap();
    let config = EncoderConfig { max_source_len: 128, epochs: 20, ..Default::default() };
    let (model, _) = train_encoder(&corpus, &split, &config).unwrap();
    let predictions = model.predict_all(&corpus, &split.test_ids).unwrap();
    let report = evaluate_predictions(&predictions, &corpus, &split).unwrap();
    assert!(report.overall.accuracy() >= 0.95, "{:?}", report.overall);
}

#[test]
fn encoder_baseline_rejects_unseen_novels() {
    let corpus = generate_synthetic(&SyntheticConfig { novels: 2, quotes_per_novel: 6, ..Default::default() }).unwrap();
    let split = make_cross_domain_splits(&corpus, 1, 1, 0).unwrap().remove(0);
    match train_encoder(&corpus, &split, &EncoderConfig::default()) {
        Err(Error::UnseenSpeakers(_)) => {}
        Err(e) => panic!("unexpected error: {e}"),
        Ok(_) => panic!("cross-domain split accepted"),
    }
}
