use persona_core::artifact::ModelArtifact;
use persona_core::config::Config;
use persona_core::events::{ingest, BuyerShopAggregate, Stratum};
use persona_core::pipeline::{self, TrainRun};
use persona_core::Error;

fn small() -> Config {
    let mut c = Config::desk();
    c.seed = 11;
    c.synth.shops = 4;
    c.synth.buyers_per_shop = 80;
    c.synth.n_products = 120;
    c.synth.d_emb = 16;
    c.features.d_pca = 8;
    c.model.hidden = vec![32, 16];
    c.codebook.size = 16;
    c.codebook.dim = 8;
    c.train.epochs = 4;
    c.train.batch_size = 64;
    c.kmeans.k = 16;
    c.kmeans.batch_size = 64;
    c
}

fn trained(cfg: &Config) -> (Vec<BuyerShopAggregate>, TrainRun) {
    let pop = pipeline::generate_population(cfg).unwrap();
    let rows = ingest(pop.events, &pop.catalog).unwrap();
    let run = pipeline::train_model(&rows, cfg).unwrap();
    (rows, run)
}

#[test]
fn artifact_round_trip_is_byte_identical() {
    let (rows, run) = trained(&small());
    let bytes = run.artifact.to_bytes().unwrap();
    let loaded = ModelArtifact::read(bytes.as_slice()).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(loaded.model, run.artifact.model);
    let train = run.train_rows(&rows);
    assert_eq!(
        pipeline::assign(&loaded, &train).unwrap(),
        pipeline::assign(&run.artifact, &train).unwrap()
    );
}

#[test]
fn assignment_replays_final_training_tokens() {
    let (rows, run) = trained(&small());
    assert!(run.diverged.is_none());
    let train = run.train_rows(&rows);
    assert!(train.iter().all(|a| a.stratum != Stratum::E));
    assert_eq!(pipeline::assign(&run.artifact, &train).unwrap(), run.train_assignments);
}

#[test]
fn damaged_artifacts_are_format_errors() {
    let (_, run) = trained(&small());
    let bytes = run.artifact.to_bytes().unwrap();
    for cut in [0, 4, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(ModelArtifact::read(&bytes[..cut]), Err(Error::Format(_))),
            "truncated at {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(ModelArtifact::read(bad.as_slice()), Err(Error::Format(_))));
}

#[test]
fn training_reports_are_reproducible() {
    let cfg = small();
    let (rows_a, a) = trained(&cfg);
    let (_, b) = trained(&cfg);
    assert_eq!(a.artifact.to_bytes().unwrap(), b.artifact.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    let train = a.train_rows(&rows_a);
    let r1 = pipeline::eval_clusters(&a.artifact, &train, &a.train_assignments, "vqvae", &cfg).unwrap();
    let r2 = pipeline::eval_clusters(&b.artifact, &train, &b.train_assignments, "vqvae", &cfg).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
}
