use std::path::Path;

use fabricnet::config::ScenarioConfig;
use fabricnet::flatfile::FlatFile;
use fabricnet::slicing::{train, transfer_init, QTable, SlicingEnv};
use fabricnet::Error;

fn load() -> ScenarioConfig {
    ScenarioConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/slicing.toml")).unwrap()
}

#[test]
fn short_training_improves_and_is_deterministic() {
    let cfg = load();
    let mut params = cfg.policies.slicing.clone().unwrap();
    params.episodes = 80;
    params.epsilon_decay_episodes = 60;
    let run = || {
        let mut env = SlicingEnv::new(&cfg.factory, cfg.network_spec(), &params, 2).unwrap();
        train(&mut env, true, &params, None, 2).unwrap()
    };
    let a = run();
    assert_eq!(a.curve, run().curve);
    let head: f64 = a.curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = a.curve[a.curve.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail > head, "{head} -> {tail}");
}

#[test]
fn q_table_round_trips_through_text() {
    let cfg = load();
    let mut params = cfg.policies.slicing.clone().unwrap();
    params.episodes = 5;
    params.epsilon_decay_episodes = 5;
    let mut env = SlicingEnv::new(&cfg.factory, cfg.network_spec(), &params, 1).unwrap();
    let q = train(&mut env, true, &params, None, 1).unwrap().q;
    let text = q.save().render();
    let back = QTable::load(&FlatFile::parse(&text).unwrap()).unwrap();
    assert_eq!(back, q);
}

#[test]
fn transfer_requires_matching_encoding() {
    let cfg = load();
    let params = cfg.policies.slicing.clone().unwrap();
    let env = SlicingEnv::new(&cfg.factory, cfg.network_spec(), &params, 1).unwrap();
    let q = QTable::new(env.actions().len());
    let sig = env.signature();
    assert!(transfer_init(&q, &sig, &sig).is_ok());
    let mut other = sig.clone();
    other.n_actions += 1;
    assert!(matches!(transfer_init(&q, &sig, &other), Err(Error::IncompatibleEncoding(_))));
}
