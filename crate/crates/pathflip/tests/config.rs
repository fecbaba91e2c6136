use pathflip::cli::ConfigArgs;
use pathflip::config::{config_hash, resolve, to_toml, ConfigError, ConfigSource};
use pathflip_core::train::RunConfig;
use tempfile::tempdir;

fn with(overrides: &[(&str, &str)]) -> Result<RunConfig, ConfigError> {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    resolve(&ConfigSource {
        overrides: &o,
        ..Default::default()
    })
}

#[test]
fn defaults_are_desk_preset() {
    let c = with(&[]).unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!((c.model.d, c.model.n_queries, c.optim.batch_size, c.loss.k), (32, 4, 16, 8));
    let p = resolve(&ConfigSource {
        preset: Some("paper"),
        ..Default::default()
    })
    .unwrap();
    assert_eq!((p.model.n_queries, p.optim.batch_size), (8, 64));
    assert!((p.loss.tau - 0.1).abs() < 1e-15);
    assert!((p.loss.eta_init - (1.0f64 / 0.07).ln()).abs() < 1e-12);
}

#[test]
fn dotted_overrides_set_fields() {
    let c = with(&[("optim.lr", "1e-3"), ("loss.k", "4"), ("ablation.use_slide_qformer", "false"), ("optim.weight_decay", "0")]).unwrap();
    assert_eq!(c.optim.lr, 1e-3);
    assert_eq!(c.loss.k, 4);
    assert!(!c.ablation.use_slide_qformer);
    assert_eq!(c.optim.weight_decay, 0.0);
}

#[test]
fn bad_overrides_are_rejected() {
    assert!(matches!(with(&[("optim.lrr", "1")]), Err(ConfigError::UnknownKey(_))));
    assert!(matches!(with(&[("nope.lr", "1")]), Err(ConfigError::UnknownKey(_))));
    assert!(matches!(with(&[("optim", "1")]), Err(ConfigError::Override { .. })));
    assert!(matches!(with(&[("loss.k", "many")]), Err(ConfigError::Override { .. })));
    assert!(matches!(with(&[("loss.k", "0")]), Err(ConfigError::Core(_))));
}

#[test]
fn file_then_overrides_then_flags() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 5\n[optim]\nlr = 0.002\nsteps = 10\n").unwrap();
    let o = vec![("optim.steps".to_string(), "20".to_string())];
    let ablate = vec!["region_qformer".to_string()];
    let c = resolve(&ConfigSource {
        file: Some(&path),
        overrides: &o,
        seed: Some(9),
        ablate: &ablate,
        ..Default::default()
    })
    .unwrap();
    assert_eq!((c.seed, c.optim.lr, c.optim.steps), (9, 0.002, 20));
    assert!(!c.ablation.use_region_qformer);

    std::fs::write(&path, "[optim]\nlearning_rate = 1\n").unwrap();
    let err = resolve(&ConfigSource {
        file: Some(&path),
        ..Default::default()
    })
    .unwrap_err();
    assert!(err.to_string().contains("optim.learning_rate"), "{err}");
}

#[test]
fn unknown_ablation_flag_errors() {
    let ablate = vec!["decoder".to_string()];
    assert!(resolve(&ConfigSource {
        ablate: &ablate,
        ..Default::default()
    })
    .is_err());
}

#[test]
fn toml_round_trips_and_hash_tracks_every_field() {
    let base = RunConfig::default();
    let text = to_toml(&base);
    let back: RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, base);
    assert_eq!(config_hash(&base), config_hash(&back));
    assert_eq!(config_hash(&base).len(), 64);

    let table: toml::Table = text.parse().unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for (section, v) in &table {
        let fields: Vec<(String, toml::Value)> = match v {
            toml::Value::Table(t) => t.iter().map(|(k, v)| (format!("{section}.{k}"), v.clone())).collect(),
            other => vec![(section.clone(), other.clone())],
        };
        for (key, value) in fields {
            let changed = match value {
                toml::Value::Integer(i) => (i + 1).to_string(),
                toml::Value::Float(f) => format!("{:e}", f * 0.5 + 0.125),
                toml::Value::Boolean(b) => (!b).to_string(),
                other => panic!("unexpected {other:?}"),
            };
            let o = vec![(key.clone(), changed)];
            let c = resolve(&ConfigSource {
                overrides: &o,
                ..Default::default()
            });
            let Ok(c) = c else { continue };
            let h = config_hash(&c);
            assert_ne!(h, config_hash(&base), "{key}");
            assert!(seen.insert(h), "{key}");
        }
    }
    assert!(seen.len() > 25, "{}", seen.len());
}

#[test]
fn cli_override_pairs() {
    let args = ConfigArgs {
        overrides: ["--optim.lr", "0.01", "--loss.k=3"].map(String::from).to_vec(),
        ..Default::default()
    };
    assert_eq!(
        args.override_pairs().unwrap(),
        vec![("optim.lr".to_string(), "0.01".to_string()), ("loss.k".to_string(), "3".to_string())]
    );
    let bad = ConfigArgs {
        overrides: vec!["--optim.lr".into()],
        ..Default::default()
    };
    assert!(bad.override_pairs().is_err());
}
