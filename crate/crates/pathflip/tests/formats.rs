use std::collections::BTreeMap;

use pathflip::formats::checkpoint::{self, Checkpoint};
use pathflip::formats::features::{self, FeatureCache, Sidecar};
use pathflip::formats::records::{JsonLines, MetricsRecord, ReportRecord};
use pathflip::formats::{corpus, heatmap, records, vocab, FormatError};
use pathflip_core::corpus::{generate_corpus, CorpusConfig};
use pathflip_core::grounding::RegionScoreMap;
use pathflip_core::pipeline::RunData;
use pathflip_core::tensor::Matrix;
use pathflip_core::text::Vocabulary;
use pathflip_core::train::{RunConfig, Trainer};
use pathflip_core::Error;
use proptest::prelude::*;
use tempfile::tempdir;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.corpus = CorpusConfig {
        num_pairs: 12,
        regions_per_slide: 4,
        patches_per_region: 4,
        raw_dim: 8,
        num_concepts: 6,
        concepts_per_slide: 2,
        noise: 0.3,
        seed: 3,
    };
    c.split = pathflip_core::train::SplitConfig {
        train: 0.5,
        val: 0.25,
        test: 0.25,
    };
    c.model.d = 8;
    c.model.d_dec = 8;
    c.model.n_queries = 2;
    c.model.qformer_blocks = 1;
    c.loss.k = 3;
    c.optim.batch_size = 4;
    c.optim.lr = 1e-2;
    c.instruct.batch_size = 4;
    c
}

#[test]
fn corpus_round_trips_exactly() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let c = generate_corpus(&small_config().corpus).unwrap();
    corpus::save(&path, &c).unwrap();
    let back = corpus::load(&path).unwrap();
    assert_eq!(back, c);
    let first = std::fs::read(&path).unwrap();
    corpus::save(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn corpus_record_fields() {
    let c = generate_corpus(&small_config().corpus).unwrap();
    let line = corpus::to_jsonl(&c).lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["caption", "grid", "instruction_records", "patches", "patches_per_region", "planted_map", "raw_dim", "slide_id"]
    );
    let planted: BTreeMap<usize, u32> = serde_json::from_value(v["planted_map"].clone()).unwrap();
    assert_eq!(planted, c.pairs[0].slide.planted_map());
}

#[test]
fn corpus_rejects_short_patch_block() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let c = generate_corpus(&small_config().corpus).unwrap();
    corpus::save(&path, &c).unwrap();
    let mut rec = corpus::pair_record(&c.pairs[0]);
    rec.patches = "AAAAAA==".into();
    std::fs::write(&path, serde_json::to_string(&rec).unwrap()).unwrap();
    let err = corpus::load(&path).unwrap_err();
    assert!(matches!(err, FormatError::Invalid { .. }), "{err}");
}

#[test]
fn feature_cache_layout_and_round_trip() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("s.pflc");
    let regions: Vec<Matrix<f32>> = (0..4)
        .map(|r| Matrix::from_vec(3, 2, (0..6).map(|i| (r * 6 + i) as f32 * 0.5 - 1.0).collect()))
        .collect();
    let cache = FeatureCache {
        sidecar: Sidecar {
            slide_id: "slide_00001".into(),
            grid: (2, 2),
        },
        regions,
    };
    features::save(&path, &cache).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"PFLC");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(&bytes[6..18], &[4, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
    assert_eq!(bytes.len(), 18 + 4 * 3 * 2 * 4);
    assert_eq!(&bytes[18..22], &(-1.0f32).to_le_bytes());
    assert_eq!(features::load(&path).unwrap(), cache);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(side["slide_id"], "slide_00001");

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(features::load(&path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, bad).unwrap();
    assert!(features::load(&path).is_err());
}

proptest! {
    #[test]
    fn feature_cache_decodes_what_it_encodes(
        (_n, m, d, bits) in (1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(n, m, d)| (Just(n), Just(m), Just(d), prop::collection::vec(any::<u32>(), n * m * d)))
    ) {
        let values: Vec<f32> = bits.iter().map(|b| f32::from_bits(b & 0xff7f_ffff)).collect();
        let regions: Vec<Matrix<f32>> = values.chunks(m * d).map(|c| Matrix::from_vec(m, d, c.to_vec())).collect();
        let bytes = features::encode(&regions);
        let back = features::decode(std::path::Path::new("x"), &bytes).unwrap();
        prop_assert_eq!(features::encode(&back), bytes);
        prop_assert_eq!(back, regions);
    }
}

#[test]
fn vocab_ids_follow_line_numbers() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = Vocabulary::from_tokens(["the", "slide", "shows", "."]);
    vocab::save(&path, &v).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "the\nslide\nshows\n.\n");
    let back = vocab::load(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.id("the"), 5);
    assert_eq!(back.id("."), 8);
    assert!(vocab::parse(&path, "a\nb\na\n").is_err());
    assert!(vocab::parse(&path, "a\n\nb\n").is_err());
}

fn trained(steps: u64) -> (RunConfig, RunData, Trainer) {
    let cfg = small_config();
    let c = generate_corpus(&cfg.corpus).unwrap();
    let rd = RunData::new(&cfg, &c).unwrap();
    let mut t = Trainer::new(cfg.clone(), rd.model_config(&cfg)).unwrap();
    t.train_until::<Error>(&rd.train, steps, |_, _| Ok(())).unwrap();
    (cfg, rd, t)
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempdir().unwrap();
    let (_, _, t) = trained(3);
    let ck = Checkpoint::of(&t, "abc");
    let p1 = dir.path().join("step_3.ckpt");
    checkpoint::save(&p1, &ck).unwrap();
    let loaded = checkpoint::load(&p1).unwrap();
    assert_eq!(loaded, ck);
    let p2 = dir.path().join("again.ckpt");
    checkpoint::save(&p2, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(checkpoint::file_name(3), "step_3.ckpt");
    assert_eq!(loaded.id(), "pretrain/step_3");
}

#[test]
fn resumed_checkpoint_matches_uninterrupted_run() {
    let dir = tempdir().unwrap();
    let (_, rd, mut a) = trained(2);
    let path = dir.path().join("step_2.ckpt");
    checkpoint::save(&path, &Checkpoint::of(&a, "h")).unwrap();
    let mut b = checkpoint::load(&path).unwrap().into_trainer().unwrap();
    a.train_until::<Error>(&rd.train, 5, |_, _| Ok(())).unwrap();
    b.train_until::<Error>(&rd.train, 5, |_, _| Ok(())).unwrap();
    assert_eq!(a.store, b.store);
    assert_eq!(a.optim, b.optim);
}

#[test]
fn checkpoint_rejects_corruption() {
    let (_, _, t) = trained(0);
    let bytes = checkpoint::encode(&Checkpoint::of(&t, "h"));
    let p = std::path::Path::new("x.ckpt");
    assert!(checkpoint::decode(p, &bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(p, &extra).is_err());
    let mut magic = bytes;
    magic[1] = 0;
    assert!(checkpoint::decode(p, &magic).is_err());
}

#[test]
fn attention_off_checkpoint_has_no_projection_weights() {
    let mut cfg = small_config().ablate("text_region_attention").unwrap();
    cfg.optim.steps = 0;
    let c = generate_corpus(&cfg.corpus).unwrap();
    let rd = RunData::new(&cfg, &c).unwrap();
    let t = Trainer::new(cfg.clone(), rd.model_config(&cfg)).unwrap();
    let back = checkpoint::decode(std::path::Path::new("x"), &checkpoint::encode(&Checkpoint::of(&t, "h"))).unwrap();
    assert!(back.params.entries().iter().all(|e| !e.name.starts_with("attn.")));
}

fn map(grid: (usize, usize), scores: Vec<f64>) -> RegionScoreMap {
    RegionScoreMap {
        slide_id: "s".into(),
        grid,
        scores,
    }
}

#[test]
fn heatmap_pixels() {
    assert_eq!(heatmap::to_pgm(&map((1, 1), vec![1.0])), b"P5\n1 1\n255\n\xff");
    let pgm = heatmap::to_pgm(&map((2, 2), vec![0.25; 4]));
    assert_eq!(&pgm[pgm.len() - 4..], &[64, 64, 64, 64]);
    assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
}

#[test]
fn heatmap_text_round_trips() {
    let dir = tempdir().unwrap();
    let m = map((3, 2), vec![0.1, 0.2, 0.05, 0.3, 0.15, 0.2]);
    heatmap::save(&dir.path().join("h"), &m).unwrap();
    let text = std::fs::read_to_string(dir.path().join("h.txt")).unwrap();
    assert!(text.starts_with("grid 3 2\n"));
    assert_eq!(text.lines().count(), 3);
    let (grid, scores) = heatmap::load_text(&dir.path().join("h.txt")).unwrap();
    assert_eq!(grid, (3, 2));
    for (a, b) in scores.iter().zip(&m.scores) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(dir.path().join("h.pgm").exists());
    assert!(heatmap::parse_text(std::path::Path::new("x"), "grid 2 2\n0.5 0.5\n").is_err());
}

#[test]
fn metrics_and_report_field_names() {
    let dir = tempdir().unwrap();
    let (_, rd, mut t) = trained(0);
    let path = dir.path().join("metrics.jsonl");
    let mut log = JsonLines::open(&path, true).unwrap();
    t.train_until::<Error>(&rd.train, 2, |_, r| {
        log.push(&MetricsRecord::from(r)).unwrap();
        Ok(())
    })
    .unwrap();
    log.flush().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for k in ["step", "L_region", "L_i2t", "L_t2i", "L_slide", "L_total", "eta", "lr"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    let back: Vec<MetricsRecord> = records::read_all(&path).unwrap();
    assert_eq!(back.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2]);

    let r = ReportRecord {
        metric: "itr_r@1".into(),
        value: 0.5,
        split: "test".into(),
        checkpoint: "pretrain/step_2".into(),
        config_hash: "ff".into(),
    };
    let v = serde_json::to_value(&r).unwrap();
    for k in ["metric", "value", "split", "checkpoint", "config_hash"] {
        assert!(v.get(k).is_some(), "{k}");
    }
}
