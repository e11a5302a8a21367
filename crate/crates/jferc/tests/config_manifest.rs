use std::collections::BTreeMap;

use jferc::config::RunConfig;
use jferc::formats::{load_embeddings, read_vocab, save_embeddings, write_vocab};
use jferc::manifest::{parse_manifest, read_manifest, write_manifest, AudioSource, Split};
use jferc::synth::{synth_dataset, SynthOptions};
use jferc_core::fusion::Routing;
use jferc_core::model::FusionMode;
use jferc_core::text::Vocab;
use jferc_core::Tensor;

#[test]
fn defaults_follow_the_paper_and_the_decisions() {
    let c = RunConfig::default();
    assert_eq!((c.optim.batch_size, c.optim.lr), (32, 1e-4));
    assert_eq!((c.model.n_blocks, c.model.joint_len, c.frontend.mel_bins), (2, 4, 80));
    assert_eq!((c.model.model_dim, c.model.heads), (64, 4));
    assert_eq!((c.icl.tau, c.icl.lambda, c.icl.normalize, c.icl.raw_similarity), (0.07, 1.0, true, false));
    assert_eq!(c.fusion.routing, Routing::Fixed);
    c.validate().unwrap();
}

#[test]
fn dotted_overrides_reach_every_section() {
    let mut c = RunConfig::default();
    c.apply_overrides(&["icl.tau=0.2", "fusion.routing=literal", "fusion.mode=concat", "optim.epochs=3", "seed=9", "frontend.f_max=6000", "icl.raw_similarity=true"])
        .unwrap();
    assert_eq!(c.icl.tau, 0.2);
    assert_eq!(c.fusion.routing, Routing::Literal);
    assert_eq!(c.fusion.mode, FusionMode::Concat);
    assert_eq!((c.optim.epochs, c.seed, c.frontend.f_max), (3, 9, Some(6000.0)));
    assert!(!c.icl.normalizes());
    c.validate().unwrap();

    let err = c.set("icl.temperature", "1").unwrap_err().to_string();
    assert!(err.contains("unknown config key"), "{err}");
    assert!(c.set("optim.epochs", "many").is_err());
    assert!(c.apply_overrides(&["optim.epochs"]).is_err());
}

#[test]
fn validation_rejects_bad_settings() {
    let bad = |k: &str, v: &str| {
        let mut c = RunConfig::default();
        c.set(k, v).unwrap();
        c.validate().is_err()
    };
    assert!(bad("icl.tau", "0"));
    assert!(bad("icl.lambda", "-1"));
    assert!(bad("optim.lr", "0"));
    assert!(bad("optim.batch_size", "0"));
    assert!(bad("model.heads", "3"));
    assert!(bad("model.n_blocks", "0"));
    assert!(bad("classes", r#"["a"]"#));
    assert!(bad("classes", r#"["a","a"]"#));
    assert!(bad("data.split", "[0.5,0.1,0.1]"));
    assert!(bad("frontend.hop", "0"));
    let mut c = RunConfig::default();
    c.apply_overrides(&["ablation.no_jfm=true", "fusion.mode=concat"]).unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn ablation_switches_map_onto_the_network() {
    let mut c = RunConfig::default();
    c.apply_overrides(&["ablation.no_jfm=true", "ablation.no_joint=true", "ablation.no_icl=true"]).unwrap();
    let m = c.model_config(10, false);
    assert_eq!((m.mode, m.joint_len, c.icl_lambda()), (FusionMode::Late, 0, 0.0));
    assert_eq!(c.model_config(10, true).source_embed_dim, Some(768));
}

#[test]
fn json_round_trip_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.set("icl.tau", "0.1").unwrap();
    let p = dir.path().join("c.json");
    c.save(&p).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), c);

    let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "icl": {"lambda": 0.5}}"#).unwrap();
    assert_eq!((partial.seed, partial.icl.lambda, partial.icl.tau), (4, 0.5, 0.07));
    assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());

    let lines = c.provenance_lines();
    assert!(lines.iter().any(|l| l.starts_with("icl.tau = 0.1 [set]")));
    assert!(lines.iter().any(|l| l.starts_with("icl.lambda = 1.0 [default]") && l.contains("decision")));
    assert!(lines.iter().any(|l| l.starts_with("optim.batch_size = 32 [default]")));
    assert!(lines.iter().any(|l| l.starts_with("frontend.patch_freq = 16 [default]")));
    assert!(lines.iter().any(|l| l.starts_with("fusion.routing = \"fixed\"")));
}

#[test]
fn manifest_records_need_exactly_one_text_source() {
    let ok = r#"{"id":"a","text":"hi","audio":"a.wav","label":"happy","speaker":"s1"}
{"id":"b","embedding_ref":"emb.bin#x","audio":"b.wav","label":"sad","speaker":"s2","split":"test"}
{"id":"c","embedding_ref":"emb.bin","audio":"c.wav","label":"sad"}"#;
    let recs = parse_manifest(ok, "m").unwrap();
    assert_eq!(recs[1].split, Some(Split::Test));
    assert_eq!(recs[1].embedding_target(), Some(("emb.bin", "x")));
    assert_eq!(recs[2].embedding_target(), Some(("emb.bin", "c")));
    assert_eq!(recs[2].speaker, "");

    let both = r#"{"id":"a","text":"hi","embedding_ref":"e","audio":"a.wav","label":"x"}"#;
    let neither = r#"{"id":"a","audio":"a.wav","label":"x"}"#;
    let dup = "{\"id\":\"a\",\"text\":\"t\",\"audio\":\"a.wav\",\"label\":\"x\"}\n".repeat(2);
    for bad in [both, neither, dup.as_str(), "", "{\"id\":1}"] {
        assert!(parse_manifest(bad, "m").is_err(), "{bad}");
    }
    let err = parse_manifest(&format!("\n{neither}"), "m").unwrap_err();
    assert!(format!("{err:#}").contains("m:2"), "{err:#}");
}

#[test]
fn inline_audio_specs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let classes: Vec<String> = ["a", "b"].map(String::from).to_vec();
    let recs = synth_dataset(5, &[0.5, 0.5], &classes, 3, &SynthOptions::default()).unwrap();
    assert!(recs.iter().all(|r| matches!(r.audio, AudioSource::Synth(_))));
    let p = dir.path().join("m.jsonl");
    write_manifest(&p, &recs).unwrap();
    assert_eq!(read_manifest(&p).unwrap(), recs);
}

#[test]
fn embedding_container_and_vocab_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = BTreeMap::new();
    e.insert("u1".to_string(), Tensor::new(&[2, 3], vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE, 3.0, 1e300]).unwrap());
    e.insert("u2".to_string(), Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap());
    let p = dir.path().join("emb.bin");
    save_embeddings(&p, &e).unwrap();
    let back = load_embeddings(&p).unwrap();
    assert_eq!(back.len(), 2);
    for (k, v) in &e {
        let b: Vec<u64> = back[k].data().iter().map(|x| x.to_bits()).collect();
        let a: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert_eq!(std::fs::read(&p).unwrap()[..6], *b"JFERC1");

    let v = Vocab::build(["hello world, hello"]);
    let vp = dir.path().join("vocab.tsv");
    write_vocab(&vp, &v).unwrap();
    assert!(std::fs::read_to_string(&vp).unwrap().starts_with("[PAD]\t0\n[UNK]\t1\n[CLS]\t2\nhello\t3\n"));
    assert_eq!(read_vocab(&vp).unwrap(), v);
    std::fs::write(&vp, "[PAD]\t0\n[UNK]\t1\n").unwrap();
    assert!(read_vocab(&vp).is_err());
}
