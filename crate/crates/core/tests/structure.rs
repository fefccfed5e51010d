mod common;

use candle_core::{DType, Tensor};
use msht::fgd::embed::{CLASS_TOKEN, POS_EMBED};
use msht::fgd::{FgdDecoder, GuidancePair, Mhsa, MultiHeadAttention, Scaling, VariantRegistry};
use msht::{Ctx, Model, ModelConfig, ParamStore, VARIANT_NAMES};
use proptest::prelude::*;

use common::*;

fn build(variant: &str, seed: u64) -> Model {
    VariantRegistry::builtin()
        .build(variant, &ModelConfig::tiny(), seed, DType::F64)
        .unwrap()
}

fn images(seed: u64) -> Tensor {
    tensor(randn_vec(&mut rng(seed), 2 * 3 * 64 * 64), &[2, 3, 64, 64])
}

fn zero_matching(model: &Model, keep: impl Fn(&str) -> bool) {
    let store = model.store();
    for name in store.names() {
        if keep(&name) {
            let t = store.var(&name).unwrap().as_tensor().zeros_like().unwrap();
            store.set(&name, &t).unwrap();
        }
    }
}

#[test]
fn decoder_with_zero_output_projections_is_identity() {
    let cfg = ModelConfig::tiny();
    let store = ParamStore::new(3, DType::F64);
    let dec = FgdDecoder::new(&store, "dec", &cfg).unwrap();
    for name in store.names() {
        if [".mhsa.out.", ".mhga.out.", ".ffn1.fc2.", ".ffn2.fc2."].iter().any(|p| name.contains(p)) {
            let t = store.var(&name).unwrap().as_tensor().zeros_like().unwrap();
            store.set(&name, &t).unwrap();
        }
    }
    let mut r = rng(1);
    let mk = |r: &mut rand_chacha::ChaCha8Rng| tensor(randn_vec(r, 2 * 5 * 64), &[2, 5, 64]);
    let (z, q, k) = (mk(&mut r), mk(&mut r), mk(&mut r));
    let out = dec.forward(&z, &GuidancePair { q, k, stage: 0 }, &Ctx::eval()).unwrap();
    assert_eq!(flat(&out), flat(&z));
}

#[test]
fn zeroed_decoders_pass_embedding_through_the_model() {
    let model = build("MSHT", 4);
    zero_matching(&model, |n| {
        n.starts_with("fgd.decoder") && [".mhsa.out.", ".mhga.out.", ".ffn1.fc2.", ".ffn2.fc2."].iter().any(|p| n.contains(p))
    });
    let (_, trace) = model.trace(&images(2), &Ctx::eval()).unwrap();
    for block in &trace.blocks {
        assert_eq!(flat(block), flat(&trace.embedded));
    }
}

#[test]
fn shared_embedding_tensors_appear_once() {
    for variant in ["MSHT", "Hybrid3", "SE_ATT"] {
        let names = build(variant, 0).store().names();
        assert_eq!(names.iter().filter(|n| n.as_str() == CLASS_TOKEN).count(), 1);
        assert_eq!(names.iter().filter(|n| n.as_str() == POS_EMBED).count(), 1);
        assert!(!names.iter().any(|n| n.contains("class_token") && n != CLASS_TOKEN));
    }
}

#[test]
fn zero_projections_make_main_and_guidance_sequences_equal() {
    let model = build("MSHT", 5);
    zero_matching(&model, |n| n.starts_with("fgd.embed.proj") || n.contains("_proj."));
    let (_, trace) = model.trace(&images(3), &Ctx::eval()).unwrap();
    let main = flat(&trace.embedded);
    assert!(main.iter().any(|v| *v != 0.0));
    assert_eq!(trace.guidance.len(), 4);
    for g in &trace.guidance {
        assert_eq!(flat(&g.q), main);
        assert_eq!(flat(&g.k), main);
    }
}

#[test]
fn no_att_matches_msht_parameters() {
    let a = build("MSHT", 0);
    let b = build("No_ATT", 0);
    assert_eq!(a.store().names(), b.store().names());
    assert_eq!(a.parameter_count(), b.parameter_count());
}

#[test]
fn variant_parameter_counts() {
    let cfg = ModelConfig::tiny();
    let d = cfg.fgd.token_dim;
    let count = |v: &str| build(v, 0).parameter_count();
    let msht = count("MSHT");
    assert!(count("SE_ATT") > msht);
    assert!(count("CBAM_ATT") > msht);
    assert!(count("Hybrid3") < msht);
    // the class token and its positional row both go
    assert_eq!(count("No_CLS_Token"), msht - 2 * d);
    assert_eq!(count("No_Pos_emb"), msht - cfg.seq_len() * d);
}

#[test]
fn every_variant_classifies_a_batch() {
    let x = images(9);
    for v in VARIANT_NAMES {
        let logits = build(v, 1).logits(&x, &Ctx::eval()).unwrap();
        assert_eq!(logits.dims(), [2, 2], "{v}");
        assert!(flat(&logits).iter().all(|l| l.is_finite()), "{v}");
    }
}

#[test]
fn same_seed_same_model_and_logits() {
    let x = images(6);
    let a = build("MSHT", 12);
    let b = build("MSHT", 12);
    let c = build("MSHT", 13);
    let la = flat(&a.logits(&x, &Ctx::eval()).unwrap());
    assert_eq!(la, flat(&b.logits(&x, &Ctx::eval()).unwrap()));
    assert_ne!(la, flat(&c.logits(&x, &Ctx::eval()).unwrap()));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let x = images(7);
    let model = build("CBAM_ATT", 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    model.checkpoint().unwrap().save(&path).unwrap();
    let archive = msht::ParameterArchive::load(&path).unwrap();
    let back = Model::from_checkpoint(&archive, DType::F64).unwrap();
    assert_eq!(back.variant(), "CBAM_ATT");
    assert_eq!(
        flat(&model.logits(&x, &Ctx::eval()).unwrap()),
        flat(&back.logits(&x, &Ctx::eval()).unwrap())
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn self_attention_is_permutation_equivariant(seed in 0u64..1000, n in 2usize..10, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let store = ParamStore::new(seed, DType::F64);
        let sa = Mhsa(MultiHeadAttention::new(&store, "sa", 16, heads, Scaling::PerHead, 0.0).unwrap());
        let mut r = rng(seed);
        let x = tensor(randn_vec(&mut r, (n + 1) * 16), &[1, n + 1, 16]);
        let mut order: Vec<u32> = (1..=n as u32).collect();
        order.rotate_left(seed as usize % n);
        order.insert(0, 0);
        let idx = Tensor::new(order.as_slice(), x.device()).unwrap();
        let y = sa.forward(&x, &Ctx::eval()).unwrap();
        let yp = sa.forward(&x.index_select(&idx, 1).unwrap(), &Ctx::eval()).unwrap();
        let want = flat(&y.index_select(&idx, 1).unwrap());
        prop_assert!(max_abs_diff(&flat(&yp), &want) < 1e-10);
        let cls_y: Vec<f64> = tokens(&y)[0][0].clone();
        let cls_yp: Vec<f64> = tokens(&yp)[0][0].clone();
        prop_assert!(max_abs_diff(&cls_y, &cls_yp) < 1e-10);
    }
}
