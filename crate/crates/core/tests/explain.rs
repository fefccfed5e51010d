use candle_core::{DType, Tensor};
use msht::datapipe::{preprocess_eval, synth_generate, AugmentConfig};
use msht::explain::{grad_cam, grad_cam_image, overlay, save_png, CamOptions};
use msht::fgd::{AttentionRegistry, ForwardTrace, TokenHead, VariantDef, VariantRegistry};
use msht::params::Init;
use msht::{Ctx, Error, Model, ModelConfig, ParamStore, StageFeatures};

fn model(seed: u64) -> Model {
    VariantRegistry::builtin()
        .build("MSHT", &ModelConfig::tiny(), seed, DType::F32)
        .unwrap()
}

fn input(seed: u64) -> (Tensor, msht::datapipe::LabeledImage) {
    let img = synth_generate(&msht::datapipe::SynthSpec::new(64, 2, 8), seed).unwrap().remove(0);
    (preprocess_eval(&img.pixels, &AugmentConfig::for_edge(64)).unwrap(), img)
}

#[test]
fn heatmaps_are_normalized_at_input_resolution() {
    let m = model(1);
    let (x, _) = input(1);
    for stage in 0..4 {
        for class in 0..2 {
            let opts = CamOptions { stage: Some(stage), ..Default::default() };
            let h = grad_cam(&m, &x, class, &opts).unwrap();
            assert_eq!((h.height, h.width, h.values.len()), (64, 64, 64 * 64));
            assert_eq!(h.target_layer_tag, format!("stage{}", stage + 1));
            let s = h.statistics();
            assert!(s.min >= 0.0 && s.max <= 1.0, "{s:?}");
            assert!(s.max == 0.0 || (s.min == 0.0 && s.max == 1.0), "{s:?}");
        }
    }
}

#[test]
fn positive_logit_scale_leaves_heatmap_unchanged() {
    let m = model(2);
    let (x, _) = input(2);
    let base = grad_cam(&m, &x, 0, &CamOptions::default()).unwrap();
    for scale in [0.01, 3.0, 250.0] {
        let opts = CamOptions { logit_scale: scale, ..Default::default() };
        let h = grad_cam(&m, &x, 0, &opts).unwrap();
        let diff = base.values.iter().zip(&h.values).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(diff < 1e-4, "scale {scale}: {diff}");
    }
    let bad = CamOptions { logit_scale: -1.0, ..Default::default() };
    assert!(grad_cam(&m, &x, 0, &bad).is_err());
    assert!(grad_cam(&m, &x, 2, &CamOptions::default()).is_err());
}

#[test]
fn constant_logit_model_gives_zero_heatmap() {
    let m = model(3);
    let w = m.store().var("head.fc.weight").unwrap().as_tensor().zeros_like().unwrap();
    m.store().set("head.fc.weight", &w).unwrap();
    let (x, _) = input(3);
    let h = grad_cam(&m, &x, 0, &CamOptions::default()).unwrap();
    assert!(h.values.iter().all(|v| *v == 0.0));
}

#[test]
fn overlay_png_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let aug = AugmentConfig::for_edge(64);
    let mut files = Vec::new();
    for run in 0..2 {
        let m = model(4);
        let (_, img) = input(4);
        let h = grad_cam_image(&m, &img, &aug, 0, &CamOptions::default()).unwrap();
        let pixels = msht::datapipe::eval_image(&img.pixels, &aug).unwrap();
        let path = dir.path().join(format!("run{run}.png"));
        save_png(&overlay(&h, &pixels, 0.5).unwrap(), &path).unwrap();
        let side = dir.path().join(format!("run{run}.json"));
        h.write_sidecar(&side).unwrap();
        files.push((std::fs::read(path).unwrap(), std::fs::read_to_string(side).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let json: serde_json::Value = serde_json::from_str(&files[0].1).unwrap();
    for key in ["source_id", "target_class", "target_layer_tag", "heat_statistics"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[derive(Debug)]
struct ConstantHead {
    bias: Tensor,
}

impl TokenHead for ConstantHead {
    fn stages_used(&self) -> usize {
        4
    }

    fn trace(&self, stages: &StageFeatures, ctx: &Ctx) -> msht::Result<ForwardTrace> {
        let b = stages.maps[0].dim(0)?;
        let logits = ctx.p(&self.bias).unsqueeze(0)?.broadcast_as((b, 2))?.contiguous()?;
        Ok(ForwardTrace {
            embedded: logits.clone(),
            guidance: Vec::new(),
            blocks: Vec::new(),
            logits,
        })
    }
}

fn constant_head(s: &ParamStore, _: &ModelConfig, _: &AttentionRegistry) -> msht::Result<Box<dyn TokenHead>> {
    Ok(Box::new(ConstantHead {
        bias: s.get_or_init("head.bias", 2, Init::Zeros)?,
    }))
}

#[test]
fn head_that_ignores_features_reports_missing_gradient() {
    let mut registry = VariantRegistry::builtin();
    registry.register(VariantDef {
        name: "Constant",
        adapt: |_| {},
        head: constant_head,
    });
    let m = registry.build("Constant", &ModelConfig::tiny(), 0, DType::F32).unwrap();
    let (x, _) = input(5);
    let err = grad_cam(&m, &x, 0, &CamOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingGradient(_)), "{err}");
}
