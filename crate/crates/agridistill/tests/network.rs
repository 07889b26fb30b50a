use std::collections::HashMap;

use agridistill::checkpoint::{self, CheckpointMeta};
use agridistill::network::layers::resize_bilinear;
use agridistill::network::{Mode, Model, ModelConfig, NormVariant};
use agridistill::train::MethodConfig;
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(b: usize, side: usize) -> Tensor {
    let v: Vec<f32> = (0..b * 3 * side * side).map(|i| ((i * 104_729 % 97) as f32) / 48.0 - 1.0).collect();
    Tensor::from_vec(v, (b, 3, side, side), &Device::Cpu).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
}

fn zero(model: &Model, name: &str) {
    let v = model.param(name).unwrap_or_else(|| panic!("no parameter {name}"));
    v.set(&v.zeros_like().unwrap()).unwrap();
}

#[test]
fn zeroed_mid_branch_leaves_the_upsampled_deep_branch() {
    let model = Model::new(&ModelConfig::toy(64), 3, &Device::Cpu).unwrap();
    zero(&model, "head.low_classifier.weight");
    zero(&model, "head.low_classifier.bias");
    let x = images(2, 64);
    let pyramid = model.features(&x, &mut Mode::Eval).unwrap();
    let parts = model.head_parts(&pyramid, false, None).unwrap();
    let expected = resize_bilinear(&parts.deep_branch, 64, 64).unwrap();
    assert_eq!(max_diff(&parts.logits, &expected), 0.0);
    assert_eq!(max_diff(&model.forward(&x, &mut Mode::Eval).unwrap(), &parts.logits), 0.0);
}

#[test]
fn attention_scales_the_deep_features() {
    let model = Model::new(&ModelConfig::toy(32), 5, &Device::Cpu).unwrap();
    let pyramid = model.features(&images(2, 32), &mut Mode::Eval).unwrap();
    let parts = model.head_parts(&pyramid, false, None).unwrap();
    let (lo, hi): (f32, f32) =
        (parts.attention.min_all().unwrap().to_scalar().unwrap(), parts.attention.max_all().unwrap().to_scalar().unwrap());
    assert!(lo > 0.0 && hi < 1.0);
    let ones = parts.attention.ones_like().unwrap();
    let zeros = parts.attention.zeros_like().unwrap();
    let with_ones = model.head_parts(&pyramid, false, Some(&ones)).unwrap();
    let with_zeros = model.head_parts(&pyramid, false, Some(&zeros)).unwrap();
    // with zero attention only the classifier bias survives in the deep branch
    let bias = model.param("head.high_classifier.bias").unwrap().as_tensor().reshape((1, 1, 1, 1)).unwrap();
    assert!(max_diff(&with_zeros.deep_branch, &bias.broadcast_as(with_zeros.deep_branch.shape()).unwrap()) < 1e-6);
    assert!(max_diff(&with_ones.deep_branch, &parts.deep_branch) > 0.0);
}

#[test]
fn toy_pyramid_reductions() {
    let model = Model::new(&ModelConfig::toy(64), 0, &Device::Cpu).unwrap();
    let p = model.features(&images(1, 64), &mut Mode::Eval).unwrap();
    assert_eq!(&p.mid.dims()[2..], &[8, 8]);
    assert_eq!(&p.deep.dims()[2..], &[4, 4]);
}

#[test]
fn unistyle_method_whitens_exactly_the_listed_blocks() {
    let method = MethodConfig::Unistyle { blocks: vec![0, 1] };
    let cfg = method.model_config(&ModelConfig::toy(32));
    assert_eq!(cfg.norm_variant, NormVariant::Unistyle);
    let model = Model::new(&cfg, 1, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, trace) = model.forward_traced(&images(2, 32), &mut Mode::Train(&mut rng)).unwrap();
    assert_eq!(trace.whitened_blocks, vec![0, 1]);
    let (_, eval) = model.forward_traced(&images(2, 32), &mut Mode::Eval).unwrap();
    assert_eq!(eval.whitened_blocks, vec![0, 1]);
    assert!(trace.ibn_blocks.is_empty() && trace.padain_swaps.is_empty());
}

#[test]
fn ibn_method_uses_the_first_three_blocks() {
    let cfg = MethodConfig::by_name("ibn").unwrap().model_config(&ModelConfig::toy(32));
    let model = Model::new(&cfg, 1, &Device::Cpu).unwrap();
    let (_, trace) = model.forward_traced(&images(2, 32), &mut Mode::Eval).unwrap();
    assert_eq!(trace.ibn_blocks, vec![0, 1, 2]);
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy(32);
    let model = Model::new(&cfg, 12, &Device::Cpu).unwrap();
    let meta = CheckpointMeta {
        model: cfg,
        seed: 12,
        epoch: 3,
        val_iou: 0.5,
        method: "erm".into(),
        sources: vec!["A".into(), "B".into()],
    };
    let path = dir.path().join("sub/model.safetensors");
    checkpoint::save(&path, &model, &meta).unwrap();
    assert_eq!(checkpoint::read_meta(&path).unwrap(), meta);
    let (loaded, meta2) = checkpoint::load(&path, &Device::Cpu).unwrap();
    assert_eq!(meta2, meta);
    assert_eq!(loaded.checksum().unwrap(), model.checksum().unwrap());
    let x = images(2, 32);
    assert_eq!(
        max_diff(&loaded.forward(&x, &mut Mode::Eval).unwrap(), &model.forward(&x, &mut Mode::Eval).unwrap()),
        0.0
    );
}

#[test]
fn pretrained_backbone_weights_are_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let source = Model::new(&ModelConfig { pretrained: false, ..standard(64) }, 77, &Device::Cpu).unwrap();
    let tensors: HashMap<String, Tensor> = source.snapshot().unwrap().into_iter().collect();
    let path = dir.path().join("weights.safetensors");
    candle_core::safetensors::save(&tensors, &path).unwrap();
    let cfg = ModelConfig { pretrained: true, pretrained_weights: Some(path), ..standard(64) };
    let model = Model::new(&cfg, 1, &Device::Cpu).unwrap();
    let mut head_differs = false;
    for (name, t) in source.snapshot().unwrap() {
        let mine = model.param(&name).map(|v| v.as_tensor().clone());
        let Some(mine) = mine else { continue };
        let same = max_diff(&mine, &t) == 0.0;
        if name.starts_with("backbone.") {
            assert!(same, "{name} was not loaded");
        } else {
            // norm scales and biases start from constants, so only some head tensors differ
            head_differs |= !same;
        }
    }
    assert!(head_differs, "head parameters were overwritten too");
}

fn standard(side: usize) -> ModelConfig {
    ModelConfig { input_size: (side, side), ..ModelConfig::default() }
}
