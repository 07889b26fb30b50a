use agridistill::config::SweepSection;
use agridistill::evaluate::BenchmarkResult;
use agridistill::network::{Mode, Model, ModelConfig};
use agridistill::report::{compose_panel, panel_tiles, sweep_plots};
use agridistill_core::augment::{preprocess_eval, AugmentConfig};
use agridistill_core::raster::{Mask, Raster, Sample};
use candle_core::{Device, Tensor};

#[test]
fn tiles_carry_unthresholded_probabilities() {
    let side = 32;
    let data: Vec<f32> = (0..side * side * 3).map(|i| (i % 17) as f32 / 16.0).collect();
    let sample = Sample::new(Raster::new(side, side, 3, data).unwrap(), Mask::zeros(side, side), "X").unwrap();
    let prep = AugmentConfig::identity((side, side));
    let a = Model::new(&ModelConfig::toy(side), 1, &Device::Cpu).unwrap();
    let b = Model::new(&ModelConfig::toy(side), 2, &Device::Cpu).unwrap();
    let tiles = panel_tiles(&sample, &[&a, &b], &prep).unwrap();
    assert_eq!(tiles.len(), 3);
    assert_eq!(tiles[0].channels(), 3);

    let prepared = preprocess_eval(&sample, &prep).unwrap();
    let x = Tensor::from_vec(prepared.image.to_planar(), (1, 3, side, side), &Device::Cpu).unwrap();
    let logits: Vec<f32> = a.forward(&x, &mut Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let mut fractional = 0;
    for (p, z) in tiles[1].data().iter().zip(&logits) {
        let s = 1.0 / (1.0 + (-z).exp());
        assert!((p - s).abs() < 1e-5, "{p} vs sigmoid {s}");
        fractional += usize::from(*p > 0.01 && *p < 0.99);
    }
    assert!(fractional > 0, "tile looks binarized");
    let panel = compose_panel(&tiles);
    assert_eq!((panel.width(), panel.height()), (3 * side + 4, side));
}

#[test]
fn sweep_axes_cover_the_grid() {
    let sweep = SweepSection { kd_weights: vec![0.01, 3.0], temperatures: vec![1.0, 2.0, 4.0] };
    let results: Vec<BenchmarkResult> = sweep
        .kd_weights
        .iter()
        .flat_map(|&l| sweep.temperatures.iter().map(move |&t| (l, t)))
        .map(|(l, t)| BenchmarkResult {
            method: SweepSection::label(l, t),
            target_domain: "A".into(),
            seed: 0,
            iou: l / 10.0 + t / 100.0,
        })
        .collect();
    let (by_weight, by_temperature) = sweep_plots(&sweep, &results).unwrap();
    assert_eq!(by_weight.x_ticks(), ["0.01", "3"]);
    assert_eq!(by_temperature.x_ticks(), ["1", "2", "4"]);
    assert_eq!(by_weight.series.len(), 3);
    assert_eq!(by_temperature.series.len(), 2);
    let svg = by_temperature.to_svg();
    assert!(svg.starts_with("<svg") && svg.matches("class=\"xtick\"").count() == 3);
}
