//! A single bright spot, one optimizer step: the best-scoring gravity point
//! must sit in the feature cell that contains the spot. Catches any mix-up
//! between gravity-point order and head channel layout.

use gravitynet::anchors::{generate_gravity_points, hook_gravity_points, LesionAnnotation};
use gravitynet::config::{Profile, TrainConfig};
use gravitynet::data::Sample;
use gravitynet::model::optim::Adam;
use gravitynet::model::Model;
use gravitynet::raster::{Image, Mask};
use gravitynet::train::{batch_loss, batch_tensor};

fn spot_sample(x: usize, y: usize) -> Sample {
    let mut image = Image::filled(256, 256, 0.0);
    for dy in 0..3 {
        for dx in 0..3 {
            image.set(x + dx - 1, y + dy - 1, 1.0);
        }
    }
    Sample {
        image_id: "spot".into(),
        image,
        mask: Mask::ones(256, 256),
        lesions: vec![LesionAnnotation::new(x as f64, y as f64, 3.0, 3.0)],
    }
}

/// Cell of the best-scoring gravity point and of the point whose score rose
/// the most, after one step at the profile learning rate.
fn cells_after_one_step(x: usize, y: usize) -> (usize, usize) {
    let config = TrainConfig::for_profile(Profile::Desk);
    let grid = config.grid.grid_for(256, 256);
    let points = generate_gravity_points(&grid).unwrap();
    let model_config = config.model.model_config(&grid).unwrap();
    let mut model = Model::build_for_grid(&model_config, &grid, 11).unwrap();
    let sample = spot_sample(x, y);
    let target = hook_gravity_points(&points, &sample.lesions, grid.hooking_distance);
    assert!(target.positive_count() > 0);

    let batch = batch_tensor(&[&sample]).unwrap();
    let before = model.forward(&batch, &points).unwrap().remove(0).scores;
    let mut adam = Adam::new(config.initial_lr);
    model.zero_grad();
    let heads = model.forward_train(&batch).unwrap();
    let (_, grad) = batch_loss(&heads, &points, &[&target], &config.loss).unwrap();
    model.backward(grad);
    adam.update(&mut model.params_mut(), 1.0);
    let after = model.forward(&batch, &points).unwrap().remove(0).scores;

    let argmax = |v: &dyn Fn(usize) -> f64| (0..points.len()).max_by(|&a, &b| v(a).total_cmp(&v(b))).unwrap();
    let cell = |k: usize| points.slots[k] / points.per_grid_count;
    let best = argmax(&|k| after[k]);
    let rose = argmax(&|k| after[k] - before[k]);
    let p = points.points[best];
    assert_eq!(((p.y as usize) / 32, (p.x as usize) / 32), (cell(best) / 8, cell(best) % 8));
    (cell(best), cell(rose))
}

#[test]
fn best_score_lands_in_the_spot_cell() {
    // spots 15 px into a 32 px cell, so every hooked point shares that cell
    for (x, y) in [(143, 79), (47, 207), (239, 15), (15, 15)] {
        let expected = (y / 32) * 8 + x / 32;
        assert_eq!(cells_after_one_step(x, y), (expected, expected), "spot at ({x}, {y})");
    }
}
