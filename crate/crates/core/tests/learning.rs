//! Dataset generation, training and inference wired together on a tiny grid.

use lowalt_core::channel::{synthesize_csi, Noise};
use lowalt_core::imaging::{build_sensing_matrix, matched_filter, Storage};
use lowalt_core::learning::{
    infer, init_model, make_dataset, train, DatasetSpec, PriorKind, RefinerConfig, Setup, TrainConfig,
};
use lowalt_core::rng::seeded;
use lowalt_core::scene::{build_bs_layout, sample_scene, SystemConfig, VoxelGrid};

#[test]
fn train_then_infer_on_fresh_scenes() {
    let config = SystemConfig {
        upa_side: 2,
        n_subcarriers: 2,
        ..SystemConfig::default()
    };
    let grid = VoxelGrid::centered_slice(6, 6, 3.0, 40.0);
    let layout = build_bs_layout(&config).unwrap();
    let a = build_sensing_matrix(&grid, &config, &layout, Storage::Dense).unwrap();
    let setup = Setup {
        config: &config,
        grid: &grid,
        layout: &layout,
        matrix: &a,
    };
    let data = make_dataset(&setup, &DatasetSpec::new(40, 5), None).unwrap();
    assert_eq!(data.prior, PriorKind::MatchedFilter);
    assert!(data.scale > 0.0);

    let arch = RefinerConfig {
        stem_width: 8,
        block_widths: vec![8, 8],
        ..RefinerConfig::new(6, 6)
    };
    let mut model = init_model(arch, 1).unwrap();
    model.set_input_scale(data.scale);
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut epochs = 0;
    let out = train(&data.samples, model, &tc, &mut |_| epochs += 1).unwrap();
    assert_eq!(epochs, 4);
    assert_eq!(out.trace.len(), 4);
    assert!(out.best_epoch < 4);
    assert!(out.trace.iter().all(|r| r.validation.is_some() && r.train_loss.is_finite()));

    // A scene outside the training set, normalized by the stored scale.
    let mut rng = seeded(999);
    let scene = sample_scene(&grid, 1..=3, false, &mut rng).unwrap();
    let m = synthesize_csi(&scene, &config, &layout, Noise::On, &mut rng).unwrap();
    let prior = matched_filter(&a, &m.y).unwrap();
    let est = infer(&out.model, &prior).unwrap();
    assert_eq!(est.sigma_hat.len(), 36);
    assert!(est.sigma_hat.iter().all(|z| z.im == 0.0 && z.re >= 0.0 && z.re.is_finite()));
    assert_eq!(infer(&out.model, &prior).unwrap(), est);
}
