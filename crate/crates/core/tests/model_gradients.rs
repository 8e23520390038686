use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualglance::attention::AggregationMode;
use dualglance::losses::{LossConfig, LossKind, Target};
use dualglance::model::{BackboneSpec, DualGlance, ModelSpec, PairInput, SampleInput, TrainStage};
use dualglance::types::{BoundingBox, SoftLabel};

fn spec() -> ModelSpec {
    ModelSpec {
        num_classes: 3,
        in_channels: 3,
        first_glance: BackboneSpec::toy(8, &[(3, 3)]),
        second_glance: BackboneSpec::toy(8, &[(3, 3)]),
        geometry_hidden: 4,
        feature_dim: 6,
        roi_grid: (2, 2),
    }
}

fn input(rng: &mut ChaCha8Rng) -> SampleInput {
    let mut noise = |shape: (usize, usize, usize)| Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let patches = [noise((3, 8, 8)), noise((3, 8, 8)), noise((3, 8, 8))];
    let image = noise((3, 16, 16));
    SampleInput {
        pair: PairInput { patches, geometry: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)) },
        image,
        regions: vec![
            BoundingBox::from([0.0, 0.0, 8.0, 8.0]),
            BoundingBox::from([4.0, 6.0, 16.0, 16.0]),
            BoundingBox::from([8.0, 0.0, 15.0, 9.0]),
        ],
    }
}

fn loss_at(model: &DualGlance, x: &SampleInput, loss: &LossConfig, target: Target<'_>) -> f64 {
    model.loss_and_grad(x, loss, target, TrainStage::Joint, AggregationMode::Attention, None).unwrap().0
}

/// Central differences on sampled entries of every tensor. Entries where the
/// one-sided differences disagree sit on a ReLU or pooling kink and are
/// skipped.
#[test]
fn joint_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut compared = 0;
    let mut skipped = 0;
    for instance in 0..4 {
        let mut model = DualGlance::new(spec(), instance).unwrap();
        // move fusion and gate away from their initial constants
        model.params.get_mut("fusion.w").mapv_inplace(|_| rng.gen_range(0.5..1.5));
        model.params.get_mut("second.gate").mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        let x = input(&mut rng);
        let soft = SoftLabel::from_probs(vec![0.6, 0.4, 0.0]);
        let (loss, target) = match instance % 2 {
            0 => (LossConfig::new(LossKind::CrossEntropy), Target::Hard(1)),
            _ => (LossConfig::new(LossKind::KlDivergence), Target::Soft(&soft)),
        };
        let (_, grads) =
            model.loss_and_grad(&x, &loss, target, TrainStage::Joint, AggregationMode::Attention, None).unwrap();
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let len = model.params.get(&name).len();
            for _ in 0..len.min(4) {
                let j = rng.gen_range(0..len);
                let base = model.params.get(&name).clone();
                let eval = |model: &mut DualGlance, delta: f64| {
                    let mut t: ArrayD<f64> = base.clone();
                    t.as_slice_mut().unwrap()[j] += delta;
                    *model.params.get_mut(&name) = t;
                    loss_at(model, &x, &loss, target)
                };
                let up = eval(&mut model, h);
                let down = eval(&mut model, -h);
                let mid = eval(&mut model, 0.0);
                let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
                if (fwd - bwd).abs() > 1e-4 * fwd.abs().max(bwd.abs()).max(1e-3) {
                    skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(&name).as_slice().unwrap()[j];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-5, "{name}[{j}]: analytic {analytic} numeric {numeric}");
                compared += 1;
            }
        }
    }
    assert!(compared > 100, "only {compared} entries compared ({skipped} skipped)");
}

#[test]
fn frozen_stage_matches_joint_on_context_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = DualGlance::new(spec(), 3).unwrap();
    let x = input(&mut rng);
    let loss = LossConfig::new(LossKind::Focal);
    let first = model.first_glance_forward(&x.pair).unwrap();
    let mode = AggregationMode::Attention;
    let (l2, g2) = model
        .loss_and_grad(&x, &loss, Target::Hard(0), TrainStage::SecondGlance, mode, Some((first.s1.view(), first.v_top.view())))
        .unwrap();
    let (lj, gj) = model.loss_and_grad(&x, &loss, Target::Hard(0), TrainStage::Joint, mode, None).unwrap();
    assert_eq!(l2, lj);
    for (name, g) in g2.iter() {
        if name.starts_with("first.") {
            assert!(g.iter().all(|&v| v == 0.0), "{name} has gradient in the frozen stage");
        } else {
            assert_eq!(g, gj.get(name), "{name}");
        }
    }
}
