use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chunkft::autodiff::{backward_chunked, backward_dense, ActiveMask, SliceRef};
use chunkft::checks::random_stack;
use chunkft::model::{forward, Batch, LossHead, Model, ModelBuilder};
use chunkft::partition::{partition, CostPolicy};
use chunkft::tensor::{Matrix, TensorId};

fn loss(model: &Model, batch: &Batch) -> f64 {
    forward(model, batch).unwrap().0
}

/// Central differences with h = 1e-5 against every analytic parameter gradient.
fn assert_matches_finite_differences(model: &mut Model, batch: &Batch) {
    let analytic: Vec<Vec<f64>> = {
        let (_, tape) = forward(model, batch).unwrap();
        let d = backward_dense(&tape).unwrap();
        (0..model.params.len()).map(|i| d.get(TensorId(i)).as_slice().to_vec()).collect()
    };
    let h = 1e-5;
    for (t, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = model.params.get(TensorId(t)).unwrap().values.as_slice()[e];
            model.params.get_mut(TensorId(t)).unwrap().values.as_mut_slice()[e] = orig + h;
            let up = loss(model, batch);
            model.params.get_mut(TensorId(t)).unwrap().values.as_mut_slice()[e] = orig - h;
            let down = loss(model, batch);
            model.params.get_mut(TensorId(t)).unwrap().values.as_mut_slice()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad[e];
            let scale = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / scale <= 1e-5, "tensor {t} element {e}: analytic {a}, finite difference {fd}");
        }
    }
}

fn perturb(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        for v in p.values.as_mut_slice() {
            *v += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
    }
}

fn wave(rows: usize, cols: usize, a: f64, b: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| ((i / cols) as f64 * a + (i % cols) as f64 * b).sin()).collect()).unwrap()
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut model = ModelBuilder::new(1).layer_norm(8, 1e-5).unwrap().build(LossHead::Mse);
    perturb(&mut model, 2);
    let batch = Batch::dense(wave(4, 8, 0.7, 1.3), wave(4, 8, 0.2, 0.9));
    assert_matches_finite_differences(&mut model, &batch);
}

#[test]
fn linear_tanh_cross_entropy_gradients_match_finite_differences() {
    let mut model = Model::mlp(&[5, 6, 4], LossHead::CrossEntropy, 3).unwrap();
    let batch = Batch::labelled(wave(7, 5, 0.4, 1.1), vec![0, 1, 2, 3, 0, 2, 1]);
    assert_matches_finite_differences(&mut model, &batch);
}

#[test]
fn embedding_stack_gradients_match_finite_differences() {
    let mut b = ModelBuilder::new(4);
    b.embedding(9, 6).unwrap().layer_norm(6, 1e-5).unwrap().tanh().linear(6, 3, true).unwrap();
    let mut model = b.build(LossHead::CrossEntropy);
    perturb(&mut model, 5);
    let batch = Batch::tokens(vec![3, 0, 8, 3, 5], vec![2, 0, 1, 1, 2]);
    assert_matches_finite_differences(&mut model, &batch);
}

#[test]
fn relu_mse_gradients_match_finite_differences() {
    let mut b = ModelBuilder::new(6);
    b.linear(3, 7, true).unwrap().relu().linear(7, 2, false).unwrap();
    let mut model = b.build(LossHead::Mse);
    let batch = Batch::dense(wave(5, 3, 0.9, 0.5), wave(5, 2, 0.3, 0.8));
    assert_matches_finite_differences(&mut model, &batch);
}

// Seed-7 initialization of a 4-5-3 tanh MLP and its forward outputs, frozen from a NumPy
// evaluation of x W1^T + b1 -> tanh -> W2^T + b2 on the same inputs.
const W1: [f64; 20] = [
    -0.5588166335255751, -0.54217110025643, 0.33358152021384213, 0.37026698704299976, 0.1653552795354526,
    -0.22965702388516795, -0.6808609416307513, 0.5703879489811319, -0.2213291627949192, 0.8001216830850428,
    -0.4895099280793893, -0.18897804846329458, 0.0347009197181658, -0.3963157714694662, -0.11979257806441213,
    0.043335941806831535, -0.3217424664805699, -0.692766247172202, -0.2892147459263811, -0.4615519778036785,
];
const B2: [f64; 3] = [-0.014555241207597991, 0.05518930584739712, 0.0702169304398769];
const NUMPY_CE: f64 = 1.0662437685680484;
const NUMPY_MSE: f64 = 0.670580367928315;

fn inputs() -> Matrix {
    Matrix::from_vec(6, 4, (0..24).map(|k| (0.5 * (k / 4) as f64 + 0.25 * (k % 4) as f64).sin()).collect()).unwrap()
}

#[test]
fn forward_matches_frozen_numpy_oracle() {
    let ce_model = Model::mlp(&[4, 5, 3], LossHead::CrossEntropy, 7).unwrap();
    assert_eq!(ce_model.params.get(TensorId(0)).unwrap().values.as_slice(), &W1);
    assert_eq!(ce_model.params.get(TensorId(3)).unwrap().values.as_slice(), &B2);
    let ce = loss(&ce_model, &Batch::labelled(inputs(), vec![0, 1, 2, 2, 1, 0]));
    assert!((ce - NUMPY_CE).abs() / NUMPY_CE <= 1e-12, "{ce}");

    let mse_model = Model::mlp(&[4, 5, 3], LossHead::Mse, 7).unwrap();
    let target = Matrix::from_vec(6, 3, (0..18).map(|k| (0.3 * (k / 3) as f64 - 0.2 * (k % 3) as f64).cos()).collect()).unwrap();
    let mse = loss(&mse_model, &Batch::dense(inputs(), target));
    assert!((mse - NUMPY_MSE).abs() / NUMPY_MSE <= 1e-12, "{mse}");
}

#[test]
fn empty_mask_yields_no_gradients() {
    let model = Model::mlp(&[3, 4, 2], LossHead::CrossEntropy, 1).unwrap();
    let (_, tape) = forward(&model, &Batch::labelled(wave(2, 3, 0.1, 0.2), vec![0, 1])).unwrap();
    let bag = backward_chunked(&tape, &ActiveMask::empty()).unwrap();
    assert!(bag.is_empty());
    assert_eq!(bag.flops(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_slices_equal_dense_slices(seed in any::<u64>(), k_seed in any::<usize>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, batch) = random_stack(&mut rng).unwrap();
        let metas = model.params.metas();
        let rows: usize = metas.iter().map(|m| m.rows).sum();
        let plan = partition(&metas, 1 + k_seed % rows.min(10), &CostPolicy::default()).unwrap();
        let (_, tape) = forward(&model, &batch).unwrap();
        let dense = backward_dense(&tape).unwrap();
        let mut flops = 0;
        for chunk in &plan.chunks {
            let bag = backward_chunked(&tape, &chunk.mask()).unwrap();
            flops += bag.flops();
            prop_assert_eq!(bag.len(), chunk.slices.len());
            for (s, g) in bag.iter() {
                prop_assert_eq!(g, &dense.slice(s));
            }
        }
        prop_assert_eq!(flops, dense.flops());
    }

    #[test]
    fn single_row_masks_are_exact(seed in any::<u64>(), pick in any::<usize>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, batch) = random_stack(&mut rng).unwrap();
        let p = model.params.iter().nth(pick % model.params.len()).unwrap();
        let row = (pick / 7) % p.rows();
        let slice = SliceRef::new(p.id(), row..row + 1);
        let (_, tape) = forward(&model, &batch).unwrap();
        let bag = backward_chunked(&tape, &ActiveMask::new([slice]).unwrap()).unwrap();
        prop_assert_eq!(bag.get(&slice).unwrap(), &backward_dense(&tape).unwrap().slice(&slice));
    }
}
