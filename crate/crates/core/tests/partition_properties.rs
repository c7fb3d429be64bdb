use chunkft::partition::{max_row_cost, partition, CostPolicy};
use chunkft::tensor::{Precision, TensorId, TensorMeta};
use proptest::prelude::*;

fn metas_from(shapes: &[(usize, usize)]) -> Vec<TensorMeta> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(rows, cols))| TensorMeta {
            id: TensorId(i),
            name: format!("t{i}"),
            rows,
            cols,
            precision: Precision::Fp16,
            reg_order: i,
            trainable: true,
        })
        .collect()
}

fn shapes() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((1usize..40, 1usize..24), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn exact_cover_and_one_row_balance(shapes in shapes(), k_seed in 0usize..1000) {
        let metas = metas_from(&shapes);
        let rows: usize = shapes.iter().map(|s| s.0).sum();
        let k = 1 + k_seed % rows;
        let policy = CostPolicy::default();
        let plan = partition(&metas, k, &policy).unwrap();
        prop_assert_eq!(plan.k(), k);
        plan.validate(&metas).unwrap();
        let total: u64 = metas.iter().map(|m| m.elements() * 16).sum();
        prop_assert_eq!(plan.total_bytes(), total);
        let row = max_row_cost(&metas, &policy);
        prop_assert!(
            plan.max_chunk_bytes() - plan.min_chunk_bytes() <= row,
            "spread {} > row {} for costs {:?}", plan.max_chunk_bytes() - plan.min_chunk_bytes(), row, plan.byte_costs()
        );
        prop_assert!(plan.imbalance() <= row as f64);
    }

    #[test]
    fn partition_is_deterministic(shapes in shapes(), k_seed in 0usize..1000) {
        let metas = metas_from(&shapes);
        let rows: usize = shapes.iter().map(|s| s.0).sum();
        let k = 1 + k_seed % rows;
        let a = partition(&metas, k, &CostPolicy::default()).unwrap();
        let b = partition(&metas, k, &CostPolicy::default()).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn split_tensors_are_contiguous_and_ascending(shapes in shapes(), k_seed in 0usize..1000) {
        let metas = metas_from(&shapes);
        let rows: usize = shapes.iter().map(|s| s.0).sum();
        let k = 1 + k_seed % rows;
        let plan = partition(&metas, k, &CostPolicy::default()).unwrap();
        let mut next_row = vec![0usize; metas.len()];
        for chunk in &plan.chunks {
            for s in &chunk.slices {
                prop_assert_eq!(s.row_begin, next_row[s.tensor.0]);
                next_row[s.tensor.0] = s.row_end;
            }
        }
    }
}

#[test]
fn chunk_count_far_exceeds_layer_count() {
    // Four layers, 400 rows in total.
    let metas = metas_from(&[(100, 8), (100, 8), (100, 8), (100, 8)]);
    let plan = partition(&metas, 100, &CostPolicy::default()).unwrap();
    assert_eq!(plan.k(), 100);
    plan.validate(&metas).unwrap();
    assert!(plan.byte_costs().iter().all(|&c| c == 4 * 8 * 16));
}

#[test]
fn balance_tightens_as_rows_shrink() {
    // Same 1M-element budget cut at coarser and finer row granularity.
    let policy = CostPolicy::default();
    let k = 7;
    let mut prev = f64::INFINITY;
    for cols in [10_000usize, 1_000, 100, 10] {
        let rows = 1_000_000 / cols;
        let metas = metas_from(&[(rows / 2, cols), (rows / 4, cols), (rows / 4, cols)]);
        let plan = partition(&metas, k, &policy).unwrap();
        let mean = plan.total_bytes() as f64 / k as f64;
        let rel = (plan.max_chunk_bytes() as f64 - mean) / mean;
        assert!(rel <= prev + 1e-12);
        prev = rel;
    }
    assert!(prev < 1e-3);
}

#[test]
fn virtual_seven_billion_element_model_splits_into_fourteen_gb_chunks() {
    let metas = metas_from(&[(7_000_000, 1000)]);
    let plan = partition(&metas, 8, &CostPolicy::default()).unwrap();
    assert!(plan.byte_costs().iter().all(|&c| c == 14_000_000_000));
}
