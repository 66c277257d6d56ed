use super::Dataset;
use crate::model::INPUT_SHAPE;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stacked images `[N, 1, 48, 48]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Sample indices grouped into batches; the last batch may be partial.
/// With `shuffle`, the order is a Fisher-Yates permutation drawn from it.
pub fn batch_indices(len: usize, batch_size: usize, shuffle: Option<&mut Rng>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Stacks the selected samples in the given order.
pub fn stack(dataset: &Dataset, indices: &[usize]) -> Batch {
    let per = INPUT_SHAPE.iter().product::<usize>();
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let shape = [indices.len(), INPUT_SHAPE[0], INPUT_SHAPE[1], INPUT_SHAPE[2]];
    Batch {
        images: Tensor::new(&shape, data).expect("samples are [1, 48, 48]"),
        labels,
    }
}

pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle: Option<&mut Rng>) -> Vec<Batch> {
    batch_indices(dataset.len(), batch_size, shuffle)
        .iter()
        .map(|idx| stack(dataset, idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_names, Sample, Split};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn dataset(labels: &[usize]) -> Dataset {
        let samples = labels
            .iter()
            .map(|&l| Sample::new(Tensor::full(&INPUT_SHAPE, l as f32 / 10.0), l, 7).unwrap())
            .collect();
        Dataset::new(samples, class_names(), Split::Train).unwrap()
    }

    #[test]
    fn unshuffled_batches_keep_order() {
        let ds = dataset(&[0, 1, 2, 3, 4]);
        let batches = make_batches(&ds, 2, None);
        let sizes: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let flat: Vec<usize> = batches.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(flat, vec![0, 1, 2, 3, 4]);
        assert_eq!(batches[0].images.shape(), &[2, 1, 48, 48]);
    }

    #[test]
    fn ten_by_four_partition() {
        let sizes: Vec<usize> = batch_indices(10, 4, None).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_permutation() {
        let a = batch_indices(50, 7, Some(&mut Rng::stream(4, "shuffle:epoch:0")));
        let b = batch_indices(50, 7, Some(&mut Rng::stream(4, "shuffle:epoch:0")));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn shuffled_batches_are_a_permutation(labels in proptest::collection::vec(0usize..7, 1..40), bs in 1usize..9, seed in any::<u64>()) {
            let ds = dataset(&labels);
            let batches = make_batches(&ds, bs, Some(&mut Rng::new(seed)));
            let mut got: Vec<usize> = batches.iter().flat_map(|b| b.labels.clone()).collect();
            let mut want = labels.clone();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
            prop_assert!(batches.iter().all(|b| b.labels.len() <= bs));
        }
    }
}
