use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::cross_entropy;
use crate::model_zoo::{build_arch, ArchId};
use crate::nn::{backward, forward, sgd_step_in_place};

fn idx_bytes(magic_dims: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, magic_dims];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

fn labels_only(labels: &[usize]) -> Dataset {
    let n = labels.len();
    Dataset::new(Tensor::from_fn(&[n, 2], |i| i as f64), labels.to_vec(), Split::Train).unwrap()
}

#[test]
fn idx_header_dims() {
    let b = idx_bytes(3, &[2, 2, 2], &[0, 1, 2, 3, 4, 5, 6, 255]);
    let idx = parse_idx(&b, Path::new("x")).unwrap();
    assert_eq!(idx.dims, vec![2, 2, 2]);
    assert_eq!(idx.data[7], 255);
}

#[test]
fn idx_errors() {
    let p = Path::new("x");
    assert!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 1, 0], p).is_err());
    assert!(parse_idx(&idx_bytes(1, &[3], &[1, 2]), p).is_err());
    assert!(parse_idx(&[0, 0, 8], p).is_err());
}

#[test]
fn mnist_files_scale_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, b: Vec<u8>| fs::write(dir.path().join(name), b).unwrap();
    for prefix in ["train", "t10k"] {
        write(
            &format!("{prefix}-images-idx3-ubyte"),
            idx_bytes(3, &[2, 1, 2], &[0, 255, 51, 102]),
        );
        write(&format!("{prefix}-labels-idx1-ubyte"), idx_bytes(1, &[2], &[3, 9]));
    }
    let (train, test) = load_mnist(dir.path()).unwrap();
    assert_eq!(train.samples.shape(), &[2, 2]);
    assert_eq!(train.samples.data(), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(test.labels, vec![3, 9]);
    assert_eq!(test.split, Split::Test);

    write("train-labels-idx1-ubyte", idx_bytes(1, &[2], &[3, 10]));
    assert!(matches!(load_mnist(dir.path()), Err(Error::Format { .. })));
    write("train-labels-idx1-ubyte", idx_bytes(1, &[3], &[3, 1, 2]));
    assert!(load_mnist(dir.path()).is_err());
}

#[test]
fn cifar_record_parsing() {
    let mut rec = vec![7u8];
    rec.extend((0..3072).map(|i| (i % 256) as u8));
    let (px, labels) = parse_cifar_records(&rec, Path::new("x"), usize::MAX).unwrap();
    assert_eq!(labels, vec![7]);
    assert_eq!(px.len(), 3072);
    assert_eq!(px[255], 1.0);
    assert!(parse_cifar_records(&rec[..3000], Path::new("x"), usize::MAX).is_err());
    let two = [rec.clone(), rec].concat();
    assert_eq!(parse_cifar_records(&two, Path::new("x"), 1).unwrap().1.len(), 1);
}

#[test]
fn features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.fedf");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values = Tensor::from_fn(&[2, 1, 32, 32], |_| f64::from(rng.gen::<f32>()));
    let ds = Dataset::new(values, vec![4, 0], Split::Train).unwrap();
    write_features(&path, &ds).unwrap();
    let back = load_features(&path, Split::Train).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.sample_shape(), &[1, 32, 32]);

    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_features(&path, Split::Train), Err(Error::Format { .. })));
    bytes[..4].copy_from_slice(b"FEDF");
    bytes.pop();
    fs::write(&path, &bytes).unwrap();
    assert!(load_features(&path, Split::Train).is_err());
}

#[test]
fn synthetic_shape_and_determinism() {
    let make = |seed| make_synthetic(2, 50, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let d = make(3);
    assert_eq!(d.len(), 100);
    assert_eq!(d.class_counts()[..2], [50, 50]);
    assert_eq!(d, make(3));
    assert_ne!(d, make(4));
    assert!(make_synthetic(0, 5, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn synthetic_blobs_are_learnable_by_the_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = make_synthetic(10, 30, 784, 1.0, &mut rng).unwrap();
    let arch = build_arch(ArchId::MnistMlp);
    let mut w = arch.graph.init_params(&mut rng);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for step in 0..200 {
        if step % (data.len() / 30) == 0 {
            order.shuffle(&mut rng);
        }
        let start = (step * 30) % data.len();
        let (x, y) = data.batch(&order[start..start + 30]).unwrap();
        let tr = forward(&arch.graph, &w, &x).unwrap();
        let (_, dz) = cross_entropy(tr.output(), &y).unwrap();
        let (g, _) = backward(&arch.graph, &w, &tr, &dz).unwrap();
        sgd_step_in_place(&mut w, &g, 0.05).unwrap();
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&all).unwrap();
    let (_, hits) = crate::losses::cross_entropy_and_hits(forward(&arch.graph, &w, &x).unwrap().output(), &y).unwrap();
    assert!(hits as f64 / data.len() as f64 > 0.9, "{hits}");
}

#[test]
fn iid_partition_sizes() {
    let d = labels_only(&[0; 100]);
    let p = partition(&d, 10, PartitionMode::Iid, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.sizes(), vec![10; 10]);
    let d = labels_only(&[0; 23]);
    let p = partition(&d, 10, PartitionMode::Iid, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.sizes(), vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
    assert!(partition(&d, 24, PartitionMode::Iid, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn non_iid_assigns_class_to_client() {
    let labels: Vec<usize> = (0..57).map(|i| (i * 7) % 10).collect();
    let d = labels_only(&labels);
    let p = partition(&d, 10, PartitionMode::NonIid, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (k, shard) in p.shards.iter().enumerate() {
        assert!(shard.iter().all(|&i| labels[i] == k));
    }
    assert!(partition(&d, 5, PartitionMode::NonIid, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn stratified_validation_split() {
    let labels: Vec<usize> = (0..200).map(|i| if i < 150 { 0 } else { 1 + i % 3 }).collect();
    let d = labels_only(&labels);
    let (train, val) = split_validation(&d, 20, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!((train.len(), val.len()), (180, 20));
    assert_eq!(val.class_counts()[0], 15);
    assert_eq!(val.split, Split::Validation);
    let mut all: Vec<f64> = train.samples.data().iter().chain(val.samples.data()).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut want = d.samples.data().to_vec();
    want.sort_by(f64::total_cmp);
    assert_eq!(all, want);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(
            labels in proptest::collection::vec(0usize..10, 10..300),
            k in 1usize..12,
            non_iid in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let d = labels_only(&labels);
            let (mode, k) = if non_iid { (PartitionMode::NonIid, 10) } else { (PartitionMode::Iid, k.min(labels.len())) };
            let p = partition(&d, k, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut all: Vec<usize> = p.shards.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            if non_iid {
                for (c, s) in p.shards.iter().enumerate() {
                    prop_assert!(s.iter().all(|&i| labels[i] == c));
                }
            }
        }
    }
}
