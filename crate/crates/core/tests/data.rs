use airfl::data::{encode_cifar10_bin, encode_idx, parse_cifar10_bin, parse_idx, partition, synth_classification, write_idx, load_idx, Dataset, PartitionMode};
use airfl::rng::SimRng;
use proptest::prelude::*;
use rand::SeedableRng;
use std::collections::HashSet;

fn pixels(n: usize, dim: usize, classes: usize, shape: Vec<usize>) -> Dataset {
    let features = (0..n * dim).map(|i| (i % 256) as f32 / 255.0).collect();
    let labels = (0..n).map(|i| (i % classes) as u8).collect();
    Dataset::new("t", features, labels, shape, classes).unwrap()
}

#[test]
fn idx_file_roundtrip() {
    let ds = pixels(12, 9, 10, vec![3, 3]);
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx(&ds, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.shape, vec![3, 3]);
}

#[test]
fn corrupt_idx_is_rejected() {
    let ds = pixels(4, 4, 10, vec![2, 2]);
    let (img, lbl) = encode_idx(&ds).unwrap();
    assert!(parse_idx(&img[..img.len() - 1], &lbl, 10).is_err());
    let mut bad = img.clone();
    bad[2] = 0x0D;
    assert!(parse_idx(&bad, &lbl, 10).is_err());
    assert!(parse_idx(&img, &lbl[..lbl.len() - 1], 10).is_err());
}

#[test]
fn cifar_record_roundtrip() {
    let ds = pixels(3, 3 * 32 * 32, 10, vec![3, 32, 32]);
    let bytes = encode_cifar10_bin(&ds).unwrap();
    assert_eq!(bytes.len(), 3 * 3073);
    let back = parse_cifar10_bin(&bytes).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.features, ds.features);
    assert!(parse_cifar10_bin(&bytes[..100]).is_err());
}

#[test]
fn infeasible_partition_is_reported() {
    let ds = synth_classification(0, 10, 4, 50, 2.0).unwrap();
    let mut rng = SimRng::seed_from_u64(0);
    assert!(partition(&ds, 10, PartitionMode::Iid, Some(6), &mut rng).is_err());
    assert!(partition(&ds, 0, PartitionMode::Iid, None, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shards_are_disjoint(seed in any::<u64>(), k in 1usize..12, non_iid in any::<bool>(), lpd in 1usize..5) {
        let ds = synth_classification(seed, 10, 3, 600, 2.0).unwrap();
        let mode = if non_iid { PartitionMode::NonIid { labels_per_device: lpd } } else { PartitionMode::Iid };
        let size = 600 / (k * 2);
        let mut rng = SimRng::seed_from_u64(seed);
        let p = match partition(&ds, k, mode, Some(size), &mut rng) {
            Ok(p) => p,
            // A label set can run dry under heavy skew; that must be an error, not a panic.
            Err(_) => return Ok(()),
        };
        let mut seen = HashSet::new();
        for shard in &p.assignment {
            prop_assert_eq!(shard.len(), size);
            for &i in shard {
                prop_assert!(seen.insert(i));
            }
            if non_iid {
                let labels: HashSet<u8> = shard.iter().map(|&i| ds.labels[i]).collect();
                prop_assert!(labels.len() <= lpd);
            }
        }
    }

    #[test]
    fn synthetic_data_is_seeded(seed in any::<u64>()) {
        let a = synth_classification(seed, 4, 6, 40, 3.0).unwrap();
        let b = synth_classification(seed, 4, 6, 40, 3.0).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.label_histogram().iter().sum::<usize>(), 40);
    }
}
