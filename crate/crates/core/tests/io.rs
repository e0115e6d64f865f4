use proptest::prelude::*;

use ran_core::data::{load_mnist_split, mnist_from_idx_bytes, Split};
use ran_core::error::{Error, IdxError, WeightsError};
use ran_core::kernels::RunningStats;
use ran_core::nn::ParamStore;
use ran_core::report::{dominates, pareto_front, parse_csv, to_csv, Method, ReportRow};
use ran_core::tensor::Tensor;
use ran_core::weights::{decode_weights, encode_weights, load_weights, save_weights};

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_files_are_validated() {
    let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 8) as u8).collect();
    let images = idx_images(2, 4, 4, &pixels);
    let ds = mnist_from_idx_bytes(&images, &idx_labels(&[3, 9]), Split::Train).unwrap();
    assert_eq!(ds.images.shape(), [2, 1, 4, 4]);
    assert_eq!(ds.images.data()[1], 8.0 / 255.0);

    let err = |images: &[u8], labels: &[u8]| match mnist_from_idx_bytes(images, labels, Split::Train) {
        Err(Error::Idx(e)) => e,
        other => panic!("expected an IDX error, got {other:?}"),
    };
    assert_eq!(err(&images, &idx_labels(&[1, 2, 3])), IdxError::CountMismatch { images: 2, labels: 3 });
    assert_eq!(err(&images, &idx_labels(&[1, 10])), IdxError::BadLabel { index: 1, label: 10 });
    assert!(matches!(err(&images[..images.len() - 1], &idx_labels(&[1, 2])), IdxError::Truncated { .. }));
    let mut long = images.clone();
    long.push(0);
    assert!(matches!(err(&long, &idx_labels(&[1, 2])), IdxError::TrailingBytes { .. }));
    assert!(matches!(err(&idx_labels(&[1, 2]), &idx_labels(&[1, 2])), IdxError::Magic { .. }));
}

#[test]
fn missing_split_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_mnist_split(dir.path(), Split::Test).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(format!("{e}").contains("t10k-images-idx3-ubyte"), "{e}");
}

fn store_strategy() -> impl Strategy<Value = ParamStore<f32>> {
    let tensor = prop::collection::vec(1..4usize, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>(), n).prop_map(move |data| Tensor::new(&shape, data).unwrap())
    });
    let stats = (prop::collection::vec(-1e3..1e3f32, 1..4), any::<u64>()).prop_map(|(mean, updates)| RunningStats {
        var: mean.iter().map(|m| m.abs()).collect(),
        mean,
        updates,
    });
    (
        prop::collection::btree_map("[a-z]{1,3}\\.[0-9]\\.(weight|bias)", tensor, 0..6),
        prop::collection::btree_map("enc\\.[0-9]", stats, 0..3),
    )
        .prop_map(|(params, stats)| {
            let mut store = ParamStore::new();
            params.into_iter().for_each(|(n, t)| store.insert(n, t));
            stats.into_iter().for_each(|(n, s)| store.insert_stats(n, s));
            store
        })
}

proptest! {
    #[test]
    fn weights_round_trip_bit_exactly(store in store_strategy()) {
        let bytes = encode_weights(&store).unwrap();
        let back: ParamStore<f32> = decode_weights(&bytes).unwrap();
        prop_assert_eq!(encode_weights(&back).unwrap(), bytes.clone());
        for (name, t) in store.params() {
            prop_assert_eq!(back.get(name).unwrap().to_le_bytes(), t.to_le_bytes());
        }
        let cut = bytes.len() / 2;
        prop_assert!(decode_weights::<f32>(&bytes[..cut]).is_err());
    }
}

#[test]
fn weight_file_errors() {
    let mut store = ParamStore::<f64>::new();
    store.insert("enc.0.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ranw");
    save_weights(&store, &path).unwrap();
    assert_eq!(load_weights::<f64>(&path).unwrap(), store);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 6;
    bytes[last] ^= 0x40;
    assert!(matches!(decode_weights::<f64>(&bytes), Err(Error::Weights(WeightsError::Crc { .. }))));
    assert!(matches!(decode_weights::<f64>(b"NOPE\x01\0\0\0"), Err(Error::Weights(_))));
    assert_eq!(load_weights::<f64>(dir.path().join("absent")).unwrap_err().exit_code(), 3);
}

fn row_strategy() -> impl Strategy<Value = ReportRow> {
    (0..4usize, prop::option::of(0.0..1.0f64), any::<u64>(), 0..20u32, 1..200u32, 0.0..1e4f64, any::<u64>()).prop_map(
        |(m, setting, seed, acc, mse, runtime_s, config_hash)| {
            let recon_mse = mse as f64 * 1e-3;
            ReportRow {
                method: Method::ALL[m],
                setting,
                seed,
                accuracy: acc as f64 / 20.0,
                recon_mse,
                ln_mse: recon_mse.ln(),
                runtime_s: (runtime_s * 1e3).round() / 1e3,
                config_hash,
            }
        },
    )
}

proptest! {
    #[test]
    fn front_is_exactly_the_undominated_rows(rows in prop::collection::vec(row_strategy(), 0..30)) {
        let front = pareto_front(&rows);
        for f in &front {
            prop_assert!(!rows.iter().any(|r| dominates(r, f)));
        }
        for r in rows.iter().filter(|r| !front.contains(r)) {
            prop_assert!(front.iter().any(|f| dominates(f, r)));
        }
        for a in &front {
            for b in &front {
                prop_assert!(!dominates(a, b));
            }
        }
    }

    #[test]
    fn csv_round_trips(rows in prop::collection::vec(row_strategy(), 0..10)) {
        let back = parse_csv(&to_csv(&rows)).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert!(a.same_numbers(b));
            prop_assert!((a.runtime_s - b.runtime_s).abs() < 1e-3);
        }
    }
}
