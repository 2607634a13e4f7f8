use fisher_vi::baselines::{read_samples_csv, write_samples_csv};
use fisher_vi::expfam::MomentRecord;
use fisher_vi::{Dataset, MomentParam};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-6..1e-6f64, Just(0.0), Just(f64::MIN_POSITIVE), Just(-1.0e300)]
}

proptest! {
    #[test]
    fn dataset_csv_is_bit_exact(n in 1usize..12, d in 1usize..5, vals in prop::collection::vec(finite(), 60), ys in prop::collection::vec(0u8..2, 12)) {
        let x = DMatrix::from_fn(n, d, |i, j| vals[i * d + j]);
        let data = Dataset::new(x, ys[..n].to_vec(), 5.0).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(csv::Reader::from_reader(buf.as_slice()), 5.0).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn samples_csv_is_bit_exact(rows in 1usize..20, d in 1usize..6, vals in prop::collection::vec(finite(), 120)) {
        let m = DMatrix::from_fn(rows, d, |i, j| vals[i * d + j]);
        let mut buf = Vec::new();
        write_samples_csv(&m, &mut buf).unwrap();
        prop_assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn moment_json_is_bit_exact(d in 1usize..6, vals in prop::collection::vec(-10.0..10.0f64, 40)) {
        let a = DMatrix::from_fn(d, d, |i, j| vals[i * d + j]);
        let sigma = &a * a.transpose() + DMatrix::identity(d, d);
        let p = MomentParam::new(DVector::from_fn(d, |i, _| vals[30 + i]), sigma).unwrap();
        let json = serde_json::to_string(&MomentRecord::from(&p)).unwrap();
        let back = MomentParam::try_from(serde_json::from_str::<MomentRecord>(&json).unwrap()).unwrap();
        prop_assert_eq!(back.mean(), p.mean());
        prop_assert_eq!(back.cov(), p.cov());
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let data = Dataset::new(DMatrix::from_row_slice(2, 2, &[0.1, -2.5, 1e-17, 3.0]), vec![1, 0], 5.0).unwrap();
    data.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    assert_eq!(Dataset::from_csv_path(&path, 5.0).unwrap(), data);
}
