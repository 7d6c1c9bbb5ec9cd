use geodyn::checkpoint::Checkpoint;
use geodyn::optim::ParamSet;
use geodyn::tensor::Tensor;
use proptest::prelude::*;

fn finite_f64() -> impl Strategy<Value = f64> {
    any::<u64>().prop_map(f64::from_bits).prop_filter("finite", |v| v.is_finite())
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #[test]
    fn f64_values_round_trip_bitwise(values in prop::collection::vec(finite_f64(), 1..64)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        Checkpoint::new("test", serde_json::json!({}), &params).save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path, "test").unwrap();
        let got = &back.parameters["w"].values;
        prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn f32_values_round_trip_bitwise(values in prop::collection::vec(finite_f32(), 1..64)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut params = ParamSet::<f32>::new();
        params.insert("w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        Checkpoint::new("test", serde_json::json!({}), &params).save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path, "test").unwrap();
        let got = &back.parameters["w"].values;
        prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn kind_dtype_and_names_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let mut params = ParamSet::<f32>::new();
    params.insert("w", Tensor::full(&[2, 2], 1.5f32)).unwrap();
    Checkpoint::new("stgcn", serde_json::json!({"epoch": 1}), &params).save(&path).unwrap();
    assert!(Checkpoint::<f32>::load(&path, "fusion").is_err());
    assert!(Checkpoint::<f64>::load(&path, "stgcn").is_err());

    let ck = Checkpoint::<f32>::load(&path, "stgcn").unwrap();
    let mut other = ParamSet::<f32>::new();
    other.insert("v", Tensor::zeros(&[2, 2])).unwrap();
    assert!(ck.restore_params(&mut other).is_err());
    let mut wrong_shape = ParamSet::<f32>::new();
    wrong_shape.insert("w", Tensor::zeros(&[4])).unwrap();
    assert!(ck.restore_params(&mut wrong_shape).is_err());
    let mut same = ParamSet::<f32>::new();
    same.insert("w", Tensor::zeros(&[2, 2])).unwrap();
    ck.restore_params(&mut same).unwrap();
    assert_eq!(same.value("w").unwrap().data(), &[1.5; 4]);

    std::fs::write(&path, "{\"kind\":\"stgcn\"}").unwrap();
    assert!(Checkpoint::<f32>::load(&path, "stgcn").is_err());
}
