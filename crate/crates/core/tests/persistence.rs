use aid_core::data::{load_aida, save_aida, AidaArray, ArrayData};
use num_complex::Complex64;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..5, 0..=4)
}

fn array() -> impl Strategy<Value = AidaArray> {
    dims().prop_flat_map(|dims| {
        let len = dims.iter().product::<u64>() as usize;
        let data = prop_oneof![
            prop::collection::vec((any::<f64>(), any::<f64>()), len).prop_map(|v| ArrayData::C128(
                v.into_iter()
                    .map(|(re, im)| Complex64::new(re, im))
                    .collect()
            )),
            prop::collection::vec(any::<f64>(), len).prop_map(ArrayData::F64),
            prop::collection::vec(any::<u8>(), len).prop_map(ArrayData::U8),
        ];
        data.prop_map(move |d| AidaArray::new(dims.clone(), d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bit_exact(a in array()) {
        let bytes = a.to_bytes();
        let back = AidaArray::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.dims, &a.dims);
        prop_assert_eq!(back.to_bytes(), bytes.clone());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.aida");
        save_aida(&path, &a).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
        prop_assert_eq!(load_aida(&path).unwrap().to_bytes(), a.to_bytes());
    }

    #[test]
    fn truncated_payloads_are_rejected(a in array(), cut in 1usize..16) {
        let bytes = a.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(AidaArray::from_bytes(&bytes[..keep]).is_err());
    }
}
