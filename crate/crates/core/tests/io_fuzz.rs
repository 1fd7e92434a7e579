use croc_core::features::{CropGeometry, FeatureMatrix};
use croc_core::io::{
    decode_features, decode_mask, encode_features, encode_mask, format_geometry, parse_geometry, read_features,
    read_mask, write_features, write_mask, FEATURE_MAGIC, HEADER_LEN, MASK_MAGIC,
};
use croc_core::segeval::LabelMask;
use croc_core::Error;
use proptest::prelude::*;

fn feature_matrix() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), r * c)
            .prop_map(move |v| FeatureMatrix::from_shape_vec(r, c, v).unwrap())
    })
}

fn mask() -> impl Strategy<Value = LabelMask> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u16>(), h * w).prop_map(move |v| LabelMask::new(h, w, v).unwrap())
    })
}

/// A header: possibly wrong magic, version and dimensions, followed by a payload
/// whose length may or may not match.
fn header_bytes(magic: &'static [u8; 8], elem: usize) -> impl Strategy<Value = Vec<u8>> {
    (
        prop_oneof![3 => Just(magic.to_vec()), 1 => prop::collection::vec(any::<u8>(), 0..=8)],
        prop_oneof![3 => Just(1u32), 1 => any::<u32>()],
        0u32..6,
        0u32..6,
        -3i64..=3,
        any::<u64>(),
        0usize..=HEADER_LEN + 8,
    )
        .prop_map(move |(m, version, rows, cols, delta, fill, cut)| {
            let mut out = m;
            out.extend_from_slice(&version.to_le_bytes());
            out.extend_from_slice(&rows.to_le_bytes());
            out.extend_from_slice(&cols.to_le_bytes());
            let len = (rows as i64 * cols as i64 * elem as i64 + delta).max(0) as usize;
            // small finite values so that valid feature payloads decode
            out.extend((0..len).map(|i| {
                if i % 4 == 3 {
                    0x3f
                } else {
                    (fill >> (i % 8)) as u8 & 0x7f
                }
            }));
            if cut < HEADER_LEN + 8 && cut < out.len() && fill % 3 == 0 {
                out.truncate(cut);
            }
            out
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn feature_headers_decode_or_fail_cleanly(bytes in header_bytes(FEATURE_MAGIC, 4)) {
        match decode_features(&bytes) {
            Ok(m) => prop_assert_eq!(encode_features(&m).unwrap(), bytes),
            Err(e) => prop_assert!(matches!(
                e,
                Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Truncated { .. }
                    | Error::TrailingData { .. } | Error::Shape(_) | Error::Input(_)
            ), "{e}"),
        }
    }

    #[test]
    fn mask_headers_decode_or_fail_cleanly(bytes in header_bytes(MASK_MAGIC, 2)) {
        match decode_mask(&bytes) {
            Ok(m) => prop_assert_eq!(encode_mask(&m).unwrap(), bytes),
            Err(e) => prop_assert!(matches!(
                e,
                Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Truncated { .. }
                    | Error::TrailingData { .. } | Error::Shape(_) | Error::Input(_)
            ), "{e}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn features_round_trip_bit_exactly(m in feature_matrix()) {
        let bytes = encode_features(&m).unwrap();
        let back = decode_features(&bytes).unwrap();
        prop_assert!(m.view().iter().zip(back.view().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn masks_round_trip(m in mask()) {
        prop_assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn single_byte_corruption_is_detected(m in feature_matrix(), pos in 0usize..HEADER_LEN, flip in 1u8..=255) {
        let mut bytes = encode_features(&m).unwrap();
        bytes[pos] ^= flip;
        match decode_features(&bytes) {
            Err(Error::BadMagic { offset, .. }) => prop_assert!(pos < 8 && offset == 0),
            Err(Error::UnsupportedVersion { offset, .. }) => prop_assert!((8..12).contains(&pos) && offset == 8),
            Err(Error::Truncated { .. }) | Err(Error::TrailingData { .. }) => prop_assert!(pos >= 12),
            // a changed shape with the same element count
            Ok(other) => prop_assert!(pos >= 12 && other.dim() != m.dim()),
            Err(e) => prop_assert!(pos >= 12, "{e}"),
        }
    }

    #[test]
    fn geometry_round_trips(x0 in 0.0f64..100.0, y0 in 0.0f64..100.0, w in 1.0f64..100.0, h in 1.0f64..100.0,
                            n in 1usize..20, flip in any::<bool>()) {
        let g = CropGeometry::new(x0, y0, w, h, n, flip).unwrap();
        prop_assert_eq!(parse_geometry(&format_geometry(&g)).unwrap(), g);
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = FeatureMatrix::from_shape_vec(2, 3, vec![0.5, -1.25, f32::MIN_POSITIVE, 3.0, 1e30, -0.0]).unwrap();
    let path = dir.path().join("x.feat");
    write_features(&path, &m).unwrap();
    let back = read_features(&path).unwrap();
    assert!(m
        .view()
        .iter()
        .zip(back.view().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let mk = LabelMask::new(2, 2, vec![0, 1, 65535, 7]).unwrap();
    let path = dir.path().join("x.mask");
    write_mask(&path, &mk).unwrap();
    assert_eq!(read_mask(&path).unwrap(), mk);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}
