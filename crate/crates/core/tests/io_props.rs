mod common;

use occkit::augment::ImageSet;
use occkit::det2occ::DetectionBox;
use occkit::head::{HeadConfig, HeadParams};
use occkit::io::{self, GridPayload, HEADER_LEN};
use occkit::{GridSpec, OccError, VoxelMask};
use proptest::prelude::*;
use rand::Rng;

fn random_spec(rng: &mut impl Rng) -> GridSpec {
    let dims = std::array::from_fn(|_| rng.gen_range(1..5));
    let origin = std::array::from_fn(|_| rng.gen_range(-50.0..50.0));
    GridSpec::new(dims, rng.gen_range(0.05..2.0), origin, rng.gen_range(2..20)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grids_round_trip_through_files(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = common::rng(seed);
        let spec = random_spec(&mut rng);
        let payloads = [
            GridPayload::Labels(common::random_labels(&mut rng, spec)),
            GridPayload::Probs(common::random_probs(&mut rng, spec)),
            GridPayload::Mask(common::random_mask(&mut rng, spec, 0.5)),
        ];
        for (i, payload) in payloads.iter().enumerate() {
            let path = dir.path().join(format!("{i}.occk"));
            io::write_grid(&path, payload).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            let back = io::read_grid(&path).unwrap();
            prop_assert_eq!(&back, payload);
            prop_assert_eq!(io::encode_grid(&back), bytes);
        }
    }

    #[test]
    fn boxes_round_trip(seed in any::<u64>(), n in 0usize..8) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = common::rng(seed);
        let spec = common::small_spec([8, 8, 4], 18);
        let boxes: Vec<DetectionBox> = (0..n)
            .map(|_| DetectionBox { score: rng.gen_range(0.0..=1.0), ..common::random_box(&mut rng, &spec) })
            .collect();
        let path = dir.path().join("boxes.jsonl");
        io::write_boxes(&path, &boxes).unwrap();
        prop_assert_eq!(io::read_boxes(&path, 18).unwrap(), boxes);
    }

    #[test]
    fn images_and_params_round_trip(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = common::rng(seed);
        let (n, h, w, ch) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..4));
        let imgs = ImageSet::new(n, h, w, ch, (0..n * h * w * ch).map(|_| rng.gen()).collect()).unwrap();
        let path = dir.path().join("imgs.occk");
        io::write_images(&path, &imgs).unwrap();
        prop_assert_eq!(io::read_images(&path).unwrap(), imgs);

        let params = HeadParams::random(&HeadConfig::default(), seed, 1.0).unwrap();
        let path = dir.path().join("params.occk");
        io::write_params(&path, &params).unwrap();
        prop_assert_eq!(io::read_params(&path).unwrap(), params);
    }

    #[test]
    fn corrupt_labels_are_rejected(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let spec = random_spec(&mut rng);
        let mut bytes = io::encode_grid(&common::random_labels(&mut rng, spec));
        let v = rng.gen_range(0..spec.num_voxels());
        bytes[HEADER_LEN + v] = rng.gen_range(spec.num_classes() as u8..=255);
        match io::decode_grid(&bytes) {
            Err(OccError::Validation { voxel, .. }) => prop_assert_eq!(voxel, v),
            other => prop_assert!(false, "expected validation error, got {:?}", other),
        }
    }

    #[test]
    fn truncation_is_a_length_error(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let spec = random_spec(&mut rng);
        let bytes = io::encode_grid(&common::random_probs(&mut rng, spec));
        let cut = rng.gen_range(HEADER_LEN..bytes.len());
        let is_length_error = matches!(io::decode_grid(&bytes[..cut]), Err(OccError::Length { .. }));
        prop_assert!(is_length_error);
    }
}

#[test]
fn failed_write_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dir").join("out.occk");
    let mask = VoxelMask::full(GridSpec::challenge());
    assert!(io::write_grid(&missing, &mask).is_err());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}
