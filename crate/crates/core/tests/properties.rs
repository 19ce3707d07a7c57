use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orefsdet::backbone::{level_sizes, FeatureExtractor};
use orefsdet::data::{self, resize_query, synth, synth_scene, Dataset, Density, Scene, SynthParams};
use orefsdet::eval::{compute_ap, iou_unchecked, nms, AreaRange, ScoredBox};
use orefsdet::proposal::{assign_targets, decode, LevelPrediction};
use orefsdet::sm_block::{branch_weights, encode_height, encode_width, fuse, SmBlock};
use orefsdet::tensor::{concat, no_grad};
use orefsdet::{RoiBox, Tensor};

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    Tensor::new(vals.to_vec(), shape).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn stride_contract(h in 64usize..=512, w in 64usize..=512, seed in 0u64..4) {
        let ext = FeatureExtractor::<f32>::new(16, &mut ChaCha8Rng::seed_from_u64(seed));
        let img = Tensor::<f32>::full(&[3, h, w], 0.5);
        let pyr = no_grad(|| ext.extract(&img)).unwrap();
        for (lvl, &(eh, ew)) in pyr.levels.iter().zip(&level_sizes(h, w)) {
            prop_assert_eq!(lvl.shape(), &[16, eh, ew][..]);
        }
    }
}

fn random_preds(h: usize, w: usize, seed: u64) -> Vec<LevelPrediction<f32>> {
    let mut s = seed | 1;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 40) as f32 / (1u64 << 24) as f32
    };
    level_sizes(h, w)
        .iter()
        .map(|&(lh, lw)| LevelPrediction {
            heatmap: Tensor::from_fn(&[1, lh, lw], |_| 8.0 * next() - 4.0),
            size: Tensor::from_fn(&[2, lh, lw], |_| 3.0 * next() - 1.0),
        })
        .collect()
}

#[test]
fn decode_never_exceeds_budget() {
    for seed in 0..1000u64 {
        let (h, w) = (64 + (seed as usize * 37) % 449, 64 + (seed as usize * 91) % 449);
        let props = decode(&random_preds(h, w, seed), (h, w), 256, 0.01);
        assert!(props.len() <= 256, "seed {seed}: {} proposals", props.len());
        assert!(props.windows(2).all(|p| p[0].p1 >= p[1].p1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn decode_inverts_assign(cells in prop::collection::vec((0usize..4, 0usize..4, 12.0f32..60.0, 12.0f32..60.0), 1..8)) {
        // One box per distinct 80×80 tile keeps centers well separated.
        let mut used = std::collections::HashSet::new();
        let gts: Vec<RoiBox> = cells
            .into_iter()
            .filter(|&(r, c, _, _)| used.insert((r, c)))
            .map(|(r, c, bw, bh)| {
                let (cx, cy) = (c as f32 * 80.0 + 40.0, r as f32 * 80.0 + 40.0);
                RoiBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
            })
            .collect();
        let size = (320, 320);
        let t = assign_targets(&gts, size).unwrap();
        let logit = |p: f32| {
            let p = p.clamp(1e-6, 1.0 - 1e-6) as f64;
            (p / (1.0 - p)).ln() as f32
        };
        let preds: Vec<LevelPrediction<f32>> = t
            .levels
            .iter()
            .map(|l| LevelPrediction {
                heatmap: Tensor::new(l.heatmap.iter().map(|&p| logit(p)).collect(), &[1, l.height, l.width]).unwrap(),
                size: Tensor::new(l.size.clone(), &[2, l.height, l.width]).unwrap(),
            })
            .collect();
        let props = decode(&preds, size, 256, 0.5);
        for g in &gts {
            let (gx, gy) = g.center();
            let hit = props.iter().any(|p| {
                let (px, py) = p.bbox.center();
                let stride = [8.0, 16.0, 32.0][p.level];
                (px - gx).abs() <= stride
                    && (py - gy).abs() <= stride
                    && (p.bbox.width() / g.width() - 1.0).abs() <= 0.1
                    && (p.bbox.height() / g.height() - 1.0).abs() <= 0.1
            });
            prop_assert!(hit, "no proposal recovers {:?}", g);
        }
    }

    #[test]
    fn softmax_slices_sum_to_one(v in values(24)) {
        let s = tensor(&[2, 3, 4], &v).softmax(1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let sum: f64 = (0..3).map(|b| s.data()[a * 12 + b * 4 + c]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concat_split_round_trip(v in values(30), cut in 1usize..5) {
        let t = tensor(&[5, 6], &v);
        let parts = t.split(0, &[cut, 5 - cut]).unwrap();
        prop_assert_eq!(concat(&parts, 0).unwrap().to_vec(), t.to_vec());
    }

    #[test]
    fn sm_weights_and_convexity(seed in 0u64..1000, xv in values(8 * 4 * 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = SmBlock::<f64>::new(8, 4, 2, &mut rng).unwrap();
        let x = tensor(&[8, 4, 4], &xv);
        let x_h = encode_height(&x, &block.w_h.tensor, 4).unwrap();
        let x_w = encode_width(&x, &block.w_w.tensor, 4).unwrap();
        let z = branch_weights(&x_h, &x_w, &block.r1.tensor, &block.r2.tensor).unwrap();
        for c in 0..8 {
            let (a, b) = (z.data()[c], z.data()[8 + c]);
            prop_assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
            prop_assert!((a + b - 1.0).abs() < 1e-6);
        }
        let f = fuse(&x_h, &x_w, &block.r1.tensor, &block.r2.tensor).unwrap();
        for ((&o, &h), &w) in f.data().iter().zip(x_h.data()).zip(x_w.data()) {
            prop_assert!(o >= h.min(w) - 1e-12 && o <= h.max(w) + 1e-12);
        }
        prop_assert_eq!(block.forward(&x).unwrap().shape().to_vec(), x.shape().to_vec());
    }

    #[test]
    fn nms_is_idempotent(raw in prop::collection::vec((0.0f32..200.0, 0.0f32..200.0, 5.0f32..80.0, 5.0f32..80.0, 0.0f32..1.0), 0..40)) {
        let boxes: Vec<RoiBox> = raw.iter().map(|&(x, y, w, h, _)| RoiBox::new(x, y, x + w, y + h)).collect();
        let scores: Vec<f32> = raw.iter().map(|r| r.4).collect();
        let keep = nms(&boxes, &scores, 0.5);
        let kb: Vec<RoiBox> = keep.iter().map(|&i| boxes[i]).collect();
        let ks: Vec<f32> = keep.iter().map(|&i| scores[i]).collect();
        let again = nms(&kb, &ks, 0.5);
        prop_assert_eq!(again, (0..kb.len()).collect::<Vec<_>>());
        prop_assert!(ks.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..kb.len() {
            for j in i + 1..kb.len() {
                prop_assert!(iou_unchecked(&kb[i], &kb[j]) <= 0.5);
            }
        }
    }

    #[test]
    fn ap_threshold_and_addition_monotone(
        gt_raw in prop::collection::vec((0.0f32..200.0, 0.0f32..200.0, 10.0f32..60.0, 10.0f32..60.0), 1..6),
        det_raw in prop::collection::vec((0.0f32..200.0, 0.0f32..200.0, 10.0f32..60.0, 10.0f32..60.0, 0.0f32..0.99), 0..8),
    ) {
        let gts = vec![gt_raw.iter().map(|&(x, y, w, h)| RoiBox::new(x, y, x + w, y + h)).collect::<Vec<_>>()];
        let dets = vec![det_raw.iter().map(|&(x, y, w, h, s)| ScoredBox { bbox: RoiBox::new(x, y, x + w, y + h), score: s }).collect::<Vec<_>>()];
        let ap = |d: &[Vec<ScoredBox>], t: f64| compute_ap(d, &gts, t, AreaRange::ALL).unwrap();
        let (a50, a75) = (ap(&dets, 0.5), ap(&dets, 0.75));
        prop_assert!(a50 >= a75 && a75 >= 0.0);

        // A top-scored exact copy of a gt that no detection matches at 0.5.
        let free = gts[0].iter().find(|g| !dets[0].iter().any(|d| iou_unchecked(&d.bbox, g) >= 0.5));
        if let Some(g) = free {
            let mut more = dets.clone();
            more[0].push(ScoredBox { bbox: *g, score: 1.0 });
            prop_assert!(ap(&more, 0.5) >= a50 - 1e-12);
        }
    }

    #[test]
    fn resize_round_trip_keeps_boxes(h in 32usize..400, w in 32usize..400, fx in 0.0f32..0.5, fy in 0.0f32..0.5, fw in 0.2f32..0.5, fh in 0.2f32..0.5) {
        let (wf, hf) = (w as f32, h as f32);
        let b = RoiBox::new(fx * wf, fy * hf, (fx + fw) * wf, (fy + fh) * hf);
        let scene = Scene { image: image::RgbImage::new(w as u32, h as u32), boxes: vec![b], classes: vec![synth::ORE], seed: 0 };
        let r = resize_query(&scene);
        let (rh, rw) = (r.height(), r.width());
        let mut sc = 320.0 / h.min(w) as f64;
        if h.max(w) as f64 * sc > 1000.0 {
            sc = 1000.0 / h.max(w) as f64;
        }
        prop_assert!((rw as f64 - w as f64 * sc).abs() <= 0.5 + 1e-9);
        prop_assert!((rh as f64 - h as f64 * sc).abs() <= 0.5 + 1e-9);
        let back = r.boxes[0].scale(wf / rw as f32, hf / rh as f32);
        prop_assert!(iou_unchecked(&back, &b) >= 0.99);
    }
}

#[test]
fn coco_export_ingest_identity() {
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams::new(Density::Dense, vec![synth::ORE, synth::RING, synth::TRIANGLE]);
    let ds = Dataset::from_scenes((0..6).map(|s| synth_scene(s, &p)).collect());
    data::write_dataset(&ds, dir.path()).unwrap();
    let back = data::ingest_coco(dir.path().join("annotations.json")).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.records.iter().zip(&back.records) {
        assert_eq!((a.id, &a.file_name, a.width, a.height), (b.id, &b.file_name, b.width, b.height));
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.ann_ids, b.ann_ids);
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert!((x.x1 - y.x1).abs() < 1e-4 && (x.y1 - y.y1).abs() < 1e-4);
            assert!((x.x2 - y.x2).abs() < 1e-4 && (x.y2 - y.y2).abs() < 1e-4);
        }
    }
    for i in 0..ds.len() {
        assert_eq!(*ds.image(i).unwrap(), *back.image(i).unwrap());
    }
    assert_eq!(data::to_coco_document(&back), data::to_coco_document(&ds));
}
