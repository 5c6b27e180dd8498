//! Direct-arithmetic oracles for the worked examples.

mod common;

use common::phantom_set;
use icbir_core::checkpoint::Checkpoint;
use icbir_core::dataset::{LabeledVolume, SliceDataset, SliceSample};
use icbir_core::metrics::evaluate_run;
use icbir_core::nn::{AdamConfig, AdamState, DenseLayer, Init};
use icbir_core::probmap::{probability_map, slice_probability_field, Aggregation};
use icbir_core::protohead::{Orientation, PrototypeBank};
use icbir_core::retrieval::{
    block_prototypes, build_blocks, classify_block, index_gallery, query, query_blocks, BlockParams, DetectionConfig,
    GalleryEntry, GalleryIndex,
};
use icbir_core::rng::Rng;
use icbir_core::train::{init_prototypes, train, TrainConfig};
use icbir_core::vae::{accumulate_gradients, loss_with_noise, ModelGrads, VaeDims, VaeModel};
use icbir_core::Error;

fn names() -> Vec<String> {
    vec!["CN".into(), "AD".into()]
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn softmax64(s: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

#[test]
fn total_loss_is_ln2_at_the_symmetric_point() {
    let dims = VaeDims { side: 4, hidden: 3, latent: 2 };
    let mut model = VaeModel::with_head_init(dims, 1.0, 1.0, 0, Init::Zeros).unwrap();
    // zero decoder output layer: sigmoid(0) == 0.5 == x
    let out = model.layers()[4].clone();
    model.layers_mut()[4] = DenseLayer::from_parts(
        icbir_core::tensor::Tensor::zeros(out.weights().shape().to_vec()),
        icbir_core::tensor::Tensor::zeros(out.bias().shape().to_vec()),
        out.activation(),
    )
    .unwrap();
    let bank = PrototypeBank::new(4, 2, names(), vec![1.0; 3 * 4 * 2 * 2]).unwrap();
    let x = vec![0.5; 16];
    let s = SliceSample::new(&x, Orientation::Axial, 0, 1).unwrap();
    // mu = 0 makes the cosine degenerate; a zero-noise code along the
    // prototype diagonal keeps both similarities equal
    let eps = vec![0.0; 2];
    match loss_with_noise(&model, &bank, &s, &eps) {
        Err(Error::Degenerate(_)) => {}
        other => panic!("zero code must be degenerate, got {other:?}"),
    }
    let mut model2 = model.clone();
    model2.layers_mut()[1].bias_mut().copy_from_slice(&[1e-3, 1e-3]);
    let l = loss_with_noise(&model2, &bank, &s, &eps).unwrap();
    assert!(l.reconstruction.abs() < 1e-12);
    assert!(l.kl < 1e-5);
    assert!((l.total - std::f64::consts::LN_2).abs() < 1e-5, "{l:?}");
}

#[test]
fn overfits_one_slice_within_500_steps() {
    let dims = VaeDims { side: 16, hidden: 32, latent: 8 };
    let mut model = VaeModel::new(dims, 1e-3, 0.0, 1).unwrap();
    let mut bank = PrototypeBank::new(16, 8, names(), vec![1.0; 3 * 16 * 2 * 8]).unwrap();
    let vols = phantom_set(1, 1, 16, 3);
    let mut x = vec![0.0; 256];
    vols[0].0.volume.slice_into(Orientation::Axial, 8, &mut x);
    let sample = SliceSample::new(&x, Orientation::Axial, 8, 0).unwrap();
    let cfg = AdamConfig { lr: 3e-3, ..AdamConfig::default() };
    let mut states: Vec<(AdamState, AdamState)> = model
        .layers()
        .iter()
        .map(|l| (AdamState::new(cfg, l.weights().len()), AdamState::new(cfg, l.bias().len())))
        .collect();
    let zero_eps = vec![0.0; 8];
    for _ in 0..500 {
        let mut g = ModelGrads::zeros(&model, &bank);
        // bank unused with gamma = 0 but must exist
        accumulate_gradients(&model, &bank, &sample, &zero_eps, &mut g).unwrap();
        for (i, l) in model.layers_mut().iter_mut().enumerate() {
            states[i].0.update(l.weights_mut(), &g.layers[i].weights).unwrap();
            states[i].1.update(l.bias_mut(), &g.layers[i].bias).unwrap();
        }
        bank.refloor();
    }
    let xhat = model.decode(&model.encode(&x).unwrap().mu).unwrap();
    let mse: f64 = x.iter().zip(&xhat).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 256.0;
    assert!(mse < 1e-2, "mse {mse}");
}

#[test]
fn ten_slices_blocks_of_four_stride_three() {
    let codes: Vec<Vec<f32>> = (1..=10).map(|i| vec![i as f32]).collect();
    let blocks = build_blocks(&codes, BlockParams { n: 4, m: 3 }).unwrap();
    let got: Vec<Vec<f32>> = blocks.into_iter().map(|b| b.vector).collect();
    assert_eq!(got, vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 5.0, 6.0, 7.0], vec![7.0, 8.0, 9.0, 10.0]]);
}

#[test]
fn classify_block_matches_hand_arithmetic() {
    let mut rng = Rng::new(12);
    let (sec, lat, k) = (9, 3, 3);
    let protos: Vec<f32> = (0..3 * sec * k * lat).map(|_| rng.standard_normal() as f32).collect();
    let bank = PrototypeBank::new(sec, lat, vec!["a".into(), "b".into(), "c".into()], protos).unwrap();
    let params = BlockParams { n: 3, m: 2 };
    for o in Orientation::ALL {
        let codes: Vec<Vec<f32>> = (0..sec).map(|_| (0..lat).map(|_| rng.standard_normal() as f32).collect()).collect();
        for b in build_blocks(&codes, params).unwrap() {
            let u = block_prototypes(&bank, o, params, b.index).unwrap();
            let got = classify_block(&b.vector, &u, 1.0).unwrap();
            // concatenate by hand from the bank
            let s: Vec<f64> = (0..k)
                .map(|c| {
                    let cat: Vec<f32> = (b.index * 2..b.index * 2 + 3)
                        .flat_map(|i| bank.prototype(o, i, c).to_vec())
                        .collect();
                    cos64(&b.vector, &cat)
                })
                .collect();
            let p = softmax64(&s);
            for c in 0..k {
                assert!((got.similarities[c] as f64 - s[c]).abs() < 1e-5);
                assert!((got.probabilities[c] as f64 - p[c]).abs() < 1e-5);
            }
        }
    }
}

fn hand_index(entries: Vec<(&str, Vec<f32>)>) -> GalleryIndex {
    GalleryIndex {
        params: BlockParams { n: 1, m: 1 },
        fingerprint: "00".into(),
        n_section: 2,
        latent_dim: 2,
        run_config: serde_json::Value::Null,
        entries: entries
            .into_iter()
            .map(|(id, blocks)| GalleryEntry { id: id.into(), label: Some(0), blocks })
            .collect(),
    }
}

#[test]
fn two_entry_gallery_matches_hand_ranking() {
    // 3 orientations × 2 blocks × 2 values
    let q: Vec<f32> = [[1.0, 0.0], [0.0, 1.0]].iter().cycle().take(6).flatten().copied().collect();
    let a: Vec<f32> = [[1.0, 0.0], [1.0, 0.0]].iter().cycle().take(6).flatten().copied().collect();
    let b: Vec<f32> = [[1.0, 1.0], [0.0, 2.0]].iter().cycle().take(6).flatten().copied().collect();
    // a: (1 + 0)/2 = 0.5; b: (1/√2 + 1)/2
    let expected_b = (std::f64::consts::FRAC_1_SQRT_2 + 1.0) / 2.0;
    let forward = query_blocks(&hand_index(vec![("a", a.clone()), ("b", b.clone())]), &q, 2).unwrap();
    assert_eq!(forward.hits[0].id, "b");
    assert!((forward.hits[0].score - expected_b).abs() < 1e-6);
    assert!((forward.hits[1].score - 0.5).abs() < 1e-6);
    let reversed = query_blocks(&hand_index(vec![("b", b), ("a", a)]), &q, 2).unwrap();
    assert_eq!(forward, reversed);
    let truncated = query_blocks(&hand_index(vec![("a", q.clone())]), &q, 5).unwrap();
    assert!(truncated.truncated && truncated.hits.len() == 1);
}

fn small_trained(seed: u64) -> (Checkpoint, Vec<LabeledVolume>) {
    let vols: Vec<LabeledVolume> = phantom_set(3, 2, 16, 40 + seed).into_iter().map(|(v, _)| v).collect();
    let ds = SliceDataset::new(vols.clone(), names()).unwrap();
    let mut model = VaeModel::new(VaeDims { side: 16, hidden: 16, latent: 4 }, 1e-3, 1.0, seed).unwrap();
    let mut bank = init_prototypes(&model, &ds).unwrap();
    let cfg = TrainConfig { epochs: 1, batch: 32, seed, ..TrainConfig::default() };
    train(&mut model, &mut bank, &ds, &cfg).unwrap();
    (Checkpoint::new(model, bank, seed).unwrap(), vols)
}

#[test]
fn self_query_scores_one_and_ignores_insertion_order() {
    let (ck, vols) = small_trained(1);
    let params = BlockParams { n: 4, m: 4 };
    let index = index_gallery(&ck, &vols, params).unwrap();
    let hits = query(&index, &ck, &vols[2].volume, 1).unwrap();
    assert_eq!(hits.hits[0].id, vols[2].id);
    assert!((hits.hits[0].score - 1.0).abs() < 1e-6);

    let mut rev = vols.clone();
    rev.reverse();
    let index2 = index_gallery(&ck, &rev, params).unwrap();
    assert_eq!(query(&index, &ck, &vols[0].volume, 6).unwrap(), query(&index2, &ck, &vols[0].volume, 6).unwrap());

    let mut dup = vols.clone();
    dup.push(vols[0].clone());
    assert!(matches!(index_gallery(&ck, &dup, params), Err(Error::Index(_))));
}

#[test]
fn probability_field_matches_direct_arithmetic() {
    let (ck, vols) = small_trained(2);
    let v = &vols[1].volume;
    let mut rng = Rng::new(5);
    for o in Orientation::ALL {
        let field = slice_probability_field(&ck.model, &ck.bank, v, o).unwrap();
        let i = rng.below(16) as usize;
        let mut x = vec![0.0; 256];
        v.slice_into(o, i, &mut x);
        let z = ck.model.encode(&x).unwrap().mu;
        let s: Vec<f64> = (0..2).map(|k| cos64(&z, ck.bank.prototype(o, i, k))).collect();
        let p = softmax64(&s);
        let voxel = v.plane_voxel(o, i, 3, 11);
        for k in 0..2 {
            assert!((field.values[k * 4096 + voxel] as f64 - p[k]).abs() < 1e-5);
        }
    }
    let map = probability_map(&ck.model, &ck.bank, v, Aggregation::Mean).unwrap();
    let max = map.class_values(1).unwrap().iter().cloned().fold(0.0f32, f32::max);
    assert_eq!(map.highlight(1, (max + 1e-3).min(1.0)).unwrap().iter().filter(|&&h| h).count(), 0);
    assert_eq!(map.centroid(1, (max + 1e-3).min(1.0)).unwrap(), None);
    let again = probability_map(&ck.model, &ck.bank, v, Aggregation::Mean).unwrap();
    assert_eq!(map, again);
}

#[test]
fn zero_batches_leave_the_model_unchanged() {
    let vols: Vec<LabeledVolume> = phantom_set(1, 2, 8, 0).into_iter().map(|(v, _)| v).collect();
    let ds = SliceDataset::new(vols, names()).unwrap();
    let cfg = TrainConfig { epochs: 1, max_batches_per_epoch: Some(0), ..TrainConfig::default() };
    let mut model = VaeModel::new(VaeDims { side: 8, hidden: 4, latent: 2 }, cfg.beta, cfg.gamma, 0).unwrap();
    let mut bank = init_prototypes(&model, &ds).unwrap();
    let (m0, b0) = (model.clone(), bank.clone());
    train(&mut model, &mut bank, &ds, &cfg).unwrap();
    assert_eq!(model, m0);
    assert_eq!(bank, b0);
    let empty = SliceDataset::new(Vec::new(), names());
    assert!(empty.is_err() || train(&mut model, &mut bank, &empty.unwrap(), &cfg).is_err());
}

#[test]
fn evaluation_ignores_test_order() {
    let (ck, vols) = small_trained(3);
    let index = index_gallery(&ck, &vols[..4], BlockParams { n: 4, m: 4 }).unwrap();
    let det = DetectionConfig::uniform(2, 0.5, 1);
    let a = evaluate_run(&ck, &index, &vols[4..], &det).unwrap();
    let mut rev = vols[4..].to_vec();
    rev.reverse();
    let b = evaluate_run(&ck, &index, &rev, &det).unwrap();
    assert_eq!(a, b);
    assert!(a.warnings.is_empty());
    let leaky = evaluate_run(&ck, &index, &vols[..4], &det).unwrap();
    assert_eq!(leaky.retrieval.macro_f1, 1.0);
    assert!(!leaky.warnings.is_empty());
}
