//! Library results against independent reference computations.

use pifs_core::data::{generate_dataset, LabelMask, LabeledImage, SegDataset, SyntheticSpec};
use pifs_core::metrics::{harmonic_mean, ConfusionAccumulator};
use pifs_core::nn::{ModelConfig, NormLayer, NormMode, SegModel};
use pifs_core::protocol::{filter_base_dataset, sample_fsl_dataset, train, TrainJob};
use pifs_core::protolearn::{build_teacher, imprint, map_prototype, mean_entropy, pd_loss, DistillVariant, LossConfig};
use pifs_core::rng::{rng_for, Rng};
use pifs_core::tensor::{Graph, NormSpec, Tensor};
use rand::Rng as _;

fn uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn small_synth() -> SyntheticSpec {
    SyntheticSpec { height: 16, width: 16, ..SyntheticSpec::default() }
}

fn small_model(classes: Vec<u8>, seed: u64) -> SegModel {
    let cfg = ModelConfig { channels: vec![3, 6, 5], ..ModelConfig::default() };
    SegModel::new(&cfg, classes, &mut rng_for(seed, &[7]))
}

/// Masked average pooling spelled out pixel by pixel.
fn map_oracle(ds: &SegDataset, class: u8, model: &SegModel) -> Vec<f64> {
    let d = model.extractor.feature_dim();
    let mut total = vec![0.0; d];
    let mut images = 0.0;
    for it in ds.iter() {
        let (h, w) = (it.mask.height(), it.mask.width());
        let mut pixels = 0.0;
        let mut acc = vec![0.0; d];
        let feats = model.extractor.clone().feature_extract(&it.image, false).unwrap();
        for y in 0..h {
            for x in 0..w {
                if it.mask.get(y, x) != class {
                    continue;
                }
                let f = &feats.data()[(y * w + x) * d..(y * w + x + 1) * d];
                let mut sq = 0.0;
                for v in f {
                    sq += v * v;
                }
                let norm = f64::sqrt(sq);
                for k in 0..d {
                    acc[k] += f[k] / norm;
                }
                pixels += 1.0;
            }
        }
        if pixels > 0.0 {
            for k in 0..d {
                total[k] += acc[k] / pixels;
            }
            images += 1.0;
        }
    }
    total.iter().map(|t| t / images).collect()
}

fn random_dataset(rng: &mut Rng) -> SegDataset {
    let n = rng.random_range(1..=5);
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let mut items: Vec<LabeledImage> = (0..n)
        .map(|i| {
            let labels = (0..h * w).map(|_| rng.random_range(0..3u8)).collect();
            LabeledImage { id: i as u64, image: uniform(rng, vec![3, h, w], 0.0, 1.0), mask: LabelMask::new(h, w, labels).unwrap() }
        })
        .collect();
    items[0].mask.labels_mut()[0] = 1;
    SegDataset::new(items)
}

pub fn map_oracle_check() -> String {
    for seed in 0..100 {
        let mut rng = rng_for(seed, &[11]);
        let ds = random_dataset(&mut rng);
        let model = small_model(vec![0, 2], seed);
        let got = map_prototype(&ds, 1, &model.extractor).unwrap();
        assert_eq!(got, map_oracle(&ds, 1, &model), "seed {seed}");
    }
    "100 datasets bit-identical".into()
}

#[test]
fn map_prototype_matches_pixel_loop_bit_for_bit() {
    map_oracle_check();
}

fn scores(model: &SegModel, image: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let out = model.forward_images(&mut g, &[image], false, false).unwrap();
    g.tensor(out.scores)
}

pub fn imprint_preservation_check() -> String {
    let spec = small_synth();
    let probe = generate_dataset(&spec, 1000, 50, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    let support = generate_dataset(&spec, 0, 10, &[1, 2]).unwrap();
    let model = small_model(vec![0, 3, 4, 5, 6, 7, 8], 3);
    let imprinted = imprint(&model, &support, &[2, 1]).unwrap();
    assert_eq!(imprinted.classes(), &[0, 3, 4, 5, 6, 7, 8, 1, 2]);
    assert_eq!(imprinted.extractor, model.extractor);
    for it in probe.iter() {
        let before = scores(&model, &it.image);
        let after = scores(&imprinted, &it.image);
        let (c0, c1) = (model.classes().len(), imprinted.classes().len());
        for (row_b, row_a) in before.data().chunks(c0).zip(after.data().chunks(c1)) {
            assert_eq!(row_b, &row_a[..c0]);
        }
    }
    format!("{} probe images, old scores bit-identical", probe.len())
}

#[test]
fn imprinting_leaves_old_scores_bit_identical() {
    imprint_preservation_check();
}

#[test]
fn teacher_is_isolated_from_student_training() {
    let spec = small_synth();
    let support = generate_dataset(&spec, 0, 2, &[1, 3]).unwrap();
    let prev = small_model(vec![0, 3, 4], 5);
    let prev_copy = prev.clone();
    let teacher = build_teacher(&prev, &support, &[1]).unwrap();
    let batch = pifs_core::nn::stack_images(&[&support.items()[0].image]).unwrap();
    let before = teacher.outputs(&batch).unwrap();
    let mut student = imprint(&prev, &support, &[1]).unwrap();
    student.set_norm_mode(NormMode::BatchRenorm);
    student.freeze_norm_stats();
    let job = TrainJob {
        dataset: &support,
        iters: 5,
        lr: 0.05,
        batch_size: 2,
        flip: true,
        momentum: 0.9,
        weight_decay: 1e-4,
        loss: LossConfig { lambda: 10.0, variant: DistillVariant::Pd },
        teacher: Some(&teacher),
    };
    train(&mut student, &job, &mut rng_for(0, &[1])).unwrap();
    assert_ne!(student.extractor, prev.extractor);
    assert_eq!(prev, prev_copy);
    let after = teacher.outputs(&batch).unwrap();
    assert_eq!(before.probs, after.probs);
    assert_eq!(before.features, after.features);
}

pub fn confusion_oracle_check() -> String {
    let mut rng = rng_for(4, &[]);
    for _ in 0..50 {
        let n = 4u8;
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..n)).collect();
        let gt: Vec<u8> = (0..64).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..n) }).collect();
        let mut acc = ConfusionAccumulator::new(n as usize);
        acc.update_default(&pred, &gt).unwrap();
        let iou = acc.iou_per_class();
        let mut present = Vec::new();
        for c in 0..n {
            let valid = |i: &usize| gt[*i] != 255;
            let inter = (0..64).filter(valid).filter(|&i| pred[i] == c && gt[i] == c).count();
            let union = (0..64).filter(valid).filter(|&i| pred[i] == c || gt[i] == c).count();
            let want = (union > 0).then(|| inter as f64 / union as f64);
            assert_eq!(iou[c as usize], want);
            if let Some(v) = want {
                present.push(v);
            }
        }
        let all: Vec<u8> = (0..n).collect();
        assert_eq!(acc.miou(&all).unwrap(), present.iter().sum::<f64>() / present.len() as f64);
    }
    assert!((28.4..=28.6).contains(&harmonic_mean(60.9, 18.6)));
    format!("hm(60.9, 18.6) = {:.3}, 50 mask pairs exact", harmonic_mean(60.9, 18.6))
}

#[test]
fn confusion_matches_set_counting() {
    confusion_oracle_check();
}

#[test]
fn base_filter_matches_pixel_scan() {
    let pool = generate_dataset(&small_synth(), 0, 80, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    let kept = filter_base_dataset(&pool, &[1, 2]).unwrap();
    let want: Vec<u64> = pool.iter().filter(|it| it.mask.labels().iter().all(|&l| l != 1 && l != 2)).map(|it| it.id).collect();
    assert_eq!(kept.iter().map(|it| it.id).collect::<Vec<_>>(), want);
}

#[test]
fn few_shot_sampling_is_uniform_over_eligible_images() {
    let pool = generate_dataset(&small_synth(), 0, 60, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    let eligible: Vec<u64> = pool.with_class(3).map(|it| it.id).collect();
    let k = eligible.len();
    assert!(k >= 5);
    let draws = 200 * k;
    let mut counts = vec![0usize; k];
    for s in 0..draws {
        let ds = sample_fsl_dataset(&pool, 3, 2, &mut rng_for(s as u64, &[3])).unwrap();
        let ids: Vec<u64> = ds.iter().map(|it| it.id).collect();
        assert_ne!(ids[0], ids[1]);
        for id in ids {
            counts[eligible.iter().position(|&e| e == id).expect("eligible")] += 1;
        }
    }
    let expected = (2 * draws) as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with k - 1 degrees of freedom, upper bound
    // via the Wilson–Hilferty approximation.
    let dof = (k - 1) as f64;
    let z = 3.09;
    let bound = dof * (1.0 - 2.0 / (9.0 * dof) + z * (2.0 / (9.0 * dof)).sqrt()).powi(3);
    assert!(chi2 < bound, "chi2 {chi2} over {bound} for {k} images");
    assert!(sample_fsl_dataset(&pool, 3, k + 1, &mut rng_for(0, &[])).is_err());
}

pub fn renorm_identity_check() -> String {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = rng_for(seed, &[21]);
        let c = 3;
        let z = uniform(&mut rng, vec![4, c, 2, 3], -2.0, 3.0);
        let gamma = uniform(&mut rng, vec![c], 0.5, 1.5);
        let beta = uniform(&mut rng, vec![c], -0.5, 0.5);
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let std: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let w = uniform(&mut rng, vec![4, c, 2, 3], 0.5, 1.5);
        let mut g = Graph::new();
        let zv = g.param(&z);
        let gv = g.constant(&gamma);
        let bv = g.constant(&beta);
        let (y, stats) = g.batch_norm(zv, gv, bv, NormSpec::Renorm { mean: &mean, std: &std, clip: None }).unwrap();
        let wv = g.constant(&w);
        let p = g.mul(y, wv).unwrap();
        let loss = g.sum(p, None).unwrap();
        let grads = g.backward(loss).unwrap();
        let dz = grads.get(zv).unwrap();
        let stats = stats.expect("renorm observes the batch");
        let mut differs = false;
        for (i, (&out, &zi)) in g.value(y).iter().zip(z.data()).enumerate() {
            let ch = (i / 6) % c;
            let want = gamma.data()[ch] * (zi - mean[ch]) / std[ch] + beta.data()[ch];
            assert!((out - want).abs() < 1e-12, "seed {seed} elem {i}: {out} vs {want}");
            worst = worst.max((out - want).abs());
            let frozen_grad = w.data()[i] * gamma.data()[ch] / std[ch];
            differs |= (dz[i] - frozen_grad).abs() > 1e-9;
        }
        assert!(stats.mean.iter().zip(&mean).any(|(a, b)| a != b));
        assert!(differs, "seed {seed}: gradient equals the frozen-statistics gradient");
    }
    format!("100 batches, max forward error {worst:.1e}")
}

#[test]
fn batch_renorm_forward_is_running_normalization() {
    renorm_identity_check();
}

#[test]
fn norm_layer_renorm_matches_graph_and_keeps_frozen_buffers() {
    let mut rng = rng_for(9, &[]);
    let mut layer = NormLayer::new(2);
    layer.mode = NormMode::BatchRenorm;
    layer.running_mean = vec![0.3, -0.2];
    layer.running_std = vec![1.2, 0.7];
    layer.frozen = true;
    let before = (layer.running_mean.clone(), layer.running_std.clone());
    for _ in 0..100 {
        let z = uniform(&mut rng, vec![3, 2, 2, 2], -1.0, 1.0);
        layer.batch_renorm_forward(&z).unwrap();
    }
    assert_eq!((layer.running_mean.clone(), layer.running_std.clone()), before);
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

fn pd_value(student: &Tensor, teacher: &Tensor) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(student);
    let l = pd_loss(&mut g, s, teacher).unwrap();
    g.scalar(l)
}

pub fn pd_bound_check() -> String {
    let mut rng = rng_for(13, &[]);
    let teacher = softmax_rows(&uniform(&mut rng, vec![20, 5], -3.0, 3.0));
    let floor = pd_value(&teacher, &teacher);
    assert!((floor - mean_entropy(&teacher)).abs() < 1e-9);
    let mut margin = f64::INFINITY;
    for _ in 0..100 {
        let psi = softmax_rows(&uniform(&mut rng, vec![20, 5], -4.0, 4.0));
        let v = pd_value(&psi, &teacher);
        assert!(v >= floor - 1e-12);
        margin = margin.min(v - floor);
    }
    format!("100 students, teacher entropy {floor:.6}, smallest margin {margin:.3e}")
}

#[test]
fn prototype_distillation_is_minimized_by_the_teacher() {
    pd_bound_check();
}
