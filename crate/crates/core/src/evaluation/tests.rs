use super::*;
use crate::generator::OracleGenerator;
use crate::perception::{EvalEmbedder, FrozenNet, KeypointRegressor, PerceptionKind, PoseRegressor};
use crate::toyfaces::{sample_factors, render};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn eval_nets() -> EvalNets {
    EvalNets {
        embedder: EvalEmbedder::new(FrozenNet::untrained(PerceptionKind::EvalEmbedder, 21).unwrap()),
        pose: PoseRegressor::new(FrozenNet::untrained(PerceptionKind::Pose, 22).unwrap()),
        keypoints: KeypointRegressor::new(FrozenNet::untrained(PerceptionKind::Keypoints, 23).unwrap()),
    }
}

fn identity_embedder() -> IdentityEmbedder {
    IdentityEmbedder::new(FrozenNet::untrained(PerceptionKind::Identity, 24).unwrap())
}

fn faces(seed: u64, n: usize) -> Vec<ToyImage> {
    sample_factors(seed, n).unwrap().iter().map(|f| render(f, 8.0).unwrap()).collect()
}

fn gaussian(seed: u64, n: usize, mean: &[f64], scale: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + scale * z
                })
                .collect()
        })
        .collect()
}

#[test]
fn metrics_vanish_on_identical_inputs() {
    let nets = eval_nets();
    let imgs = faces(1, 3);
    for img in &imgs {
        assert!((metric_identity(&nets, img, img) - 1.0).abs() < 1e-6);
        assert!(metric_expression(&nets, img, img).abs() < 1e-12);
        assert!(metric_pose(&nets, img, img).abs() < 1e-12);
    }
    let (a, b) = (&imgs[0], &imgs[1]);
    assert!((metric_identity(&nets, a, b) - metric_identity(&nets, b, a)).abs() < 1e-12);
    assert!(metric_expression(&nets, a, b) >= 0.0 && metric_pose(&nets, a, b) >= 0.0);
}

#[test]
fn pose_distance_rescales_translation() {
    assert!((pose_distance(&[10.0, 0.0, 0.0], &[0.0, 0.0, 0.0]) - 10.0).abs() < 1e-12);
    assert!((pose_distance(&[0.0, 8.0, 0.0], &[0.0, 0.0, 0.0]) - 30.0).abs() < 1e-12);
    assert!((pose_distance(&[3.0, 0.0, 0.0], &[0.0, 0.0, 0.0]) - pose_distance(&[0.0; 3], &[3.0, 0.0, 0.0])).abs() < 1e-12);
}

#[test]
fn fid_is_zero_on_identical_sets_and_symmetric() {
    let a = gaussian(1, 400, &[0.0; 8], 1.0);
    let b = gaussian(2, 300, &[0.5; 8], 1.5);
    assert!(compute_fid(&a, &a).unwrap().abs() < 1e-6);
    let (ab, ba) = (compute_fid(&a, &b).unwrap(), compute_fid(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
}

#[test]
fn fid_matches_the_mean_shift_closed_form() {
    let m = [0.5, -1.0, 0.25, 1.5];
    let expected: f64 = m.iter().map(|x| x * x).sum();
    let a = gaussian(3, 50_000, &[0.0; 4], 1.0);
    let b = gaussian(4, 50_000, &m, 1.0);
    let fid = compute_fid(&a, &b).unwrap();
    assert!((fid - expected).abs() / expected < 0.02, "fid {fid} expected {expected}");
}

#[test]
fn fid_matches_the_scale_closed_form() {
    let a = gaussian(5, 50_000, &[0.0; 2], 1.0);
    let b = gaussian(6, 50_000, &[0.0; 2], 2.0);
    let fid = compute_fid(&a, &b).unwrap();
    assert!((fid - 2.0).abs() / 2.0 < 0.03, "fid {fid}");
}

#[test]
fn fid_agrees_with_the_diagonal_closed_form() {
    let (mu_a, mu_b) = (DVector::from_vec(vec![0.3, -0.2]), DVector::from_vec(vec![1.0, 0.4]));
    let (va, vb) = ([0.5, 2.0], [1.5, 0.25]);
    let cov_a = DMatrix::from_diagonal(&DVector::from_vec(va.to_vec()));
    let cov_b = DMatrix::from_diagonal(&DVector::from_vec(vb.to_vec()));
    let brute: f64 = (mu_a.clone() - mu_b.clone()).norm_squared()
        + va.iter().zip(&vb).map(|(a, b): (&f64, &f64)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
    assert!((gaussian_frechet(&mu_a, &cov_a, &mu_b, &cov_b) - brute).abs() < 1e-12);
}

#[test]
fn fid_rejects_small_sets() {
    let a = gaussian(7, 63, &[0.0; 32], 1.0);
    let b = gaussian(8, 64, &[0.0; 32], 1.0);
    assert!(matches!(compute_fid(&a, &b), Err(Error::InsufficientSamples { needed: 64, got: 63 })));
    assert!(compute_fid(&b, &b).is_ok());
    assert!(compute_fid(&[], &[]).is_err());
}

#[test]
fn mean_std_accumulates_and_merges() {
    let values = [1.0, 2.0, 4.0, 7.0];
    let all = MeanStd::of(&values);
    assert!((all.mean() - 3.5).abs() < 1e-12);
    let var = values.iter().map(|v| (v - 3.5f64).powi(2)).sum::<f64>() / 4.0;
    assert!((all.std() - var.sqrt()).abs() < 1e-12);
    let mut left = MeanStd::of(&values[..1]);
    left.merge(&MeanStd::of(&values[1..]));
    assert_eq!(left, all);
    assert_eq!(MeanStd::default().std(), 0.0);
}

#[test]
fn degenerate_pipeline_scores_perfectly() {
    let g = OracleGenerator::new(7);
    let nets = eval_nets();
    let mut held = HeldOut::sample(&g, 64, 3).unwrap();
    held.pairs = held.pairs.iter().map(|(_, a)| (a.clone(), a.clone())).collect();
    let report = evaluate_pipeline(&|_, i_attr| Ok(i_attr.clone()), &nets, &held, "abc").unwrap();
    assert!((report.identity.mean() - 1.0).abs() < 1e-9);
    assert!(report.expression.mean().abs() < 1e-12);
    assert!(report.pose.mean().abs() < 1e-12);
    assert!((report.recon_ms_ssim.mean() - 1.0).abs() < 1e-9);
    assert_eq!(report.recon_l1.mean(), 0.0);
    assert_eq!(report.n_pairs, 64);
    assert!(report.fid >= 0.0);
    let table = report.to_table();
    assert_eq!(table.lines().count(), 2);
    assert!(table.contains("FID") && table.contains("| 64 | abc |"));
}

#[test]
fn evaluation_is_deterministic_under_a_seed() {
    let g = OracleGenerator::new(7);
    let nets = eval_nets();
    let e_id = identity_embedder();
    let model = Model::new(5).unwrap();
    let a = evaluate(&model, &e_id, &g, &nets, 64, 9, "h").unwrap();
    let b = evaluate(&model, &e_id, &g, &nets, 64, 9, "h").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_table(), b.to_table());
    assert!(evaluate(&model, &e_id, &g, &nets, 10, 9, "h").is_err());
}

fn isotropic(seed: u64, n: usize) -> Vec<StyleLatent> {
    gaussian(seed, n, &[0.0; W_DIM], 1.0).iter().map(|v| StyleLatent(std::array::from_fn(|i| v[i]))).collect()
}

#[test]
fn pca_of_identical_spaces_has_zero_distances() {
    let w = isotropic(1, PCA_MIN_SAMPLES);
    let s = pca_w_analysis(&w, &w, &w).unwrap();
    assert!(s.frechet.iter().all(|d| d.abs() < 1e-9));
    assert_eq!(s.projections.iter().map(Vec::len).collect::<Vec<_>>(), [PCA_MIN_SAMPLES; 3]);
    let csv = s.to_points_csv();
    assert_eq!(csv.lines().count(), 1 + 3 * PCA_MIN_SAMPLES);
    assert!(s.summary_line().starts_with("explained="));
}

#[test]
fn pca_of_isotropic_samples_splits_variance_evenly() {
    let s = pca_w_analysis(&isotropic(2, PCA_MIN_SAMPLES), &isotropic(3, PCA_MIN_SAMPLES), &isotropic(4, PCA_MIN_SAMPLES))
        .unwrap();
    for e in s.explained {
        assert!((e * W_DIM as f64 - 1.0).abs() < 0.15, "explained {e}");
    }
    assert!(s.explained[0] >= s.explained[1]);
    let dot: f64 = s.components[0].iter().zip(&s.components[1]).map(|(a, b)| a * b).sum();
    assert!(dot.abs() < 1e-9);
}

#[test]
fn pca_detects_a_shifted_space() {
    let base = isotropic(5, PCA_MIN_SAMPLES);
    let near: Vec<StyleLatent> = isotropic(6, PCA_MIN_SAMPLES);
    let far: Vec<StyleLatent> = isotropic(7, PCA_MIN_SAMPLES)
        .iter()
        .map(|w| StyleLatent(std::array::from_fn(|i| if i == 0 { 3.0 * w.0[i] + 4.0 } else { w.0[i] })))
        .collect();
    let s = pca_w_analysis(&base, &near, &far).unwrap();
    assert!(s.frechet_generator_ours() * 5.0 < s.frechet_generator_baseline());
}

#[test]
fn pca_requires_ten_thousand_samples() {
    let small = isotropic(8, 100);
    let big = isotropic(9, PCA_MIN_SAMPLES);
    assert!(matches!(pca_w_analysis(&big, &small, &big), Err(Error::InsufficientSamples { .. })));
}

#[test]
fn interpolation_endpoints_are_exact() {
    let g = OracleGenerator::new(7);
    let e_id = identity_embedder();
    let model = Model::new(5).unwrap();
    let imgs = faces(11, 4);
    let direct = |i: &ToyImage, a: &ToyImage| g.generate(&model.infer_w(&e_id, i, a).unwrap()).unwrap();

    let frames = interpolate_w(&model, &e_id, &g, (&imgs[0], &imgs[1]), (&imgs[2], &imgs[3]), 5).unwrap();
    assert_eq!(frames.len(), 5);
    assert_eq!(frames[0], direct(&imgs[0], &imgs[1]));
    assert_eq!(frames[4], direct(&imgs[2], &imgs[3]));

    let frames = interpolate_z(&model, &e_id, &g, FixedBlock::Identity, &imgs[0], &imgs[1], &imgs[2], 4).unwrap();
    assert_eq!(frames.len(), 4);
    assert_eq!(frames[0], direct(&imgs[0], &imgs[1]));
    assert_eq!(frames[3], direct(&imgs[0], &imgs[2]));

    let frames = interpolate_z(&model, &e_id, &g, FixedBlock::Attribute, &imgs[3], &imgs[1], &imgs[2], 3).unwrap();
    assert_eq!(frames[0], direct(&imgs[1], &imgs[3]));
    assert_eq!(frames[2], direct(&imgs[2], &imgs[3]));

    assert!(interpolate_w(&model, &e_id, &g, (&imgs[0], &imgs[1]), (&imgs[2], &imgs[3]), 1).is_err());
    assert_eq!(FixedBlock::parse("attribute").unwrap(), FixedBlock::Attribute);
    assert!(FixedBlock::parse("pose").is_err());
}

#[test]
fn constant_trajectory_gives_identical_frames() {
    let g = OracleGenerator::new(7);
    let nets = eval_nets();
    let e_id = identity_embedder();
    let model = Model::new(5).unwrap();
    let f = sample_factors(12, 1).unwrap()[0];
    let identity_img = faces(13, 1).remove(0);
    let c = sequence_coherence(&model, &e_id, &g, &nets, &identity_img, &[f; 4]).unwrap();
    assert_eq!(c.frames.len(), 4);
    assert!(c.frames.iter().all(|fr| fr == &c.frames[0]));
    assert!(c.identity_std < 1e-6);
    assert_eq!(c.expression.len(), 4);
    assert!(sequence_coherence(&model, &e_id, &g, &nets, &identity_img, &[]).is_err());
}

#[test]
fn pose_sweep_stays_in_range_and_keeps_identity() {
    let base = sample_factors(14, 1).unwrap()[0];
    let sweep = pose_sweep(&base, 60);
    assert_eq!(sweep.len(), 60);
    assert!(sweep.iter().all(|f| f.in_range() && f.identity_block() == base.identity_block()));
    assert!(sweep.iter().any(|f| f.pose_theta > 15.0) && sweep.iter().any(|f| f.pose_theta < -15.0));
}
