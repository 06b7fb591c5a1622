use ccdnet::cadd::LossWeights;
use ccdnet::checkpoint::{Checkpoint, CheckpointMeta};
use ccdnet::cli::cmd_fuse;
use ccdnet::config::{EvalConfig, RunConfig};
use ccdnet::data::{synth_scene, Detection, Sample, SynthSceneConfig};
use ccdnet::error::Error;
use ccdnet::eval::{detect_all, evaluate};
use ccdnet::metrics::{match_image, prf1, MatchCriterion, MatchReport};
use ccdnet::model;
use ccdnet::plot::heatmap_values;
use ccdnet::train::{compute_step, train};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenes(n: usize, seed: u64, scene: &SynthSceneConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = synth_scene(scene, &mut rng).unwrap();
            Sample {
                id: format!("s{i:03}"),
                image: s.image,
                boxes: s.targets,
            }
        })
        .collect()
}

fn small_run(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        batch_size: 8,
        ..RunConfig::default()
    }
}

#[test]
fn two_epochs_reduce_the_loss() {
    let data = scenes(32, 1, &SynthSceneConfig::default());
    let out = train(&small_run(3), &data, None).unwrap();
    assert_eq!(out.epoch_loss.len(), 3);
    assert!(
        out.epoch_loss[2] < out.epoch_loss[0],
        "{:?}",
        out.epoch_loss
    );
}

#[test]
fn same_seed_gives_identical_logs() {
    let data = scenes(16, 2, &SynthSceneConfig::default());
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = small_run(1);
    train(&cfg, &data, Some(&a)).unwrap();
    train(&cfg, &data, Some(&b)).unwrap();
    let la = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(la, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(la.lines().count(), 3);
}

#[test]
fn zero_weights_log_contrastive_terms_without_gradient() {
    let cfg = RunConfig::default();
    let data = scenes(4, 3, &SynthSceneConfig::default());
    let refs: Vec<&Sample> = data.iter().collect();
    let store = model::init_params::<f32>(&cfg.model, 0).unwrap();
    let off = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..cfg.loss.clone()
    };
    let r = compute_step(&cfg.model, &off, &store, &refs).unwrap();
    assert!(r.row.lcm != 0.0 && r.row.gcm != 0.0, "{:?}", r.row);
    assert!((r.row.total - (r.row.cls + r.row.loc)).abs() < 1e-9);
    assert!(r.grads.iter().all(|(n, _)| !n.starts_with("cadd.")));

    // backbone gradients equal those of a detection-only objective
    let on = compute_step(&cfg.model, &cfg.loss, &store, &refs).unwrap();
    assert!(on.grads.iter().any(|(n, _)| n.starts_with("cadd.")));
    let differs = r
        .grads
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .any(|(n, g)| {
            on.grads
                .iter()
                .find(|(m, _)| m == n)
                .is_some_and(|(_, h)| g.max_abs_diff(h) > 0.0)
        });
    assert!(differs);
}

#[test]
fn perfect_detector_scores_one() {
    let data = scenes(10, 4, &SynthSceneConfig::default());
    let mut report = MatchReport::default();
    for s in &data {
        let dets: Vec<Detection> = s
            .boxes
            .iter()
            .map(|&bbox| Detection {
                bbox,
                score: 1.0,
                level: 1,
            })
            .collect();
        report.merge(&match_image(
            &s.id,
            &dets,
            &s.boxes,
            MatchCriterion::Iou(0.5),
        ));
    }
    assert_eq!(prf1(&report), (1.0, 1.0, 1.0));
}

#[test]
fn empty_test_set_is_an_error() {
    let cfg = RunConfig::default();
    let store = model::init_params::<f32>(&cfg.model, 0).unwrap();
    assert!(evaluate(&cfg.model, &store, &[], &EvalConfig::default()).is_err());
}

#[test]
fn zero_sigma_names_the_block() {
    let cfg = RunConfig::default();
    let mut store = model::init_params::<f32>(&cfg.model, 0).unwrap();
    let name = store
        .names()
        .find(|n| n.ends_with(".bn.std"))
        .unwrap()
        .clone();
    store.get_mut(&name).unwrap().data_mut()[0] = 0.0;
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in.ccdn");
    let output = tmp.path().join("out.ccdn");
    Checkpoint::new(cfg.model.clone(), CheckpointMeta::default(), store)
        .save(&input)
        .unwrap();
    match cmd_fuse(&input, &output, 1e-4, 32) {
        Err(Error::InvalidBn(msg)) => {
            let block = name.trim_end_matches(".std").rsplit_once(".b").unwrap().0;
            assert!(msg.contains(block), "{msg} should name {block}");
        }
        other => panic!("expected an invalid-BN error, got {other:?}"),
    }
    assert!(!output.exists());
}

fn trained(epochs: usize) -> (RunConfig, ccdnet::params::ParamStore<f32>) {
    let cfg = small_run(epochs);
    let data = scenes(96, 5, &SynthSceneConfig::default());
    let out = train(&cfg, &data, None).unwrap();
    (cfg, out.store)
}

#[test]
fn fused_and_unfused_evaluation_agree() {
    let (cfg, store) = trained(2);
    let test = scenes(12, 6, &SynthSceneConfig::default());
    let ev = EvalConfig {
        score_thresh: 0.05,
        ..EvalConfig::default()
    };
    let fused = model::fuse_f32(&cfg.model, &store).unwrap();
    let a = detect_all(&cfg.model, &store, &test, &ev).unwrap();
    let b = detect_all(&cfg.model, &fused, &test, &ev).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.len(), y.len());
        for (d, e) in x.iter().zip(y) {
            assert!(
                (d.score - e.score).abs() <= 1e-4,
                "{} vs {}",
                d.score,
                e.score
            );
            assert!(d.bbox.iou(&e.bbox) > 0.999);
        }
    }
    let ev = EvalConfig::default();
    let ra = evaluate(&cfg.model, &store, &test, &ev).unwrap();
    let rb = evaluate(&cfg.model, &fused, &test, &ev).unwrap();
    assert_eq!((ra.tp, ra.fp, ra.fn_), (rb.tp, rb.fp, rb.fn_));
}

#[test]
fn heatmap_peaks_at_the_target() {
    let (cfg, store) = trained(8);
    let fused = model::fuse_f32(&cfg.model, &store).unwrap();
    let single = SynthSceneConfig {
        targets: (1, 1),
        distractors: (0, 0),
        ..SynthSceneConfig::default()
    };
    let mut hits = 0;
    let probes = scenes(10, 7, &single);
    for s in &probes {
        let x = s
            .image
            .to_tensor::<f32>()
            .reshape(&[1, 1, s.image.height, s.image.width]);
        let feat = model::named_feature(&cfg.model, &fused, &x, "neck.p1").unwrap();
        let (h, w, v) = heatmap_values(&feat).unwrap();
        let at = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let (py, px) = ((at / w) as f64 + 0.5, (at % w) as f64 + 0.5);
        let (sx, sy) = (
            s.image.width as f64 / w as f64,
            s.image.height as f64 / h as f64,
        );
        let (cx, cy) = s.boxes[0].center();
        // the map's own stride is the localisation tolerance
        if (px * sx - cx).abs() <= sx && (py * sy - cy).abs() <= sy {
            hits += 1;
        }
    }
    assert_eq!(hits, probes.len());
}
