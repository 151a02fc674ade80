use super::*;
use crate::datagen::{generate_unchecked, DatasetParams};
use crate::encoder::{Activation, DenseLayer, EncoderConfig, EncoderKind};
use crate::retrieval::{indicator, MatchAnnotation};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Two 1×1×2 images whose second pixel is the patch. The encoder maps
/// `v ↦ normalize(2v + b)`, so image 0 embeds along `(b₀, b₁ + 2δ)` and image 1
/// along `(2 + b₀, b₁ + 2δ)`. Text 0 matches image 0 and text 1 matches image 1.
fn two_point(bias: [f64; 2], texts: [f64; 4]) -> (Encoder, Dataset, Mask) {
    let config = EncoderConfig::linear([1, 1, 2], 2, 0);
    let layer = DenseLayer { weight: t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]), bias: t(&[2], &bias) };
    let enc = Encoder::from_layers(config, vec![layer]).unwrap();
    let ds = Dataset {
        params: DatasetParams {
            n_images: 2,
            texts_per_image: 1,
            image_shape: [1, 1, 2],
            embed_dim: 2,
            class_count: 1,
            noise_level: 0.0,
            seed: 0,
        },
        images: vec![
            PixelImage::new(t(&[1, 1, 2], &[0.0, 0.3])).unwrap(),
            PixelImage::new(t(&[1, 1, 2], &[1.0, 0.8])).unwrap(),
        ],
        texts: EmbeddingIndex::new(t(&[2, 2], &texts)).unwrap(),
        annotations: MatchAnnotation::from_text_to_image(2, vec![0, 1]).unwrap(),
        prototypes: EmbeddingIndex::new(t(&[1, 2], &[1.0, 0.0])).unwrap(),
        labels: vec![0, 0],
        encoder_hash: enc.content_hash(),
    };
    let mask = Mask::new(t(&[1, 1, 2], &[0.0, 1.0])).unwrap();
    (enc, ds, mask)
}

/// Text 0 = (1, 0), text 1 = (0, 1): the boundary for image 0 sits at δ = 0.5.
fn text_boundary() -> (Encoder, Dataset, Mask) {
    two_point([1.0, 0.0], [1.0, 0.0, 0.0, 1.0])
}

/// Text 0 = (1, 1)/√2. Image 0 scores higher for δ < (√3 − 1)/2, image 1 above.
fn image_boundary() -> (Encoder, Dataset, Mask) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    two_point([1.0, 1.0], [h, h, 0.0, 1.0])
}

fn one_boundary_cfg(mask: Mask) -> AttackConfig {
    let mut cfg = AttackConfig::new(Constraint::Patch { mask });
    cfg.k = 1;
    cfg.epochs = 1;
    cfg
}

fn small() -> (Encoder, Dataset) {
    let config = EncoderConfig {
        kind: EncoderKind::Mlp,
        input_shape: [1, 6, 6],
        embed_dim: 8,
        layer_widths: vec![16],
        activation: Activation::Tanh,
        seed: 5,
    };
    let enc = Encoder::random(config).unwrap();
    let params = DatasetParams {
        n_images: 20,
        texts_per_image: 2,
        image_shape: [1, 6, 6],
        embed_dim: 8,
        class_count: 3,
        noise_level: 0.05,
        seed: 3,
    };
    let ds = generate_unchecked(&params, &enc).unwrap();
    (enc, ds)
}

fn small_patch_cfg() -> AttackConfig {
    let mask = Mask::bottom_right_square(&[1, 6, 6], 2, (0, 0)).unwrap();
    let mut cfg = AttackConfig::new(Constraint::Patch { mask });
    cfg.k = 3;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.probe_images = 8;
    cfg
}

fn patched(image: &PixelImage, values: &[f64], active: &[usize]) -> Tensor {
    let mut data = image.tensor().data().to_vec();
    for (&a, v) in active.iter().zip(values) {
        data[a] = *v;
    }
    t(image.shape(), &data)
}

#[test]
fn one_step_crosses_the_single_text_boundary() {
    let (enc, ds, mask) = text_boundary();
    let cfg = one_boundary_cfg(mask.clone());
    let zeros = Tensor::zeros(&[1, 1, 2]).unwrap();
    let (delta, rec) = tra_step(&enc, &ds, 0, &zeros, &cfg).unwrap();
    assert!(rec.converged);
    assert_eq!(rec.iterations, 1);
    let adv = apply_patch(&ds.images[0], &delta, &mask).unwrap();
    let e = enc.encode_image(&adv).unwrap();
    assert!(!indicator(e.data(), &ds.texts, &[0], 1).unwrap());
}

#[test]
fn one_step_puts_the_nonmatching_image_ahead() {
    let (enc, ds, mask) = image_boundary();
    let cfg = one_boundary_cfg(mask.clone());
    let zeros = Tensor::zeros(&[1, 1, 2]).unwrap();
    let (delta, rec) = ira_step(&enc, &ds, 0, &zeros, &cfg).unwrap();
    assert!(rec.converged);
    let score = |i: usize| {
        let adv = apply_patch(&ds.images[i], &delta, &mask).unwrap();
        dot(enc.encode_image(&adv).unwrap().data(), ds.texts.row(0))
    };
    assert!(score(1) > score(0), "{} vs {}", score(1), score(0));
}

#[test]
fn empty_mask_is_inert() {
    let (enc, ds) = small();
    let mut cfg = small_patch_cfg();
    cfg.constraint = Constraint::Patch { mask: Mask::zeros(&[1, 6, 6]).unwrap() };
    let zeros = Tensor::zeros(&[1, 6, 6]).unwrap();
    let (delta, rec) = tra_step(&enc, &ds, 0, &zeros, &cfg).unwrap();
    assert_eq!(delta, zeros);
    assert!(!rec.converged);
    assert_eq!(rec.iterations, 0);
    let (delta, rec) = ira_step(&enc, &ds, 0, &zeros, &cfg).unwrap();
    assert_eq!(delta, zeros);
    assert!(!rec.converged);
}

#[test]
fn already_fooled_sample_takes_no_steps() {
    let (enc, ds, mask) = image_boundary();
    let cfg = one_boundary_cfg(mask);
    // δ = 1 gives image 0 the embedding direction (1, 3), so text 1 already
    // wins, and image 1 the direction (3, 3), which text 0 prefers.
    let ones = Tensor::filled(&[1, 1, 2], 1.0).unwrap();
    let (delta, rec) = tra_step(&enc, &ds, 0, &ones, &cfg).unwrap();
    assert!(rec.converged);
    assert_eq!(rec.iterations, 0);
    assert_eq!(delta, ones);
    let (delta, rec) = ira_step(&enc, &ds, 0, &ones, &cfg).unwrap();
    assert_eq!((rec.iterations, rec.converged), (0, true));
    assert_eq!(delta, ones);
}

#[test]
fn zero_epochs_leave_delta_at_zero() {
    let (enc, ds) = small();
    let mut cfg = small_patch_cfg();
    cfg.epochs = 0;
    for strategy in [Strategy::Tra, Strategy::Ira, Strategy::Tira] {
        let (p, trace) = run_attack(&enc, &ds, &cfg, strategy).unwrap();
        assert!(p.delta.data().iter().all(|&v| v == 0.0));
        assert!(trace.samples.is_empty() && trace.epochs.is_empty());
    }
}

#[test]
fn record_counts_follow_the_schedule() {
    let (enc, ds) = small();
    let mut cfg = small_patch_cfg();
    cfg.batch_size = 1000;
    let (_, trace) = run_tira(&enc, &ds, &cfg).unwrap();
    // One batch per epoch: one image-loop commit and one text-loop commit.
    assert_eq!(trace.commits.len(), 2 * cfg.epochs);
    assert_eq!(trace.samples.len(), cfg.epochs * (ds.n_images() + ds.n_texts()));
    assert_eq!(trace.epochs.len(), cfg.epochs);

    let (_, trace) = run_tra(&enc, &ds, &cfg).unwrap();
    assert_eq!(trace.samples.len(), cfg.epochs * ds.n_images());
    let (_, trace) = run_ira(&enc, &ds, &cfg).unwrap();
    assert_eq!(trace.samples.len(), cfg.epochs * ds.n_texts());
    assert!(trace.samples.iter().all(|s| s.modality == Modality::Text));
}

#[test]
fn runs_are_deterministic() {
    let (enc, ds) = small();
    let mut cfg = small_patch_cfg();
    cfg.shuffle = true;
    for strategy in [Strategy::Tra, Strategy::Ira, Strategy::Tira] {
        let (a, ta) = run_attack(&enc, &ds, &cfg, strategy).unwrap();
        let (b, tb) = run_attack(&enc, &ds, &cfg, strategy).unwrap();
        assert_eq!(a.delta_hash(), b.delta_hash());
        assert_eq!(ta, tb);
    }
}

#[test]
fn patch_attack_only_touches_masked_pixels() {
    let (enc, ds) = small();
    let cfg = small_patch_cfg();
    let (p, _) = run_tira(&enc, &ds, &cfg).unwrap();
    let Constraint::Patch { mask } = &p.constraint else { panic!("patch expected") };
    assert!(p.delta.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for image in &ds.images {
        let adv = p.apply(image).unwrap();
        for (i, (a, c)) in adv.tensor().data().iter().zip(image.tensor().data()).enumerate() {
            if mask.tensor().data()[i] == 0.0 {
                assert_eq!(a.to_bits(), c.to_bits());
            }
        }
    }
}

#[test]
fn global_budgets_hold_at_every_commit() {
    let (enc, ds) = small();
    for (norm, epsilon) in [(Norm::Linf, 0.05), (Norm::L2, 0.3)] {
        let mut cfg = small_patch_cfg();
        cfg.constraint = Constraint::Global { norm, epsilon };
        for strategy in [Strategy::Tra, Strategy::Ira] {
            let (p, trace) = run_global(&enc, &ds, &cfg, strategy).unwrap();
            assert!(!trace.commits.is_empty());
            for c in &trace.commits {
                match norm {
                    Norm::Linf => assert!(c.linf_norm <= epsilon),
                    Norm::L2 => assert!(c.l2_norm <= epsilon + 1e-12),
                }
            }
            let last = trace.commits.last().unwrap();
            assert_eq!(last.l2_norm, norm2(p.delta.data()));
        }
    }
}

#[test]
fn vanishing_budget_leaves_metrics_unchanged() {
    let (enc, ds) = small();
    let mut cfg = small_patch_cfg();
    cfg.constraint = Constraint::Global { norm: Norm::L2, epsilon: 1e-9 };
    let (p, trace) = run_global(&enc, &ds, &cfg, Strategy::Tra).unwrap();
    assert!(norm2(p.delta.data()) <= 1e-9 + 1e-18);
    for e in &trace.epochs {
        assert!((e.adv_tr - e.clean_tr).abs() <= 0.01);
        assert!((e.adv_ir - e.clean_ir).abs() <= 0.01);
    }
}

#[test]
fn drivers_check_their_mode() {
    let (enc, ds) = small();
    let cfg = small_patch_cfg();
    assert!(matches!(run_global(&enc, &ds, &cfg, Strategy::Tra), Err(Error::InvalidArgument(_))));
    let mut global = cfg.clone();
    global.constraint = Constraint::default_global(Norm::Linf);
    assert!(run_tira(&enc, &ds, &global).is_err());
    assert!(run_global(&enc, &ds, &global, Strategy::Tira).is_err());

    let mut bad = cfg.clone();
    bad.eta = 0.0;
    assert!(run_tra(&enc, &ds, &bad).is_err());
    let mut bad = cfg.clone();
    bad.k = ds.n_images();
    assert!(run_ira(&enc, &ds, &bad).is_err());
    let mut bad = cfg;
    bad.constraint = Constraint::Patch { mask: Mask::ones(&[1, 5, 5]).unwrap() };
    assert!(run_tra(&enc, &ds, &bad).is_err());
}

#[test]
fn converged_flags_match_recomputed_indicators() {
    let (enc, ds) = small();
    let cfg = small_patch_cfg();
    let zeros = Tensor::zeros(&[1, 6, 6]).unwrap();
    let mut engine = Engine::new(&enc, &ds, &cfg, &zeros).unwrap();
    let active = engine.split.active().to_vec();
    let over = 1.0 + cfg.eta;
    for i in 0..10 {
        let mut r = vec![0.0; active.len()];
        let rec = engine.refine_image(i, &mut r).unwrap();
        let values: Vec<f64> = r.iter().map(|ri| over * ri).collect();
        let e = enc.encode(&patched(&ds.images[i], &values, &active)).unwrap();
        let hit = indicator(e.data(), &ds.texts, &ds.annotations.image_to_texts[i], cfg.k).unwrap();
        assert_eq!(rec.converged, !hit, "image {i}");
    }
    for text in 0..10 {
        let mut r = vec![0.0; active.len()];
        let rec = engine.refine_text(text, &mut r).unwrap();
        let values: Vec<f64> = r.iter().map(|ri| over * ri).collect();
        let y = ds.annotations.text_to_image[text];
        let mut candidates = engine.ira_targets(text).unwrap().to_vec();
        candidates.push(y);
        candidates.sort_unstable();
        let rows: Vec<Tensor> =
            candidates.iter().map(|&c| enc.encode(&patched(&ds.images[c], &values, &active)).unwrap()).collect();
        let gallery = EmbeddingIndex::from_rows(&rows).unwrap();
        let pos = candidates.iter().position(|&c| c == y).unwrap();
        let hit = indicator(ds.texts.row(text), &gallery, &[pos], cfg.k).unwrap();
        assert_eq!(rec.converged, !hit, "text {text}");
    }
}

#[test]
fn steps_move_towards_the_target_boundary() {
    let (enc, ds) = small();
    let mut cfg = small_patch_cfg();
    cfg.constraint = Constraint::Patch { mask: Mask::bottom_right_square(&[1, 6, 6], 1, (0, 0)).unwrap() };
    let (_, _, steps, active) = run_logged(&enc, &ds, &cfg, Strategy::Tira).unwrap();
    assert!(steps.iter().any(|s| s.modality == Modality::Image));
    assert!(steps.iter().any(|s| s.modality == Modality::Text));
    // δ is zero during the first batch's image loop, so the iterate can be
    // rebuilt from r alone there.
    let mut checked = 0;
    for s in steps.iter().filter(|s| s.modality == Modality::Image).take(20) {
        if s.index >= cfg.batch_size {
            break;
        }
        let x = patched(&ds.images[s.index], &s.r_before, &active);
        let direction: Vec<f64> =
            ds.texts.row(s.target).iter().zip(ds.texts.row(s.matched)).map(|(a, b)| a - b).collect();
        let (e, grad) = enc.embed_with_gradient(&x, &direction).unwrap();
        let gap = dot(e.data(), ds.texts.row(s.matched)) - dot(e.data(), ds.texts.row(s.target));
        let along: f64 = active.iter().zip(&s.increment).map(|(&a, inc)| grad.data()[a] * inc).sum();
        if gap > 0.0 {
            assert!(along > 0.0, "step {checked}: {along}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn text_step_gradient_matches_finite_differences() {
    let (enc, ds) = small();
    let cfg = small_patch_cfg();
    let base = Tensor::filled(&[1, 6, 6], 0.4).unwrap();
    let engine = Engine::new(&enc, &ds, &cfg, &base).unwrap();
    let active = engine.split.active().to_vec();
    let text = 3;
    let y = ds.annotations.text_to_image[text];
    let other = engine.ira_targets(text).unwrap()[0];
    let mut rng = Lcg64::new(11);
    let r: Vec<f64> = (0..active.len()).map(|_| rng.uniform_symmetric(0.2)).collect();
    let tv = ds.texts.row(text);

    let g_y = enc.backward_split(&engine.split, &engine.pass_at(y, &r, 1.0).unwrap(), tv);
    let g_o = enc.backward_split(&engine.split, &engine.pass_at(other, &r, 1.0).unwrap(), tv);
    let objective = |r: &[f64]| {
        let values: Vec<f64> = active.iter().zip(r).map(|(_, ri)| 0.4 + ri).collect();
        let fy = dot(enc.encode(&patched(&ds.images[y], &values, &active)).unwrap().data(), tv);
        let fo = dot(enc.encode(&patched(&ds.images[other], &values, &active)).unwrap().data(), tv);
        fy - fo
    };
    let h = 1e-5;
    for p in 0..active.len() {
        let analytic = g_y[p] - g_o[p];
        let mut plus = r.clone();
        plus[p] += h;
        let mut minus = r.clone();
        minus[p] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        assert!((analytic - fd).abs() / analytic.abs().max(1e-12) < 1e-6, "pixel {p}: {analytic} vs {fd}");
    }
}

#[test]
fn perturbation_round_trips_through_disk() {
    let (enc, ds) = small();
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = run_tra(&enc, &ds, &small_patch_cfg()).unwrap();
    let path = p.save(dir.path()).unwrap();
    let back = Perturbation::load(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(p.provenance.dataset_hash, ds.content_hash().unwrap());

    let mut cfg = small_patch_cfg();
    cfg.constraint = Constraint::Global { norm: Norm::L2, epsilon: 0.5 };
    let (g, _) = run_global(&enc, &ds, &cfg, Strategy::Tra).unwrap();
    let gdir = dir.path().join("global");
    g.save(&gdir).unwrap();
    assert_eq!(Perturbation::load(&gdir).unwrap(), g);

    let mut bytes = fs::read(dir.path().join("delta.uapt")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(dir.path().join("delta.uapt"), bytes).unwrap();
    assert!(matches!(Perturbation::load(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn config_hash_tracks_the_config() {
    let cfg = small_patch_cfg();
    let mut other = cfg.clone();
    other.eta = 0.03;
    assert_eq!(cfg.echo(Strategy::Tra).hash(), cfg.echo(Strategy::Tra).hash());
    assert_ne!(cfg.echo(Strategy::Tra).hash(), other.echo(Strategy::Tra).hash());
    assert_ne!(cfg.echo(Strategy::Tra).hash(), cfg.echo(Strategy::Ira).hash());
}
