mod common;

use std::collections::BTreeMap;

use cohedit_core::attention::InjectionMode;
use cohedit_core::denoiser::{all_layers, AttentionControl, Denoiser};
use cohedit_core::pipeline::{Evaluation, FlowSource};
use cohedit_core::synth::{generate_clip, standard_fixture};
use cohedit_core::{
    DiffusionSchedule, EditConfig, EditSession, Editor, Error, GuidanceConfig, Image, InjectionPolicy, LossReduction,
    Variant, VideoClip,
};
use cohedit_core::metrics::ToyEmbedder;
use common::{max_abs_diff, random_model, schedule, small_config};

const STEPS: usize = 6;
const PROMPT: &str = "blue circle on gray";

struct Setup {
    model: Denoiser,
    sched: DiffusionSchedule,
}

fn setup() -> Setup {
    Setup {
        model: random_model(small_config(), 11),
        sched: schedule(STEPS),
    }
}

fn clip(n: usize) -> VideoClip {
    let mut spec = standard_fixture(0);
    spec.n_frames = n;
    generate_clip(&spec).unwrap()
}

fn config() -> EditConfig {
    EditConfig {
        guidance: GuidanceConfig {
            active_steps: 3,
            delta: 100.0,
            reduction: LossReduction::Mean,
            ..GuidanceConfig::default()
        },
        edit_cfg_scale: 2.0,
        ..EditConfig::default()
    }
}

fn same_images(a: &[Image], b: &[Image]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.data() == y.data())
}

fn cache_bits(c: &cohedit_core::FeatureCache) -> BTreeMap<(usize, usize), Vec<f32>> {
    c.keys()
        .map(|(t, l)| {
            let v = c.get(t, l).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            ((t, l), v)
        })
        .collect()
}

#[test]
fn inversion_is_one_latent_per_frame_and_deterministic() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let mut c = clip(2);
    c.frames[1] = c.frames[0].clone();
    c.depths[1] = c.depths[0].clone();
    c.flows = None;
    let inv = ed.invert_clip(&c, &config()).unwrap();
    assert_eq!(inv.len(), 2);
    assert_eq!(max_abs_diff(&inv[0].data, &inv[1].data), 0.0);
    assert_eq!(ed.invert_clip(&clip(1), &config()).unwrap().len(), 1);
}

#[test]
fn anchor_frame_is_plain_single_image_editing() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(2);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let mut session = EditSession::new(inv.clone(), PROMPT, &cfg).unwrap();
    let first = ed.edit_frame(&mut session, &c.depths[0]).unwrap();
    let single = ed
        .sample(&inv[0], &ed.condition(PROMPT, &c.depths[0], cfg.edit_cfg_scale).unwrap())
        .unwrap();
    assert_eq!(first.data(), single.data());
    assert!(session.events().is_empty());

    let one = ed.edit_clip(&clip(1), &inv[..1], PROMPT, &cfg, None).unwrap();
    assert_eq!(one.clip.frames.len(), 1);
    assert_eq!(one.clip.frames[0].data(), single.data());
}

#[test]
fn disabled_couplings_reduce_to_per_frame_editing() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(2);
    let mut cfg = config();
    cfg.policy = InjectionPolicy::none();
    cfg.guidance.delta = 0.0;
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let out = ed.edit_clip(&c, &inv, PROMPT, &cfg, None).unwrap();
    let independent = ed
        .sample(&inv[1], &ed.condition(PROMPT, &c.depths[1], cfg.edit_cfg_scale).unwrap())
        .unwrap();
    assert_eq!(out.clip.frames[1].data(), independent.data());
    assert!(out.events.is_empty());
}

#[test]
fn full_method_changes_later_frames() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(2);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let ours = ed.edit_clip(&c, &inv, PROMPT, &cfg, None).unwrap();
    let per_frame = Variant::named("per-frame").unwrap().apply(&cfg);
    let base = ed.edit_clip(&c, &inv, PROMPT, &per_frame, None).unwrap();
    assert_eq!(ours.clip.frames[0].data(), base.clip.frames[0].data());
    assert_ne!(ours.clip.frames[1].data(), base.clip.frames[1].data());
    assert_eq!(ours.events.len(), 3);
}

#[test]
fn output_matches_input_count_and_shape_and_is_deterministic() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(3);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let a = ed.edit_clip(&c, &inv, PROMPT, &cfg, None).unwrap();
    let b = ed.edit_clip(&c, &inv, PROMPT, &cfg, None).unwrap();
    assert_eq!(a.clip.len(), 3);
    for (x, y) in a.clip.frames.iter().zip(&c.frames) {
        assert!(x.same_shape(y));
    }
    assert!(same_images(&a.clip.frames, &b.clip.frames));
    assert_eq!(a.events, b.events);
}

#[test]
fn stale_state_cannot_reach_later_frames() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(4);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let mut session = EditSession::new(inv, PROMPT, &cfg).unwrap();
    for f in 0..3 {
        ed.edit_frame(&mut session, &c.depths[f]).unwrap();
    }
    let mut stale = session.clone();
    // Frame 2's latent is neither the anchor's nor frame 3's state.
    stale.inverted[1].data = (&stale.inverted[1].data * -3.0).unwrap();
    let clean = ed.edit_frame(&mut session, &c.depths[3]).unwrap();
    let corrupted = ed.edit_frame(&mut stale, &c.depths[3]).unwrap();
    assert_eq!(clean.data(), corrupted.data());

    // Sanity check: frame 4 does read frame 3's cache.
    let mut session = EditSession::new(ed.invert_clip(&c, &cfg).unwrap(), PROMPT, &cfg).unwrap();
    for f in 0..3 {
        ed.edit_frame(&mut session, &c.depths[f]).unwrap();
    }
    let mut prev = session.prev_features.clone().unwrap();
    let mut swapped = cohedit_core::FeatureCache::new(prev.frame_index());
    for (t, l) in prev.keys().collect::<Vec<_>>() {
        swapped.record(t, l, (prev.get(t, l).unwrap() * 2.0).unwrap()).unwrap();
    }
    prev = swapped;
    session.prev_features = Some(prev);
    let perturbed = ed.edit_frame(&mut session, &c.depths[3]).unwrap();
    assert_ne!(perturbed.data(), clean.data());
}

#[test]
fn anchor_cache_is_stable_and_prev_cache_is_complete() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(3);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let mut session = EditSession::new(inv, PROMPT, &cfg).unwrap();
    ed.edit_frame(&mut session, &c.depths[0]).unwrap();
    let anchor = cache_bits(session.anchor_features.as_ref().unwrap());
    assert_eq!(anchor.len(), STEPS * cfg.policy.layers.len());
    for f in 1..3 {
        ed.edit_frame(&mut session, &c.depths[f]).unwrap();
        assert_eq!(cache_bits(session.anchor_features.as_ref().unwrap()), anchor);
        let prev = session.prev_features.as_ref().unwrap();
        assert_eq!(prev.frame_index(), f);
        for &t in s.sched.timesteps() {
            for &l in &cfg.policy.layers {
                assert!(prev.get(t, l).is_some(), "frame {} lacks ({t}, {l})", f + 1);
            }
        }
        assert_eq!(session.prev_x0.len(), STEPS);
    }
}

#[test]
fn full_trajectory_capture_has_one_entry_per_step_and_layer() {
    let model = random_model(small_config(), 3);
    let sched = schedule(50);
    let ed = Editor::new(&model, &sched);
    let c = clip(1);
    let cfg = EditConfig::default();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let mut session = EditSession::new(inv, PROMPT, &EditConfig { edit_cfg_scale: 1.0, ..cfg }).unwrap();
    ed.edit_frame(&mut session, &c.depths[0]).unwrap();
    let cache = session.anchor_features.as_ref().unwrap();
    assert_eq!(cache.len(), 450);
    for l in cache.layers() {
        let dims: Vec<_> = cache
            .keys()
            .filter(|&(_, k)| k == l)
            .map(|(t, k)| cache.get(t, k).unwrap().dims().to_vec())
            .collect();
        assert!(dims.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn missing_session_state_is_a_state_error() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(2);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let mut session = EditSession::new(inv, PROMPT, &cfg).unwrap();
    ed.edit_frame(&mut session, &c.depths[0]).unwrap();
    let mut no_x0 = session.clone();
    no_x0.prev_x0.clear();
    assert!(matches!(ed.edit_frame(&mut no_x0, &c.depths[1]), Err(Error::State(_))));
    let mut no_anchor = session.clone();
    no_anchor.anchor_features = None;
    assert!(matches!(ed.edit_frame(&mut no_anchor, &c.depths[1]), Err(Error::State(_))));
    ed.edit_frame(&mut session, &c.depths[1]).unwrap();
    assert!(matches!(ed.edit_frame(&mut session, &c.depths[1]), Err(Error::State(_))));
}

#[test]
fn self_injection_reproduces_the_vanilla_trajectory() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(1);
    let inv = ed.invert_clip(&c, &config()).unwrap();
    let cond = ed.condition(PROMPT, &c.depths[0], 2.0).unwrap();
    let layers = all_layers();
    let vanilla = ed
        .sample_with(&inv[0], &cond, |_, _| Ok(AttentionControl::capture(layers.iter().copied())))
        .unwrap();
    let injected = ed
        .sample_with(&inv[0], &cond, |_, t| {
            let feats = layers
                .iter()
                .map(|&l| (l, vec![vanilla.features.get(t, l).unwrap().clone()]))
                .collect();
            Ok(AttentionControl::inject(feats))
        })
        .unwrap();
    assert!(max_abs_diff(&vanilla.output.data, &injected.output.data) < 1e-5);
}

#[test]
fn ablation_returns_one_row_per_variant() {
    let s = setup();
    let ed = Editor::new(&s.model, &s.sched);
    let c = clip(3);
    let cfg = config();
    let inv = ed.invert_clip(&c, &cfg).unwrap();
    let embedder = ToyEmbedder::default();
    let eval = Evaluation {
        embedder: &embedder,
        classifier: None,
        flow_source: FlowSource::Input,
    };
    let names = ["anchor_only", "prev_only", "anchor_plus_prev", "decoder", "all-layers"];
    let variants: Vec<Variant> = names.iter().map(|n| Variant::named(n).unwrap()).collect();
    let rows = ed.run_ablation(&c, &inv, PROMPT, &cfg, &variants, &eval, "c0").unwrap();
    assert_eq!(rows.len(), names.len());
    for ((row, _), name) in rows.iter().zip(names) {
        assert_eq!(row.variant, name);
        assert_eq!(row.n_frames, 3);
        assert!(row.pixel_mse.unwrap() >= 0.0);
    }
    assert!(ed.run_ablation(&c, &inv, PROMPT, &cfg, &[], &eval, "c0").is_err());
    assert_eq!(Variant::named("prev_only").unwrap().mode, Some(InjectionMode::PrevOnly));
}
