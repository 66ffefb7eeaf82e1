//! Analytic gradients against central finite differences on a width-8 model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spreadsim_core::corpus::grammar::{chat_prompt, evidence_reply, short_reply};
use spreadsim_core::corpus::{generate_world, World};
use spreadsim_core::editor::{compute_key, ValueObjective};
use spreadsim_core::persuade::{dpo_loss, AdapterSet, PreferencePair};
use spreadsim_core::tinylm::{loss_and_grads, ModelConfig, ModelParams};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tiny() -> (World, ModelParams) {
    let world = generate_world(3, 6, 2, 2).unwrap();
    let vocab = world.vocab();
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        vocab_size: vocab.len(),
        context_length: 32,
        ln_eps: 1e-5,
    };
    let params = ModelParams::init(cfg, vocab, 11).unwrap();
    (world, params)
}

/// Relative error with a floor so that exact zeros compare cleanly.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

#[test]
fn lm_loss_gradient_matches_finite_differences() {
    let started = std::time::Instant::now();
    let (world, params) = tiny();
    let (prompt, object) = world.all_prompts().swap_remove(0);
    let batch: Vec<Vec<usize>> = [format!("{prompt} {object} ."), world.all_prompts()[3].0.clone()]
        .iter()
        .map(|t| params.vocab.encode(t).unwrap())
        .collect();
    let (_, grads) = loss_and_grads(&params, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, g) in grads.named() {
        for _ in 0..4 {
            let (i, j) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
            let numeric = central(|h| {
                let mut p = params.clone();
                p.weights.get_mut(&name).unwrap()[(i, j)] += h;
                loss_and_grads(&p, &batch).unwrap().0
            });
            let e = rel_err(g[(i, j)], numeric);
            assert!(e <= TOL, "{name}[{i},{j}]: analytic {} numeric {numeric} rel {e}", g[(i, j)]);
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert!(checked > 40);
    assert!(started.elapsed().as_secs() < 60);
    eprintln!("lm loss: {checked} coordinates, worst relative error {worst:.2e}");
}

#[test]
fn value_objective_gradient_matches_finite_differences() {
    let (world, params) = tiny();
    let edit = world.sample_edits(1, 2, 5).unwrap().remove(0);
    for layer in 0..params.config.n_layers {
        let key = compute_key(&params, layer, &edit.prompt, edit.subject(), &[String::new()]).unwrap();
        for lambda in [0.0, 0.5] {
            let obj = ValueObjective::new(&params, layer, &edit, &key, lambda).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(layer as u64);
            // away from z0 so the KL term has a nonzero gradient too
            let z: DVector<f64> = obj.z0() + DVector::from_fn(obj.z0().len(), |_, _| rng.gen_range(-0.5..0.5));
            let (_, _, _, grad) = obj.eval(&z);
            for i in 0..z.len() {
                let numeric = central(|h| {
                    let mut zz = z.clone();
                    zz[i] += h;
                    obj.eval(&zz).0
                });
                let e = rel_err(grad[i], numeric);
                assert!(e <= TOL, "layer {layer} lambda {lambda} z[{i}]: {} vs {numeric} ({e})", grad[i]);
            }
        }
    }
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    let (world, params) = tiny();
    let (prompt, object) = world.all_prompts().swap_remove(1);
    let pair = PreferencePair {
        x: chat_prompt(&[], &prompt, usize::MAX).0,
        y_w: evidence_reply(&object),
        y_l: short_reply(&object),
    };
    let tensors = AdapterSet::attention_tensors(&params);
    let mut adapters = AdapterSet::init(&params, &tensors, 2, 1.0, 3).unwrap();
    // B = 0 at init would make every dA vanish
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for a in &mut adapters.adapters {
        a.b = DMatrix::from_fn(a.b.nrows(), a.b.ncols(), |_, _| rng.gen_range(-0.3..0.3));
    }
    let reference = params.clone();
    for beta in [0.1, 1.0] {
        let (_, grads) = dpo_loss(&params, &adapters, &reference, &pair, beta).unwrap();
        for (ai, (da, db)) in grads.iter().enumerate().step_by(3) {
            for (which, g) in [(0, da), (1, db)] {
                for _ in 0..3 {
                    let (i, j) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
                    let numeric = central(|h| {
                        let mut ad = adapters.clone();
                        let m = if which == 0 { &mut ad.adapters[ai].a } else { &mut ad.adapters[ai].b };
                        m[(i, j)] += h;
                        dpo_loss(&params, &ad, &reference, &pair, beta).unwrap().0
                    });
                    let e = rel_err(g[(i, j)], numeric);
                    assert!(e <= TOL, "beta {beta} adapter {ai} {which} [{i},{j}]: {} vs {numeric} ({e})", g[(i, j)]);
                }
            }
        }
    }
}
