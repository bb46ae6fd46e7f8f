//! Finite-difference checks through the composed prompt encoder and mask decoder.

use aseg_core::gradcheck::{max_relative_error, numeric_gradient};
use aseg_core::model::{ModelConfig, SegModel};
use aseg_core::prompt::{DiffusionConfig, PromptEncoder, PromptVars};
use aseg_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
/// Compositions through ReLU.
const TOL: f64 = 1e-3;

fn analytic(
    f: &impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    store: &ParamStore,
) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv).unwrap();
    let mut scratch = store.clone();
    g.backward(out, &mut scratch).unwrap().get(xv).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; x.len()])
}

fn weighted_sum(g: &mut Graph<f64>, ys: &[Var], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total: Option<Var> = None;
    for &y in ys {
        let r = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng));
        let p = g.mul(y, r)?;
        let s = g.sum(p)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("at least one output"))
}

#[test]
fn encode_features_matches_finite_differences() {
    for seed in 0..3u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = PromptEncoder::new(&mut store, 3, 4, 4, DiffusionConfig::default(), &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 32, 4, 4], 1.0, &mut rng);
        let f = |g: &mut Graph<f64>, x: Var| {
            let feats = enc.encode_features(g, &store, x)?;
            weighted_sum(g, &feats, seed)
        };
        let a = analytic(&f, &x, &store);
        let n = numeric_gradient(&f, &x, H).unwrap();
        assert!(a.iter().any(|v| *v != 0.0));
        let e = max_relative_error(&a, &n);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn decoder_gradients_reach_both_prompt_embeddings() {
    let model = SegModel::new(ModelConfig {
        num_classes: 2,
        height: 32,
        width: 32,
        diffusion: DiffusionConfig::default(),
        init_seed: 7,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f_i = model.encode_images(&Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng)).unwrap().cast::<f64>();
    let sparse = Tensor::<f64>::randn(&[1, 2, 32], 1.0, &mut rng);
    let dense = Tensor::<f64>::randn(&[1, 32, 8, 8], 1.0, &mut rng);
    let pe = model.pe.cast::<f64>();

    let via_sparse = |g: &mut Graph<f64>, s: Var| {
        let f = g.constant(f_i.clone());
        let d = g.constant(dense.clone());
        let p = g.constant(pe.clone());
        let logits = model.mask_decoder.decode(g, &model.store, f, p, PromptVars { sparse: s, dense: d })?;
        let probs = g.sigmoid(logits)?;
        weighted_sum(g, &[probs], 3)
    };
    let a = analytic(&via_sparse, &sparse, &model.store);
    let n = numeric_gradient(&via_sparse, &sparse, H).unwrap();
    assert!(a.iter().any(|v| v.abs() > 1e-9));
    let e = max_relative_error(&a, &n);
    assert!(e < TOL, "P_s: {e}");

    let via_dense = |g: &mut Graph<f64>, d: Var| {
        let f = g.constant(f_i.clone());
        let s = g.constant(sparse.clone());
        let p = g.constant(pe.clone());
        let logits = model.mask_decoder.decode(g, &model.store, f, p, PromptVars { sparse: s, dense: d })?;
        let probs = g.sigmoid(logits)?;
        weighted_sum(g, &[probs], 4)
    };
    let a = analytic(&via_dense, &dense, &model.store);
    assert!(a.iter().filter(|v| v.abs() > 1e-9).count() > a.len() / 2);
}
