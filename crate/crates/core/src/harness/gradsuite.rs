//! Finite-difference checks over every layer type and the full classification
//! loss of a small network.

use rand::Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::losses::{asymmetric_loss, cross_entropy_loss, masked_mse_loss, AsymmetricLossConfig};
use crate::masking::generate_mask_matrix;
use crate::model::{multi_head_attention, transformer_block, Ablation, BlockVars, Bound, HeadKind, Mode, Model, ModelConfig};
use crate::rng::RngState;
use crate::tensor::{NamedTensor, Tape, Tensor, Var};

/// The configuration used for the whole-network check.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        c: 4,
        t: 16,
        h: 8,
        layers: 2,
        heads: 2,
        long_layers: 2,
        short_layers: 2,
        short_windows: vec![5, 3],
        ffn_mult: 4,
        head: HeadKind::Classify { n_classes: 4 },
        dropout: 0.2,
        per_head_scale: false,
        ablation: Ablation::Fused,
    }
}

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape agrees")
}

fn named(specs: &[(&str, &[usize], f64)], rng: &mut impl Rng) -> Vec<NamedTensor> {
    specs
        .iter()
        .map(|(n, s, sc)| NamedTensor {
            name: n.to_string(),
            tensor: rand_tensor(s, *sc, rng),
        })
        .collect()
}

/// Contracts a tensor with fixed random weights so no gradient is trivially
/// constant (as it would be for a plain sum of a softmax).
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = RngState::new(seed).stream(&[9]);
    let w = rand_tensor(tape.shape(x), 1.0, &mut rng);
    let w = tape.constant(&w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

/// Runs every check and returns `(name, report)` pairs.
pub fn gradcheck_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let root = RngState::new(seed);
    let mut rng = root.stream(&[0xC0DE]);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   mut params: Vec<NamedTensor>,
                   f: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>|
     -> Result<()> {
        let r = finite_diff_check(&mut params, f, opts)?;
        out.push((name.to_string(), r));
        Ok(())
    };

    let p = named(&[("x", &[3, 4], 1.0), ("w", &[4, 5], 0.5), ("b", &[5], 0.5)], &mut rng);
    run("linear", p, &mut |tape, v| {
        let y = tape.linear(v[0], v[1], Some(v[2]))?;
        project(tape, y, 1)
    })?;

    let p = named(&[("x", &[3, 6], 1.0), ("gamma", &[6], 1.0), ("beta", &[6], 1.0)], &mut rng);
    run("layer_norm", p, &mut |tape, v| {
        let y = tape.layer_norm(v[0], v[1], v[2], crate::model::LN_EPS)?;
        project(tape, y, 2)
    })?;

    let p = named(&[("x", &[4, 5], 2.0)], &mut rng);
    run("gelu", p, &mut |tape, v| {
        let y = tape.gelu(v[0]);
        project(tape, y, 3)
    })?;

    let p = named(&[("x", &[4, 5], 2.0)], &mut rng);
    run("sigmoid", p, &mut |tape, v| {
        let y = tape.sigmoid(v[0]);
        project(tape, y, 4)
    })?;

    let p = named(&[("x", &[4, 5], 2.0)], &mut rng);
    run("softmax", p, &mut |tape, v| {
        let y = tape.softmax(v[0])?;
        project(tape, y, 5)
    })?;

    let attn_specs: &[(&str, &[usize], f64)] = &[
        ("x", &[7, 4], 1.0),
        ("wq", &[4, 4], 0.7),
        ("wk", &[4, 4], 0.7),
        ("wv", &[4, 4], 0.7),
        ("wo", &[4, 4], 0.7),
    ];
    for (name, window) in [("full_attention", None), ("window_attention", Some(3))] {
        let p = named(attn_specs, &mut rng);
        run(name, p, &mut |tape, v| {
            let (y, _) = multi_head_attention(tape, v[0], v[1], v[2], v[3], v[4], 2, 0.5, window)?;
            project(tape, y, 6)
        })?;
    }

    let block_specs: &[(&str, &[usize], f64)] = &[
        ("x", &[6, 4], 1.0),
        ("ln1.g", &[4], 1.0),
        ("ln1.b", &[4], 0.5),
        ("wq", &[4, 4], 0.7),
        ("wk", &[4, 4], 0.7),
        ("wv", &[4, 4], 0.7),
        ("wo", &[4, 4], 0.7),
        ("ln2.g", &[4], 1.0),
        ("ln2.b", &[4], 0.5),
        ("w1", &[4, 8], 0.7),
        ("b1", &[8], 0.5),
        ("w2", &[8, 4], 0.7),
        ("b2", &[4], 0.5),
    ];
    for (name, window) in [("encoder_block", None), ("short_block", Some(3))] {
        let p = named(block_specs, &mut rng);
        run(name, p, &mut |tape, v| {
            let bv = BlockVars {
                ln1: (v[1], v[2]),
                wq: v[3],
                wk: v[4],
                wv: v[5],
                wo: v[6],
                ln2: (v[7], v[8]),
                w1: v[9],
                b1: v[10],
                w2: v[11],
                b2: v[12],
            };
            let y = transformer_block(tape, v[0], &bv, 2, 0.5, window, 0.0, &mut Mode::eval())?;
            project(tape, y, 7)
        })?;
    }

    let p = named(&[("u", &[5], 1.0), ("h", &[5, 6], 1.0)], &mut rng);
    run("fusion_pool", p, &mut |tape, v| {
        let u = tape.reshape(v[0], vec![1, 5])?;
        let y = tape.matmul(u, v[1])?;
        project(tape, y, 8)
    })?;

    let targets = [1.0, 0.0, 0.0, 1.0, 0.0];
    let p = named(&[("logits", &[5], 2.0)], &mut rng);
    let cfg = AsymmetricLossConfig {
        gamma_plus: 1.0,
        gamma_minus: 2.0,
        margin: 0.05,
    };
    run("asymmetric_loss", p, &mut |tape, v| {
        let probs = tape.sigmoid(v[0]);
        asymmetric_loss(tape, &targets, probs, &cfg)
    })?;

    let p = named(&[("logits", &[1, 5], 2.0)], &mut rng);
    run("cross_entropy", p, &mut |tape, v| cross_entropy_loss(tape, 2, v[0]))?;

    let mask = generate_mask_matrix(12, 3, 3.0, 0.3, &mut root.stream(&[0xAA]))?;
    let truth = rand_tensor(&[12, 3], 1.0, &mut rng);
    let p = named(&[("x_rec", &[12, 3], 1.0)], &mut rng);
    run("masked_mse", p, &mut |tape, v| {
        let t = tape.constant(&truth);
        masked_mse_loss(tape, t, v[0], &mask)
    })?;

    let model = Model::new(suite_model_config(), seed)?;
    let x = rand_tensor(&[16, 4], 1.0, &mut rng);
    let mut y = vec![0.0; 4];
    y[1] = 1.0;
    let loss_cfg = AsymmetricLossConfig::default();
    let params = model.params().as_slice().to_vec();
    run("stet_classification", params, &mut |tape, v| {
        let b = Bound::from_vars(v.to_vec());
        let (_, probs) = model.forward_classify(tape, &b, &x, &mut Mode::eval())?;
        asymmetric_loss(tape, &y, probs, &loss_cfg)
    })?;
    Ok(out)
}
