//! Central-difference checks of every differentiable graph op and of the
//! complete three-level model.

use crate::error::Result;
use crate::model::{HseModel, ModelConfig};
use crate::rng::SplitMix64;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Values in `[lo, hi]` with random sign, kept away from zero.
fn signed(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor {
    let mut t = Tensor::uniform(shape, lo, hi, rng);
    for v in t.data_mut() {
        if rng.below(2) == 0 {
            *v = -*v;
        }
    }
    t
}

fn primitive_cases(rng: &mut SplitMix64) -> Vec<(&'static str, Build, Vec<Tensor>)> {
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, rng);
    let mut cases: Vec<(&'static str, Build, Vec<Tensor>)> = Vec::new();
    cases.push((
        "conv2d",
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        vec![u(&[2, 3, 5, 5]), u(&[4, 3, 3, 3]), u(&[4])],
    ));
    cases.push((
        "conv2d_strided",
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
        vec![u(&[1, 2, 6, 6]), u(&[3, 2, 2, 2]), u(&[3])],
    ));
    cases.push((
        "linear",
        Box::new(|g, v| g.linear(v[0], v[1], v[2])),
        vec![u(&[3, 5]), u(&[4, 5]), u(&[4])],
    ));
    cases.push(("tanh", Box::new(|g, v| Ok(g.tanh(v[0]))), vec![u(&[3, 4])]));
    cases.push(("scale", Box::new(|g, v| Ok(g.scale(v[0], -2.5))), vec![u(&[6])]));
    cases.push(("max_pool2", Box::new(|g, v| g.max_pool2(v[0])), vec![u(&[2, 2, 4, 6])]));
    cases.push(("global_avg_pool", Box::new(|g, v| g.global_avg_pool(v[0])), vec![u(&[2, 3, 3, 4])]));
    cases.push(("to_locations", Box::new(|g, v| g.to_locations(v[0])), vec![u(&[2, 3, 2, 3])]));
    cases.push((
        "from_locations",
        Box::new(|g, v| g.from_locations(v[0], [2, 3, 2, 2])),
        vec![u(&[8, 3])],
    ));
    cases.push(("repeat_rows", Box::new(|g, v| g.repeat_rows(v[0], 3)), vec![u(&[2, 4])]));
    cases.push(("concat_cols", Box::new(|g, v| g.concat_cols(v[0], v[1])), vec![u(&[3, 2]), u(&[3, 4])]));
    cases.push((
        "gather_cols",
        Box::new(|g, v| g.gather_cols(v[0], vec![0, 0, 1, 2, 2, 2])),
        vec![u(&[2, 3])],
    ));
    cases.push(("spatial_softmax", Box::new(|g, v| g.spatial_softmax(v[0])), vec![u(&[2, 3, 3, 3])]));
    cases.push((
        "attend_aggregate",
        Box::new(|g, v| g.attend_aggregate(v[0], v[1])),
        vec![u(&[2, 3, 4, 4]), u(&[2, 3, 4, 4])],
    ));
    cases.push(("add", Box::new(|g, v| g.add(v[0], v[1])), vec![u(&[3, 3]), u(&[3, 3])]));
    cases.push(("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![u(&[3, 3]), u(&[3, 3])]));
    cases.push((
        "average",
        Box::new(|g, v| g.average(&[v[0], v[1], v[2]])),
        vec![u(&[2, 5]), u(&[2, 5]), u(&[2, 5])],
    ));
    cases.push(("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![u(&[4, 3])]));
    cases.push((
        "cross_entropy",
        Box::new(|g, v| g.cross_entropy(v[0], &[2, 0, 4])),
        vec![signed(&[3, 5], 0.1, 3.0, rng)],
    ));
    cases.push((
        "kl_divergence",
        Box::new(|g, v| {
            let t = g.constant(Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 2.0, -1.0, 1.5])?);
            g.kl_divergence(t, v[0], 4.0)
        }),
        vec![signed(&[2, 4], 0.5, 6.0, rng)],
    ));
    cases.push((
        "relu",
        Box::new(|g, v| Ok(g.relu(v[0]))),
        vec![signed(&[3, 4], 0.05, 1.0, rng)],
    ));
    cases
}

/// Three levels, `C = 8` feature channels and a 4×4 attention grid.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        level_sizes: vec![2, 3, 5],
        trunk_widths: vec![3, 4],
        feature_dim: 8,
        semantic_dim: 4,
        attention_hidden: 6,
        detach_guidance: false,
        ..ModelConfig::default()
    }
}

/// Checks the whole model with every parameter as an input. Biases are
/// randomized so that no relu sits at its kink.
pub fn check_model(config: ModelConfig, seed: u64, max_probes: usize) -> Result<GradCheckReport> {
    let model = HseModel::new(config, seed)?;
    let mut rng = SplitMix64::derive(seed, &[1]);
    let images = Tensor::uniform(&[2, model.config.in_channels, 16, 16], 0.0, 1.0, &mut rng);
    let inputs: Vec<Tensor> = model
        .params
        .iter()
        .map(|(name, t)| {
            if name.ends_with("bias") {
                Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng)
            } else {
                t.clone()
            }
        })
        .collect();
    grad_check(
        |g, vars| {
            let b = model.bind_vars(vars)?;
            let x = g.constant(images.clone());
            let outs = model.forward(g, &b, x)?;
            let mut total = g.sum(outs[0].fused());
            for o in &outs[1..] {
                let s = g.sum(o.fused());
                let sq = g.mul(s, s)?;
                total = g.add(total, sq)?;
            }
            Ok(total)
        },
        &inputs,
        &GradCheckOptions {
            max_probes_per_input: Some(max_probes),
            ..Default::default()
        },
    )
}

/// Every primitive followed by the toy model.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for (name, build, inputs) in primitive_cases(&mut rng) {
        let report = grad_check(|g, v| build(g, v), &inputs, &GradCheckOptions::default())?;
        out.push(SuiteCase { name, report });
    }
    out.push(SuiteCase {
        name: "hse_model",
        report: check_model(toy_model_config(), seed, 6)?,
    });
    Ok(out)
}
