use std::fs;

use hse_core::gradsuite::toy_model_config;
use hse_core::model::HseModel;
use hse_core::rng::SplitMix64;
use hse_core::tensor::Tensor;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/golden_scores.txt");

fn toy_scores() -> Vec<Vec<f64>> {
    let model = HseModel::new(toy_model_config(), 7).unwrap();
    let mut rng = SplitMix64::new(11);
    let images = Tensor::uniform(&[2, model.config.in_channels, 16, 16], 0.0, 1.0, &mut rng);
    let scores = model.predict_scores(&images).unwrap();
    scores.iter().map(|s| s.fused.data().to_vec()).collect()
}

fn render(levels: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in levels {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Set `HSE_BLESS=1` to rewrite the recorded scores.
#[test]
fn toy_scores_match_recorded_run() {
    let scores = toy_scores();
    assert_eq!(scores, toy_scores());
    if std::env::var_os("HSE_BLESS").is_some() {
        fs::write(GOLDEN, render(&scores)).unwrap();
    }
    let recorded: Vec<Vec<f64>> = fs::read_to_string(GOLDEN)
        .unwrap()
        .lines()
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(recorded.len(), scores.len());
    for (want, got) in recorded.iter().zip(&scores) {
        assert_eq!(want.len(), got.len());
        for (w, g) in want.iter().zip(got) {
            assert!((w - g).abs() <= 1e-12 * w.abs().max(1.0), "{w} vs {g}");
        }
    }
}
