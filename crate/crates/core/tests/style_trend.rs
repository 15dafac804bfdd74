use pgst_core::datagen::{generate_split, BenchmarkConfig, DomainSpec, SOURCE_DOMAIN};
use pgst_core::featstats::EPS_STYLE;
use pgst_core::groundnet::{GroundingModel, ModelConfig};
use pgst_core::prompts::{prompt_for_domain, ClassList, Vocab};
use pgst_core::styleengine::{fit_style, StyleFitConfig};

#[test]
fn fitted_losses_fall_on_the_synthetic_benchmark() {
    let classes = ClassList::driving();
    let model = GroundingModel::<f32>::new(ModelConfig::standard(Vocab::benchmark(&classes))).unwrap();
    let data = generate_split(&BenchmarkConfig::default(), &classes, &DomainSpec::identity(SOURCE_DOMAIN), "train", 8)
        .unwrap();
    let prompt = prompt_for_domain(&classes, "daytime_foggy").unwrap();
    let cfg = StyleFitConfig::default();
    assert_eq!(cfg.iterations, 100);

    let mut deltas = Vec::new();
    for s in data.samples.iter().filter(|s| !s.boxes.is_empty()) {
        let (style, trace) = fit_style(&model, s, &prompt, &cfg).unwrap();
        assert_eq!(trace.len(), 101);
        assert!(style.sigma.iter().all(|&v| f64::from(v) >= EPS_STYLE - 1e-12));
        deltas.push(trace[100] - trace[0]);
    }
    assert!(deltas.len() >= 5);
    deltas.sort_by(f64::total_cmp);
    let median = deltas[deltas.len() / 2];
    assert!(median < 0.0, "median trace change {median}");
}
