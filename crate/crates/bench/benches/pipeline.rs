//! Benchmarks for the two hot paths: cohort sampling and REML fitting.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use riskaudit_core::catalog::FeatureCatalog;
use riskaudit_core::cohort::sample_cohort;
use riskaudit_core::inference::{fit_reml, LmmDesign, LmmForm};
use riskaudit_core::prompting::PromptStyle;
use riskaudit_core::rng;

fn bench_sample_cohort(c: &mut Criterion) {
    let catalog = FeatureCatalog::default_catalog();
    c.bench_function("sample_cohort_50", |b| {
        b.iter(|| sample_cohort(&catalog, 50, 42))
    });
}

fn simulated_design(groups: usize, levels: u8) -> LmmDesign {
    let mut r = rng::stream(7, "bench/reml");
    let mut response = Vec::new();
    let mut fixed = Vec::new();
    let mut grp = Vec::new();
    for k in 0..groups {
        let u = 0.5 * rng::standard_normal(&mut r);
        for t in 1..=levels {
            response.push(1.0 + 0.2 * t as f64 + u + rng::standard_normal(&mut r));
            fixed.push(vec![1.0, t as f64]);
            grp.push(k as u32);
        }
    }
    LmmDesign {
        response,
        fixed,
        columns: vec!["intercept".into(), "t".into()],
        groups: grp,
        form: LmmForm::Basic {
            model: "bench".into(),
            prompt: PromptStyle::Neutral,
        },
        dropped_rows: 0,
    }
}

fn bench_fit_reml(c: &mut Criterion) {
    let design = simulated_design(50, 10);
    c.bench_function("fit_reml_50x10", |b| {
        b.iter_batched(|| design.clone(), |d| fit_reml(&d).expect("fit"), BatchSize::SmallInput)
    });
}

criterion_group!(benches, bench_sample_cohort, bench_fit_reml);
criterion_main!(benches);
