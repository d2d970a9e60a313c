use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use venom::ebm::{self, Energy, LangevinConfig};
use venom::par::{self, Exec};
use venom::tensor::matmul_with;
use venom::Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let mut rng = Rng::seed_from(1);
        let a = rng.gaussian_tensor(&[n, n]);
        let b = rng.gaussian_tensor(&[n, n]);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bch, _| {
                bch.iter(|| matmul_with(exec, black_box(&a), black_box(&b)).unwrap())
            });
        }
    }
    g.finish();
}

fn langevin(c: &mut Criterion) {
    let mut g = c.benchmark_group("langevin_chains");
    g.sample_size(10);
    let energy = Energy::MixtureOf8 { sigma: ebm::MIXTURE_SIGMA };
    let cfg = LangevinConfig { steps: 100, ..LangevinConfig::default() };
    for (name, exec) in MODES {
        g.bench_function(name, |bch| {
            bch.iter(|| ebm::langevin_sample(&energy, &cfg, 1000, &mut Rng::seed_from(2), exec).unwrap())
        });
    }
    g.finish();
}

/// Midpoint-rule density grid, the shape of the flow quadrature check.
fn quadrature(c: &mut Criterion) {
    let mut g = c.benchmark_group("quadrature_grid");
    let energy = Energy::MixtureOf8 { sigma: ebm::MIXTURE_SIGMA };
    let k = 400;
    let cell = 8.0 / k as f64;
    for (name, exec) in MODES {
        g.bench_function(name, |bch| {
            bch.iter(|| {
                let rows = par::map_indexed(exec, k, |i| {
                    let x = -4.0 + (i as f64 + 0.5) * cell;
                    (0..k)
                        .map(|j| (-energy.energy(&[x, -4.0 + (j as f64 + 0.5) * cell])).exp())
                        .sum::<f64>()
                });
                rows.iter().sum::<f64>() * cell * cell
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, langevin, quadrature);
criterion_main!(benches);
