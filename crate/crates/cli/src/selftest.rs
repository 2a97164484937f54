//! Built-in correctness checks: a gradient finite-difference check, the
//! empty-slab cancellation property, a small-scale isolation oracle, and an
//! end-to-end recovery with certificate soundness. Deterministic; any failing
//! check flips the exit status.

use anyhow::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gia_core::attack::{
    compute_slices, craft_parameters, robust_span_test, run_vgia, AttackConfig, SliceRecord,
};
use gia_core::data::{gen_synthetic, SyntheticTargets};
use gia_core::eval::{score, INPUT_TOLERANCE, TARGET_TOLERANCE};
use gia_core::fl::ClientConfig;
use gia_core::linalg::{dot, norm_inf, Mat};
use gia_core::nn::{
    batch_gradient, forward, Batch, DenseModel, FeatureBox, Layer, LossKind, ModelShape, Targets,
};

const SELFTEST_CONFIG: &str = r#"
[attack]
direction_distribution = { kind = "normal", mean = 0.0, std = 0.01 }
downstream_distribution = { kind = "uniform", lo = 0.01, hi = 0.02 }
span_tolerance = 1e-8
fedavg_residual_threshold = 1e-3
min_probes_per_interval = 3
correctness_tolerance = 1e-9
seed = 11
"#;

pub fn run(sets: &[String]) -> Result<bool> {
    let attack = resolve_attack(sets)?;
    let checks: [(&str, fn(&AttackConfig) -> Result<(), String>); 4] = [
        ("gradient-check", check_gradients),
        ("empty-slab", check_empty_slab),
        ("isolation-oracle", check_isolation_oracle),
        ("end-to-end", check_end_to_end),
    ];
    let mut all_ok = true;
    for (name, check) in checks {
        match check(&attack) {
            Ok(()) => println!("selftest {name}: PASS"),
            Err(why) => {
                println!("selftest {name}: FAIL ({why})");
                all_ok = false;
            }
        }
    }
    Ok(all_ok)
}

fn resolve_attack(sets: &[String]) -> Result<AttackConfig> {
    let mut doc: toml::Value = SELFTEST_CONFIG.parse()?;
    for spec in sets {
        crate::config::apply_set(&mut doc, spec)?;
    }
    let section: crate::config::AttackSection = doc["attack"]
        .clone()
        .try_into()
        .map_err(|e| anyhow::anyhow!("selftest override: {e}"))?;
    Ok(section.to_config())
}

fn mean_loss(model: &DenseModel, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for j in 0..batch.len() {
        let out = forward(model, batch.sample(j)).unwrap();
        total += LossKind::SquaredError.loss(out.output(), &batch.target(j));
    }
    total / batch.len() as f64
}

fn check_gradients(_attack: &AttackConfig) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (d, n, hid) = (4, 6, 5);
    let mk = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        Mat::from_rows(
            (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect(),
        )
    };
    for _attempt in 0..50 {
        let model = DenseModel::new(vec![
            Layer {
                weights: mk(&mut rng, n, d),
                bias: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                relu: true,
            },
            Layer {
                weights: mk(&mut rng, hid, n),
                bias: (0..hid).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                relu: true,
            },
            Layer { weights: mk(&mut rng, 1, hid), bias: vec![0.1], relu: false },
        ])
        .unwrap();
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let ys: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Batch::new(Mat::from_rows(rows), Targets::Scalar(ys)).unwrap();

        // keep a margin to every ReLU kink so central differences are valid
        let margin = (0..batch.len())
            .flat_map(|j| {
                let t = forward(&model, batch.sample(j)).unwrap();
                t.pre.into_iter().flatten().collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, |m, z| m.min(z.abs()));
        if margin < 1e-3 {
            continue;
        }

        let analytic = batch_gradient(&model, &batch, LossKind::SquaredError).unwrap();
        let h = 1e-6;
        for l in 0..3 {
            let (rows_l, cols_l) =
                (model.layers()[l].out_dim(), model.layers()[l].in_dim());
            for r in 0..rows_l {
                for c in 0..cols_l {
                    let base = model.layers()[l].weights.get(r, c);
                    let mut up = model.clone();
                    up.layers_mut()[l].weights.set(r, c, base + h);
                    let mut dn = model.clone();
                    dn.layers_mut()[l].weights.set(r, c, base - h);
                    let fd = (mean_loss(&up, &batch) - mean_loss(&dn, &batch)) / (2.0 * h);
                    let a = analytic.layers[l].weights.get(r, c);
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    if rel > 1e-6 {
                        return Err(format!("layer {l} weight ({r},{c}): {a} vs fd {fd}"));
                    }
                }
            }
        }
        return Ok(());
    }
    Err("could not find a kink-free instance".into())
}

fn check_empty_slab(attack: &AttackConfig) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let d = 5;
    let mut cfg = attack.clone();
    cfg.feature_box = FeatureBox(vec![(0.0, 1.0); d]);
    let shape = ModelShape { input_dim: d, attack_neurons: 4, hidden: vec![6], outputs: 1 };
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let batch = gen_synthetic(d, 6, 48, SyntheticTargets::LinearNoise).unwrap();
    let mut proj: Vec<f64> = (0..6).map(|j| dot(&w, batch.sample(j))).collect();
    proj.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // widest gap hosts the empty middle slab
    let (mut lo, mut hi) = (proj[0] - 1.0, proj[0]);
    for p in proj.windows(2) {
        if p[1] - p[0] > hi - lo {
            (lo, hi) = (p[0], p[1]);
        }
    }
    let biases = vec![
        -proj[5] - 1.0,
        -(lo + 2.0 * (hi - lo) / 3.0),
        -(lo + (hi - lo) / 3.0),
        -proj[0] + 1.0,
    ];
    let crafted = craft_parameters(&cfg, &shape, &w, &biases, &mut rng)
        .map_err(|e| e.to_string())?;
    let report =
        batch_gradient(&crafted.model, &batch, LossKind::SquaredError).map_err(|e| e.to_string())?;
    let slices =
        compute_slices(&report, &crafted.gains, &biases, 1).map_err(|e| e.to_string())?;
    let mid = &slices[1];
    let mag = norm_inf(&mid.s).max(mid.beta.abs());
    if mag < 1e-12 {
        Ok(())
    } else {
        Err(format!("cancellation residue {mag:e}"))
    }
}

fn check_isolation_oracle(attack: &AttackConfig) -> Result<(), String> {
    let d = 6;
    for q in 3..=4usize {
        let children = q - 1;
        for m in 1..=2usize {
            for split in 0..=children.min(m) {
                // pattern: `split` children hold 1 resident each except when
                // everyone lands in one child
                for seed in 0..20u64 {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(900 + seed + (q as u64) * 101 + (m as u64) * 7);
                    let xs: Vec<Vec<f64>> =
                        (0..m).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
                    let coeff = |rng: &mut ChaCha8Rng| rng.gen_range(0.2..1.0);
                    let assignment: Vec<Vec<usize>> = if split == 0 {
                        let mut a = vec![Vec::new(); children];
                        a[0] = (0..m).collect();
                        a
                    } else {
                        let mut a = vec![Vec::new(); children];
                        for j in 0..m {
                            a[j % split].push(j);
                        }
                        a
                    };
                    let isolated = assignment.iter().all(|c| c.len() <= 1);
                    let slab = |residents: &[usize], rng: &mut ChaCha8Rng, round: usize| {
                        let mut s = vec![0.0; d];
                        let mut beta = 0.0;
                        for &j in residents {
                            let c = coeff(rng);
                            for (sv, xv) in s.iter_mut().zip(&xs[j]) {
                                *sv += c * xv;
                            }
                            beta += c;
                        }
                        SliceRecord { b_low: 0.0, b_high: 1.0, s, beta, round }
                    };
                    let parent = slab(&(0..m).collect::<Vec<_>>(), &mut rng, 1);
                    let child_slabs: Vec<SliceRecord> =
                        assignment.iter().map(|r| slab(r, &mut rng, 2)).collect();
                    let sigs: Vec<Vec<f64>> = child_slabs
                        .iter()
                        .filter(|c| norm_inf(&c.s).max(c.beta.abs()) > 1e-12)
                        .map(|c| c.signature())
                        .collect();
                    let basis: Vec<&[f64]> = sigs.iter().map(|v| v.as_slice()).collect();
                    let verdict =
                        robust_span_test(&parent.signature(), &basis, attack.span_tolerance);
                    if verdict != isolated {
                        return Err(format!(
                            "q={q} m={m} split={split} seed={seed}: verdict {verdict}, truth {isolated}"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_end_to_end(attack: &AttackConfig) -> Result<(), String> {
    let d = 4;
    let batch = gen_synthetic(d, 8, 77, SyntheticTargets::LinearNoise).unwrap();
    let mut cfg = attack.clone();
    cfg.feature_box = FeatureBox(vec![(0.0, 1.0); d]);
    // a narrow attack layer forces multi-resident slabs, so the certification
    // path is actually exercised
    let shape = ModelShape { input_dim: d, attack_neurons: 8, hidden: vec![8], outputs: 1 };
    let out = run_vgia(&shape, &batch, &cfg, &ClientConfig::fedsgd(), LossKind::SquaredError, 20)
        .map_err(|e| e.to_string())?;
    if !out.complete {
        return Err("search did not complete in 20 rounds".into());
    }
    if out.refused_certificates > 0 {
        return Err(format!(
            "{} certificates were refused by the coefficient replay; span verdicts are unsound",
            out.refused_certificates
        ));
    }
    let (m, _) = score(&out.reconstructions, &batch, INPUT_TOLERANCE, TARGET_TOLERANCE);
    if m.n_correct != 8 || m.n_spurious != 0 || m.false_positive_certificates != 0 {
        return Err(format!(
            "recovered {}/8 with {} spurious, {} false-positive certificates",
            m.n_correct, m.n_spurious, m.false_positive_certificates
        ));
    }
    if m.n_target_correct != 8 {
        return Err(format!("targets recovered {}/8", m.n_target_correct));
    }
    Ok(())
}
