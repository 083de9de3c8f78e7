//! Acceptance run: one line per criterion.
//!
//! Failures are reported but the exit status stays zero unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::time::Instant;

use lindblad_learn::constraints::{ConstraintSet, MeasurementRecord, NoiseSpec, ObservableTable};
use lindblad_learn::experiments::{
    log_log_slope, median, run, ExperimentConfig, ExperimentId, Table,
};
use lindblad_learn::model::{loss_dephasing_model, random_nn_model, ParamId};
use lindblad_learn::pauli::DensityMatrix;
use lindblad_learn::recovery::{reconstruction_error, recover};
use lindblad_learn::steady_state::find_steady_state;
use lindblad_learn::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn cfg(id: ExperimentId) -> ExperimentConfig {
    ExperimentConfig::for_experiment(id)
}

fn medians_by(t: &Table, key: &str, value: &str) -> Result<BTreeMap<u64, (f64, f64)>> {
    let k = t.column_index(key)?;
    let v = t.column_index(value)?;
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in &t.rows {
        let x = r[k].as_f64().unwrap();
        groups
            .entry(x.to_bits())
            .or_insert((x, Vec::new()))
            .1
            .push(r[v].as_f64().unwrap());
    }
    Ok(groups
        .into_iter()
        .map(|(b, (x, ys))| (b, (x, median(&ys))))
        .collect())
}

fn sorted_medians(t: &Table, key: &str, value: &str) -> Result<Vec<(f64, f64)>> {
    let mut v: Vec<(f64, f64)> = medians_by(t, key, value)?.into_values().collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(v)
}

fn kernel_exactness() -> Result<Outcome> {
    let start = Instant::now();
    let (mut worst_res, mut worst_delta) = (0.0f64, 0.0f64);
    for i in 0..50u64 {
        let n = 3 + (i % 3) as usize;
        let m = random_nn_model(n, std::f64::consts::FRAC_1_SQRT_2, 1000 + i)?;
        let ss = find_steady_state(&m, 1e-12)?;
        let cs = ConstraintSet::new(n, 3, i)?;
        let table = ObservableTable::new(&cs, m.basis())?;
        let rec = MeasurementRecord::measure(&ss.rho, &table.observables(), NoiseSpec::exact())?;
        let k = table.assemble(&rec)?;
        let c = m.pack();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit: Vec<f64> = c.iter().map(|x| x / norm).collect();
        let res = k.apply(&unit)?.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_res = worst_res.max(res);
        worst_delta = worst_delta.max(reconstruction_error(&recover(&k, 0.0)?.c_hat, &c)?);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: worst_res <= 1e-7 && worst_delta <= 1e-6 && secs < 300.0,
        detail: format!("max ‖Kĉ‖ = {worst_res:.2e}, max Δ = {worst_delta:.2e}, {secs:.1} s"),
    })
}

fn fig1a() -> Result<Outcome> {
    let out = run(&cfg(ExperimentId::Fig1a))?;
    let meds = sorted_medians(&out.trials, "n_constraints", "delta")?;
    let est = sorted_medians(&out.trials, "n_constraints", "delta_est")?;
    let m_params = 117.0;
    let under = meds.iter().filter(|(n, _)| *n <= 0.8 * m_params);
    let min_under = under.map(|x| x.1).fold(f64::INFINITY, f64::min);
    let full = meds
        .iter()
        .find(|(n, _)| *n == 207.0)
        .map(|x| x.1)
        .unwrap_or(f64::NAN);
    let full_est = est
        .iter()
        .find(|(n, _)| *n == 207.0)
        .map(|x| x.1)
        .unwrap_or(f64::NAN);
    let ratio = full / full_est;
    Ok(Outcome {
        pass: min_under > 0.3 && full < 3e-2 && (0.5..=2.0).contains(&ratio),
        detail: format!(
            "min median Δ for N ≤ 0.8M = {min_under:.3}, median Δ(N=207) = {full:.2e}, Δ/Δest = {ratio:.2}, {:.0} s",
            out.wall_seconds
        ),
    })
}

fn fig1a_inset() -> Result<Outcome> {
    let mut c = cfg(ExperimentId::Fig1aInset);
    c.epsilons = Some(vec![1e-6, 1e-5, 1e-4]);
    c.trials = Some(10);
    let out = run(&c)?;
    let t = &out.trials;
    let (ti, ri) = (
        t.column_index("trial")?,
        t.column_index("delta_over_epsilon")?,
    );
    let mut per_model: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in &t.rows {
        let id = r[ti].as_f64().unwrap() as i64;
        per_model
            .entry(id)
            .or_default()
            .push(r[ri].as_f64().unwrap());
    }
    let worst = per_model
        .values()
        .map(|v| {
            v.iter().copied().fold(f64::MIN, f64::max) / v.iter().copied().fold(f64::MAX, f64::min)
                - 1.0
        })
        .fold(0.0, f64::max);
    Ok(Outcome {
        pass: worst <= 0.25 && per_model.len() == 10,
        detail: format!("largest per-model spread of Δ/ε = {:.2}%", 100.0 * worst),
    })
}

fn fig1b() -> Result<Outcome> {
    let mut c = cfg(ExperimentId::Fig1b);
    c.n_sites = Some(5);
    let out = run(&c)?;
    let d = sorted_medians(&out.trials, "alpha_d", "delta")?;
    let dp = sorted_medians(&out.trials, "alpha_d", "delta_prior")?;
    let (imin, &(amin, _)) = d
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .unwrap();
    let interior = imin > 0 && imin + 1 < d.len();
    let prior_better = d.iter().zip(&dp).all(|(a, b)| b.1 < a.1);
    Ok(Outcome {
        pass: interior && (0.2..=1.0).contains(&amin) && prior_better,
        detail: format!("Λ=5, argmin α_D = {amin}, Δprior < Δ everywhere: {prior_better}"),
    })
}

fn scaling_law() -> Result<Outcome> {
    let mut c = cfg(ExperimentId::Fig1c);
    c.n_sites = Some(5);
    c.epsilon = Some(1e-8);
    let out = run(&c)?;
    let pts: Vec<(f64, f64)> = sorted_medians(&out.trials, "alpha_l", "delta")?
        .into_iter()
        .filter(|(a, _)| (0.02..=0.3).contains(a))
        .collect();
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let slope = log_log_slope(&x, &y);
    Ok(Outcome {
        pass: (slope + 2.0).abs() <= 0.3 && pts.len() >= 3,
        detail: format!("Λ=5, slope = {slope:.3} over {} points", pts.len()),
    })
}

fn fig2() -> Result<Outcome> {
    let mut c = cfg(ExperimentId::Fig2);
    c.n_constraints = Some(vec![12, 63]);
    let out = run(&c)?;
    let eps = 1e-4;
    let meds = sorted_medians(&out.trials, "n_constraints", "delta")?;
    let single = meds[0].1;
    let nn = meds[1].1;
    Ok(Outcome {
        pass: single <= 10.0 * eps && nn <= 3.0 * eps,
        detail: format!(
            "median Δ: single-site {:.2}ε, with neighbours {:.2}ε",
            single / eps,
            nn / eps
        ),
    })
}

fn strong_dissipation() -> Result<Outcome> {
    let mut c = cfg(ExperimentId::StrongDissipationB1);
    c.alpha_d_values = Some(vec![1.0, 10.0]);
    let out = run(&c)?;
    let t = &out.trials;
    let med = |ens: &str, a: f64| -> Result<f64> {
        let v = t.values(
            "delta",
            &[("ensemble", &ens.into()), ("alpha_d", &a.into())],
        )?;
        Ok(median(&v))
    };
    let nn = med("nearest_neighbor", 10.0)? / med("nearest_neighbor", 1.0)?;
    let single = med("single_site", 10.0)? / med("single_site", 1.0)?;
    Ok(Outcome {
        pass: nn <= 10.0 && single >= 100.0,
        detail: format!(
            "Λ=5, Δ(10)/Δ(1): nearest-neighbour jumps {nn:.2}, single-site jumps {single:.2e}"
        ),
    })
}

fn sqrt_n_law() -> Result<Outcome> {
    let mut c = cfg(ExperimentId::Fig3Synthetic);
    c.deltas = Some(vec![1e-4]);
    c.patch_counts = Some(vec![4, 8, 16, 32, 64]);
    c.trials = Some(200);
    let start = Instant::now();
    let out = run(&c)?;
    let secs = start.elapsed().as_secs_f64();
    let meds = sorted_medians(&out.trials, "n_patches", "delta_total")?;
    let n: Vec<f64> = meds.iter().map(|p| p.0).collect();
    let d: Vec<f64> = meds.iter().map(|p| p.1).collect();
    let slope = log_log_slope(&n, &d);
    let drift = sorted_medians(&out.trials, "n_patches", "mean_log_scale_error")?;
    let small_drift = drift.iter().all(|(n, x)| x.abs() < 0.1 * n.sqrt() * 1e-4);
    Ok(Outcome {
        pass: (0.35..=0.65).contains(&slope) && small_drift && secs < 60.0,
        detail: format!(
            "exponent = {slope:.3}, median Δ_total/δ at n=4..64: [{}], drift ≪ √n δ: {small_drift}",
            d.iter()
                .map(|x| format!("{:.2}", x / 1e-4))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    })
}

fn fully_mixed() -> Result<Outcome> {
    let n = 4;
    let m = loss_dephasing_model(n, 0.0, 3)?;
    let rho = DensityMatrix::fully_mixed(n);
    let ss = find_steady_state(&m, 1e-12)?;
    let ss_dist = (ss.rho.matrix() - rho.matrix()).norm_max();
    let cs = ConstraintSet::new(n, 3, 0)?;
    let table = ObservableTable::new(&cs, m.basis())?;
    let k = table.assemble(&MeasurementRecord::measure(
        &rho,
        &table.observables(),
        NoiseSpec::exact(),
    )?)?;
    let (mut max_all, mut max_sym) = (0.0f64, 0.0f64);
    for (j, id) in k.col_labels.iter().enumerate() {
        for i in 0..k.nrows() {
            let v = k.data[(i, j)].abs();
            max_all = max_all.max(v);
            if !matches!(id, ParamId::Imag(..)) {
                max_sym = max_sym.max(v);
            }
        }
    }
    let flagged = recover(&k, 0.0)?.ill_determined;
    Ok(Outcome {
        pass: max_all < 1e-10 && flagged,
        detail: format!(
            "max |K| = {max_all:.2e} (symmetric columns {max_sym:.2e}), ill-determined: {flagged}, steady state off by {ss_dist:.1e}"
        ),
    })
}

fn dynamics() -> Result<Outcome> {
    let out = run(&cfg(ExperimentId::DynamicsB3))?;
    let t = &out.trials;
    let rec = t.values("d_loc_recovered", &[])?;
    let peak = rec.iter().copied().fold(0.0, f64::max);
    let t_end = t.values("t", &[])?.into_iter().fold(0.0, f64::max);
    let final_max = t
        .values("d_loc_recovered", &[("t", &t_end.into())])?
        .into_iter()
        .fold(0.0, f64::max);
    let baseline = sorted_medians(t, "t", "d_loc_fully_mixed")?;
    let early = baseline
        .iter()
        .filter(|(x, _)| *x <= 1.0)
        .map(|p| p.1)
        .fold(0.0, f64::max);
    let eps = 1e-4;
    Ok(Outcome {
        pass: peak < 1e-3 && final_max < 5.0 * eps && early > 0.1,
        detail: format!("peak D_loc = {peak:.2e}, final = {final_max:.2e}, early fully-mixed baseline = {early:.2}"),
    })
}

fn main() {
    type Check = fn() -> Result<Outcome>;
    let checks: [(&str, Check); 10] = [
        ("kernel exactness", kernel_exactness),
        ("constraint-count sweep", fig1a),
        ("error proportional to noise", fig1a_inset),
        ("dissipation-strength sweep", fig1b),
        ("loss/dephasing scaling law", scaling_law),
        ("classical Ising with loss", fig2),
        ("strong dissipation", strong_dissipation),
        ("stitching error growth", sqrt_n_law),
        ("fully mixed degeneracy", fully_mixed),
        ("dynamics fidelity", dynamics),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let (tag, detail) = match f() {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] {:>2} {name}: {detail}", i + 1);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
