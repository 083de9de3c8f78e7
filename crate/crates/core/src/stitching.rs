//! Patch-wise recovery on long chains and stitching of the patch generators.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, MeasurementRecord, ObservableTable};
use crate::error::{Error, Result};
use crate::model::OperatorBasis;
use crate::recovery::{reconstruction_error, recover, RecoveryResult};

/// Shared blocks with norm below this cannot fix the relative scale.
pub const DEFAULT_SHARED_FLOOR: f64 = 1e-6;

/// Overlapping patches tiling a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub n_sites: usize,
    pub patch_size: usize,
    pub stride: usize,
}

pub fn partition(n_sites: usize, patch_size: usize, stride: usize) -> Result<PatchLayout> {
    if patch_size == 0 || patch_size > n_sites {
        return Err(Error::InvalidArgument(format!(
            "patch of {patch_size} sites on a chain of {n_sites}"
        )));
    }
    if stride == 0 || stride > patch_size {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must lie in 1..={patch_size}"
        )));
    }
    if (n_sites - patch_size) % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "patches of {patch_size} with stride {stride} do not tile {n_sites} sites"
        )));
    }
    Ok(PatchLayout {
        n_sites,
        patch_size,
        stride,
    })
}

impl PatchLayout {
    pub fn n_patches(&self) -> usize {
        (self.n_sites - self.patch_size) / self.stride + 1
    }

    pub fn overlap(&self) -> usize {
        self.patch_size - self.stride
    }

    fn check(&self, j: usize) -> Result<()> {
        if j >= self.n_patches() {
            return Err(Error::InvalidArgument(format!(
                "patch {j} of {}",
                self.n_patches()
            )));
        }
        Ok(())
    }

    /// Sites `(first, last)` of patch `j`.
    pub fn patch_range(&self, j: usize) -> Result<(usize, usize)> {
        self.check(j)?;
        Ok((j * self.stride, j * self.stride + self.patch_size - 1))
    }

    /// Sites whose constraints belong to patch `j`: the patch minus one site
    /// on every side that faces another patch.
    pub fn window(&self, j: usize) -> Result<(usize, usize)> {
        let (lo, hi) = self.patch_range(j)?;
        let lo = if j > 0 { lo + 1 } else { lo };
        let hi = if j + 1 < self.n_patches() { hi - 1 } else { hi };
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "patch {j} has an empty interior"
            )));
        }
        Ok((lo, hi))
    }
}

fn range_mask(lo: usize, hi: usize) -> u64 {
    (lo..=hi).fold(0, |m, s| m | 1 << s)
}

/// Constraint strings on at most `k_max` consecutive sites inside the window of patch `j`.
pub fn patch_constraints(
    layout: &PatchLayout,
    j: usize,
    k_max: usize,
    ordering_seed: u64,
) -> Result<ConstraintSet> {
    let (lo, hi) = layout.window(j)?;
    ConstraintSet::window(
        layout.n_sites,
        lo,
        hi,
        k_max.min(hi - lo + 1),
        ordering_seed,
    )
}

/// Global parameter indices determined by patch `j`: terms inside the patch
/// that touch its window.
pub fn patch_columns(layout: &PatchLayout, j: usize, basis: &OperatorBasis) -> Result<Vec<usize>> {
    if basis.n_sites() != layout.n_sites {
        return Err(Error::DimensionMismatch {
            expected: layout.n_sites,
            found: basis.n_sites(),
        });
    }
    let (plo, phi) = layout.patch_range(j)?;
    let (wlo, whi) = layout.window(j)?;
    let (patch, window) = (range_mask(plo, phi), range_mask(wlo, whi));
    Ok(basis
        .param_ids()
        .into_iter()
        .enumerate()
        .filter(|(_, id)| {
            let s = basis.param_support(*id);
            s & !patch == 0 && s & window != 0
        })
        .map(|(i, _)| i)
        .collect())
}

/// Unit-norm coefficients recovered on one patch, labelled by global index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecovery {
    pub patch_index: usize,
    pub columns: Vec<usize>,
    pub c: Vec<f64>,
    /// Estimated error of `c`, used for the sign check.
    pub error: f64,
}

/// Observables for every patch, ready to be measured once on a global state.
pub fn patch_tables(
    layout: &PatchLayout,
    basis: &OperatorBasis,
    k_max: usize,
    ordering_seed: u64,
) -> Result<Vec<(Vec<usize>, ObservableTable)>> {
    let ids = basis.param_ids();
    (0..layout.n_patches())
        .map(|j| {
            let cols = patch_columns(layout, j, basis)?;
            let cs = patch_constraints(layout, j, k_max, ordering_seed)?;
            let table =
                ObservableTable::for_columns(&cs, basis, cols.iter().map(|&i| ids[i]).collect())?;
            Ok((cols, table))
        })
        .collect()
}

/// Recover one patch from its table and a record covering its observables.
pub fn recover_patch(
    j: usize,
    columns: &[usize],
    table: &ObservableTable,
    record: &MeasurementRecord,
) -> Result<(PatchRecovery, RecoveryResult)> {
    let k = table.assemble(record)?;
    let r = recover(&k, record.noise().epsilon)?;
    let error = if r.delta_est.is_finite() {
        r.delta_est
    } else {
        0.0
    };
    Ok((
        PatchRecovery {
            patch_index: j,
            columns: columns.to_vec(),
            c: r.c_hat.clone(),
            error,
        },
        r,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchStep {
    pub patch_index: usize,
    /// Cumulative factor applied to this patch, sign included.
    pub scale: f64,
    pub sign: f64,
    pub reference_column: Option<usize>,
    pub shared_norm_previous: f64,
    pub shared_norm_current: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchAudit {
    pub merge: String,
    pub steps: Vec<StitchStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchResult {
    /// Global indices in increasing order.
    pub columns: Vec<usize>,
    /// Unit norm, largest-magnitude entry positive.
    pub c: Vec<f64>,
    pub audit: StitchAudit,
}

impl StitchResult {
    /// Dense vector of length `m`, zero outside the covered columns.
    pub fn to_dense(&self, m: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; m];
        for (&i, &v) in self.columns.iter().zip(&self.c) {
            if i >= m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: i + 1,
                });
            }
            out[i] = v;
        }
        Ok(out)
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Left-to-right fold rescaling each patch to agree with its predecessor on
/// the shared terms. Overlapping estimates are averaged.
pub fn stitch(patches: &[PatchRecovery], floor: f64) -> Result<StitchResult> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("nothing to stitch".into()));
    }
    for p in patches {
        if p.columns.len() != p.c.len() {
            return Err(Error::DimensionMismatch {
                expected: p.columns.len(),
                found: p.c.len(),
            });
        }
    }
    let mut acc: BTreeMap<usize, (f64, u32)> = BTreeMap::new();
    let mut steps = Vec::with_capacity(patches.len());
    let mut prev: BTreeMap<usize, f64> = BTreeMap::new();
    for (j, p) in patches.iter().enumerate() {
        let cur: BTreeMap<usize, f64> =
            p.columns.iter().copied().zip(p.c.iter().copied()).collect();
        let mut step = StitchStep {
            patch_index: p.patch_index,
            scale: 1.0,
            sign: 1.0,
            reference_column: None,
            shared_norm_previous: 0.0,
            shared_norm_current: 0.0,
        };
        if j > 0 {
            let before = &patches[j - 1];
            let shared: Vec<usize> = cur
                .keys()
                .copied()
                .filter(|k| prev.contains_key(k))
                .collect();
            let raw_prev: BTreeMap<usize, f64> = before
                .columns
                .iter()
                .copied()
                .zip(before.c.iter().copied())
                .collect();
            let own_norm = norm(shared.iter().map(|k| raw_prev[k]));
            let cur_norm = norm(shared.iter().map(|k| cur[k]));
            if own_norm < floor || cur_norm < floor {
                return Err(Error::SharedBlockTooSmall {
                    left: before.patch_index,
                    right: p.patch_index,
                    norm: own_norm.min(cur_norm),
                });
            }
            let reference = shared.iter().copied().fold(shared[0], |b, k| {
                if raw_prev[&k].abs() > raw_prev[&b].abs() {
                    k
                } else {
                    b
                }
            });
            if raw_prev[&reference].abs() < 10.0 * before.error {
                return Err(Error::SignAmbiguous {
                    patch: before.patch_index,
                    coefficient: raw_prev[&reference],
                    error: before.error,
                });
            }
            let sign = prev[&reference].signum() * cur[&reference].signum();
            let scaled_norm = norm(shared.iter().map(|k| prev[k]));
            step.sign = sign;
            step.scale = sign * scaled_norm / cur_norm;
            step.reference_column = Some(reference);
            step.shared_norm_previous = own_norm;
            step.shared_norm_current = cur_norm;
        }
        prev = cur.iter().map(|(&k, &v)| (k, step.scale * v)).collect();
        for (&k, &v) in &prev {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        steps.push(step);
    }
    let columns: Vec<usize> = acc.keys().copied().collect();
    let mut c: Vec<f64> = acc.values().map(|(s, n)| s / *n as f64).collect();
    let nrm = norm(c.iter().copied());
    if nrm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let big = c
        .iter()
        .enumerate()
        .fold(0, |b, (i, x)| if x.abs() > c[b].abs() { i } else { b });
    let s = c[big].signum() / nrm;
    c.iter_mut().for_each(|x| *x *= s);
    Ok(StitchResult {
        columns,
        c,
        audit: StitchAudit {
            merge: "average".into(),
            steps,
        },
    })
}

/// Block sizes for synthetic patches, shaped like the nearest-neighbour
/// basis on 6-site patches with stride 4: 9 shared bond terms per overlap.
pub const SYNTHETIC_SHARED: usize = 9;
pub const SYNTHETIC_PATCH: usize = 93;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrial {
    pub n_patches: usize,
    pub delta: f64,
    pub delta_total: f64,
    /// `log(applied scale / true scale)` per patch.
    pub log_scale_errors: Vec<f64>,
    /// `sqrt(n) δ` is not small.
    pub outside_regime: bool,
}

/// Stitch `n_patches` synthetic patch recoveries, each a unit vector
/// perturbed by `δ` in a random direction, and report the global error.
pub fn synthetic_stitch_trial(n_patches: usize, delta: f64, seed: u64) -> Result<SyntheticTrial> {
    if n_patches == 0 {
        return Err(Error::InvalidArgument("need at least one patch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = SYNTHETIC_PATCH - SYNTHETIC_SHARED;
    let m = n_patches * step + SYNTHETIC_SHARED;
    let truth: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut patches = Vec::with_capacity(n_patches);
    let mut true_scales = Vec::with_capacity(n_patches);
    for j in 0..n_patches {
        let columns: Vec<usize> = (j * step..j * step + SYNTHETIC_PATCH).collect();
        let block: Vec<f64> = columns.iter().map(|&i| truth[i]).collect();
        let bn = norm(block.iter().copied());
        let dir: Vec<f64> = (0..SYNTHETIC_PATCH)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let dn = norm(dir.iter().copied());
        let mut c: Vec<f64> = block
            .iter()
            .zip(&dir)
            .map(|(b, d)| b / bn + delta * d / dn)
            .collect();
        let cn = norm(c.iter().copied());
        c.iter_mut().for_each(|x| *x /= cn);
        // the recovered patch is truth / (bn cn) up to the perturbation
        true_scales.push(bn * cn);
        patches.push(PatchRecovery {
            patch_index: j,
            columns,
            c,
            error: delta,
        });
    }
    let result = stitch(&patches, DEFAULT_SHARED_FLOOR)?;
    let stitched = result.to_dense(m)?;
    let delta_total = reconstruction_error(&stitched, &truth)?;
    let log_scale_errors = result
        .audit
        .steps
        .iter()
        .zip(&true_scales)
        .map(|(s, t)| (s.scale.abs() * true_scales[0] / t).ln())
        .collect();
    Ok(SyntheticTrial {
        n_patches,
        delta,
        delta_total,
        log_scale_errors,
        outside_regime: (n_patches as f64).sqrt() * delta > 0.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{NoiseSpec, ObservableTable};

    #[test]
    fn partition_examples() {
        // 24 patches of 6 with stride 4 cover 98 sites
        assert_eq!(partition(98, 6, 4).unwrap().n_patches(), 24);
        assert!(partition(100, 6, 4).is_err());
        assert_eq!(partition(6, 6, 4).unwrap().n_patches(), 1);
        assert_eq!(partition(14, 6, 4).unwrap().n_patches(), 3);
        assert_eq!(partition(14, 6, 4).unwrap().overlap(), 2);
        assert!(partition(13, 6, 4).is_err());
        assert!(partition(10, 6, 7).is_err());
        assert!(partition(4, 6, 4).is_err());
    }

    #[test]
    fn layout_tiles_chain() {
        let l = partition(22, 6, 4).unwrap();
        assert_eq!(l.patch_range(0).unwrap(), (0, 5));
        assert_eq!(l.patch_range(4).unwrap(), (16, 21));
        for j in 0..4 {
            let (_, hi) = l.patch_range(j).unwrap();
            let (lo, _) = l.patch_range(j + 1).unwrap();
            assert_eq!(hi + 1 - lo, 2);
        }
        assert_eq!(l.window(0).unwrap(), (0, 4));
        assert_eq!(l.window(2).unwrap(), (9, 12));
        assert_eq!(l.window(4).unwrap(), (17, 21));
        assert!(l.window(5).is_err());
    }

    #[test]
    fn patch_constraint_counts() {
        let l = partition(14, 6, 4).unwrap();
        // 4-site bulk window: 12 single, 27 two-site, 72 three-site strings
        assert_eq!(patch_constraints(&l, 1, 3, 0).unwrap().len(), 111);
        assert_eq!(patch_constraints(&l, 0, 3, 0).unwrap().len(), 15 + 36 + 108);
        let single = partition(6, 6, 4).unwrap();
        assert_eq!(
            patch_constraints(&single, 0, 3, 0).unwrap(),
            ConstraintSet::new(6, 3, 0).unwrap()
        );
        let (lo, hi) = l.window(2).unwrap();
        assert!(patch_constraints(&l, 2, 3, 0)
            .unwrap()
            .strings()
            .iter()
            .all(|p| p.support_range().is_some_and(|(a, b)| a >= lo && b <= hi)));
    }

    #[test]
    fn patch_columns_cover_basis_once_or_on_overlap() {
        let basis = OperatorBasis::nearest_neighbor(14).unwrap();
        let l = partition(14, 6, 4).unwrap();
        let cols: Vec<Vec<usize>> = (0..3)
            .map(|j| patch_columns(&l, j, &basis).unwrap())
            .collect();
        assert_eq!(cols[1].len(), 12 + 45 + 36);
        let mut count = vec![0; basis.num_params()];
        for c in &cols {
            for &i in c {
                count[i] += 1;
            }
        }
        assert!(count.iter().all(|&n| n == 1 || n == 2));
        // only the bond terms across each overlap are shared
        assert_eq!(count.iter().filter(|&&n| n == 2).count(), 2 * 9);
    }

    #[test]
    fn patch_rows_vanish_outside_patch() {
        let basis = OperatorBasis::nearest_neighbor(7).unwrap();
        let l = partition(7, 6, 1).unwrap();
        let rho = crate::pauli::DensityMatrix::random(7, 3);
        let (plo, phi) = l.patch_range(1).unwrap();
        let cs = patch_constraints(&l, 1, 3, 0).unwrap();
        let table = ObservableTable::new(&cs, &basis).unwrap();
        let rec =
            MeasurementRecord::measure(&rho, &table.observables(), NoiseSpec::exact()).unwrap();
        let k = table.assemble(&rec).unwrap();
        let inside = range_mask(plo, phi);
        let cols = patch_columns(&l, 1, &basis).unwrap();
        for (j, id) in basis.param_ids().into_iter().enumerate() {
            let zero = (0..k.nrows()).all(|i| k.data[(i, j)] == 0.0);
            if basis.param_support(id) & !inside != 0 {
                assert!(zero, "{id}");
            }
            if !cols.contains(&j) {
                assert!(zero, "{id} not a patch column");
            }
        }
    }

    #[test]
    fn single_patch_is_identity() {
        let p = PatchRecovery {
            patch_index: 0,
            columns: vec![3, 1, 2],
            c: vec![0.0, -3.0, 4.0],
            error: 0.0,
        };
        let r = stitch(&[p], DEFAULT_SHARED_FLOOR).unwrap();
        assert_eq!(r.columns, vec![1, 2, 3]);
        for (a, b) in r.c.iter().zip([-0.6, 0.8, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn split(truth: &[f64], ranges: &[(usize, usize)]) -> Vec<PatchRecovery> {
        ranges
            .iter()
            .enumerate()
            .map(|(j, &(a, b))| {
                let columns: Vec<usize> = (a..b).collect();
                let c: Vec<f64> = columns.iter().map(|&i| truth[i]).collect();
                let n = norm(c.iter().copied());
                PatchRecovery {
                    patch_index: j,
                    columns,
                    c: c.iter().map(|x| x / n).collect(),
                    error: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn exact_patches_reproduce_truth() {
        let truth: Vec<f64> = (0..20)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0 + 0.1)
            .collect();
        let patches = split(&truth, &[(0, 8), (6, 14), (12, 20)]);
        let r = stitch(&patches, DEFAULT_SHARED_FLOOR).unwrap();
        assert!(reconstruction_error(&r.to_dense(20).unwrap(), &truth).unwrap() < 1e-14);
    }

    #[test]
    fn stitch_is_gauge_invariant() {
        let truth: Vec<f64> = (0..20)
            .map(|i| ((i * 5 % 13) as f64 - 6.0) / 2.0 + 0.3)
            .collect();
        let mut patches = split(&truth, &[(0, 8), (6, 14), (12, 20)]);
        for p in &mut patches {
            p.c[0] += 1e-3;
        }
        let base = stitch(&patches, DEFAULT_SHARED_FLOOR).unwrap();
        for (j, s) in [(0, -2.5), (1, 0.01), (2, -7.0)] {
            let mut q = patches.clone();
            q[j].c.iter_mut().for_each(|x| *x *= s);
            let r = stitch(&q, DEFAULT_SHARED_FLOOR).unwrap();
            for (a, b) in r.c.iter().zip(&base.c) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tiny_shared_block_is_rejected() {
        let mut truth = vec![1.0; 12];
        truth[5] = 0.0;
        truth[6] = 0.0;
        let patches = split(&truth, &[(0, 7), (5, 12)]);
        assert!(matches!(
            stitch(&patches, DEFAULT_SHARED_FLOOR),
            Err(Error::SharedBlockTooSmall { .. })
        ));
    }

    #[test]
    fn ambiguous_sign_is_rejected() {
        let truth: Vec<f64> = (0..12).map(|i| 1.0 + i as f64).collect();
        let mut patches = split(&truth, &[(0, 7), (5, 12)]);
        patches[0].error = 0.5;
        assert!(matches!(
            stitch(&patches, DEFAULT_SHARED_FLOOR),
            Err(Error::SignAmbiguous { .. })
        ));
    }

    #[test]
    fn synthetic_trial_limits() {
        let t = synthetic_stitch_trial(10, 0.0, 1).unwrap();
        assert!(t.delta_total < 1e-14);
        assert!(t.log_scale_errors.iter().all(|e| e.abs() < 1e-13));
        let mut ds = Vec::new();
        for seed in 0..50 {
            ds.push(synthetic_stitch_trial(1, 1e-4, seed).unwrap().delta_total / 1e-4);
        }
        let mean = ds.iter().sum::<f64>() / ds.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "Δ/δ = {mean}");
    }
}
