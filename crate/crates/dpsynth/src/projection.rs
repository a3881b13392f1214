//! Minimal-occurrence projection: post-processing that removes rare binned
//! records so the released dataset never contains a record appearing fewer
//! than `m` times. Consumes no privacy budget.

use crate::data::{Dataset, Record};
use crate::dp::NoiseSource;
use crate::error::{Error, Result};

/// Projection output before and after size restoration.
#[derive(Debug, Clone)]
pub struct ProjectionOutcome {
    /// Pure projection: every count is >= m or the record is gone; counts
    /// above m are untouched.
    pub core: Dataset,
    /// Core plus duplicated rows restoring the exact input size.
    pub released: Dataset,
    /// Rows added during size restoration.
    pub duplicated: u64,
}

fn restore_size(core: &Dataset, target_n: u64, m: u64, noise: &mut NoiseSource) -> Result<(Dataset, u64)> {
    let mut released = core.clone();
    if core.n() > target_n {
        return Err(Error::ProjectionInfeasible(format!(
            "projection produced {} rows from {target_n}",
            core.n()
        )));
    }
    let deficit = target_n - core.n();
    if deficit == 0 {
        return Ok((released, 0));
    }
    // Duplicate rows of records already at count >= m, chosen uniformly, so
    // rarity never reappears.
    let eligible: Vec<Record> = core
        .iter()
        .filter(|(_, c)| *c >= m)
        .map(|(r, _)| r.clone())
        .collect();
    if eligible.is_empty() {
        return Err(Error::ProjectionInfeasible(format!(
            "no record reaches count {m}; nothing can absorb {deficit} duplicated rows"
        )));
    }
    for _ in 0..deficit {
        let pick = noise.uniform_index("projection_duplicate", eligible.len());
        released.add(eligible[pick].clone(), 1);
    }
    Ok((released, deficit))
}

/// Projects to minimal occurrence `m`: records at count >= m pass through;
/// for each multiplicity class k < m, floor(k*n_k/m) of its distinct records
/// are promoted to count m and the rest dropped; duplication then restores
/// the exact input size.
pub fn project_min_occurrence_detailed(
    d: &Dataset,
    m: u64,
    noise: &mut NoiseSource,
) -> Result<ProjectionOutcome> {
    if m == 0 {
        return Err(Error::Argument("minimal occurrence must be at least 1".into()));
    }
    let mut core = Dataset::new(std::sync::Arc::clone(d.layout()));
    // Distinct records per low multiplicity class, in stable map order.
    let mut classes: std::collections::BTreeMap<u64, Vec<&Record>> = Default::default();
    for (rec, c) in d.iter() {
        if c >= m {
            core.add(rec.clone(), c);
        } else {
            classes.entry(c).or_default().push(rec);
        }
    }
    for (k, recs) in classes {
        let n_k = recs.len() as u64;
        let keep = (k * n_k / m) as usize;
        let chosen = noise.index_subset("projection_survivors", recs.len(), keep);
        for idx in chosen {
            core.add(recs[idx].clone(), m);
        }
    }
    let (released, duplicated) = restore_size(&core, d.n(), m, noise)?;
    Ok(ProjectionOutcome {
        core,
        released,
        duplicated,
    })
}

pub fn project_min_occurrence(d: &Dataset, m: u64, noise: &mut NoiseSource) -> Result<Dataset> {
    Ok(project_min_occurrence_detailed(d, m, noise)?.released)
}

/// Earlier cascade formulation, kept for behavioral comparison: survivors of
/// class k join class k+1 candidates, each stage keeping a k/(k+1) fraction;
/// final survivors are set to count m.
pub fn project_min_occurrence_legacy_detailed(
    d: &Dataset,
    m: u64,
    noise: &mut NoiseSource,
) -> Result<ProjectionOutcome> {
    if m == 0 {
        return Err(Error::Argument("minimal occurrence must be at least 1".into()));
    }
    let mut core = Dataset::new(std::sync::Arc::clone(d.layout()));
    let mut pool: Vec<&Record> = Vec::new();
    for k in 1..m {
        let mut joined: Vec<&Record> = d
            .iter()
            .filter(|(_, c)| *c == k)
            .map(|(r, _)| r)
            .collect();
        pool.append(&mut joined);
        let keep = (k as u128 * pool.len() as u128 / (k as u128 + 1)) as usize;
        let chosen = noise.index_subset("projection_cascade", pool.len(), keep);
        let mut next = Vec::with_capacity(chosen.len());
        for idx in chosen {
            next.push(pool[idx]);
        }
        pool = next;
    }
    for rec in pool {
        core.add(rec.clone(), m);
    }
    for (rec, c) in d.iter() {
        if c >= m {
            core.add(rec.clone(), c);
        }
    }
    let (released, duplicated) = restore_size(&core, d.n(), m, noise)?;
    Ok(ProjectionOutcome {
        core,
        released,
        duplicated,
    })
}

pub fn project_min_occurrence_legacy(
    d: &Dataset,
    m: u64,
    noise: &mut NoiseSource,
) -> Result<Dataset> {
    Ok(project_min_occurrence_legacy_detailed(d, m, noise)?.released)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::testutil::toy_schema;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn ds(counts: &[(Record, u64)]) -> Dataset {
        let layout = toy_schema().base_layout().unwrap();
        let map: BTreeMap<Record, u64> = counts.iter().cloned().collect();
        Dataset::from_counts(layout, map).unwrap()
    }

    /// Pure-projection checks: support shrinks, no count lands in (0, m),
    /// counts >= m pass through untouched, per-class mass is floor-exact.
    fn assert_core_statements(input: &Dataset, core: &Dataset, m: u64) {
        for (rec, c) in core.iter() {
            assert!(c >= m, "core count below m");
            let orig = input.count_of(rec);
            assert!(orig > 0, "core invented a record");
            if orig >= m {
                assert_eq!(c, orig, "count at or above m changed");
            } else {
                assert_eq!(c, m, "promoted record not at m");
            }
        }
        for (rec, c) in input.iter() {
            if c >= m {
                assert_eq!(core.count_of(rec), c, "high-count record lost");
            }
        }
        // Per-class preserved mass: m * floor(k*n_k/m).
        let mut class_sizes: BTreeMap<u64, u64> = BTreeMap::new();
        for (_, c) in input.iter() {
            if c < m {
                *class_sizes.entry(c).or_insert(0) += 1;
            }
        }
        for (k, n_k) in class_sizes {
            let mass: u64 = input
                .iter()
                .filter(|(r, c)| *c == k && core.count_of(r) > 0)
                .map(|(r, _)| core.count_of(r))
                .sum();
            assert_eq!(mass, m * (k * n_k / m), "class {k} mass");
        }
    }

    #[test]
    fn rejects_m_zero() {
        let d = ds(&[(vec![0, 0], 3)]);
        let mut noise = NoiseSource::seeded_for_test(1);
        assert!(project_min_occurrence(&d, 0, &mut noise).is_err());
        assert!(project_min_occurrence_legacy(&d, 0, &mut noise).is_err());
    }

    #[test]
    fn m_one_is_identity() {
        let d = ds(&[(vec![0, 0], 1), (vec![1, 1], 4), (vec![2, 0], 2)]);
        let mut noise = NoiseSource::seeded_for_test(2);
        let out = project_min_occurrence_detailed(&d, 1, &mut noise).unwrap();
        assert_eq!(out.released.counts(), d.counts());
        assert_eq!(out.duplicated, 0);
        let leg = project_min_occurrence_legacy_detailed(&d, 1, &mut noise).unwrap();
        assert_eq!(leg.released.counts(), d.counts());
    }

    #[test]
    fn all_high_counts_pass_through() {
        let d = ds(&[(vec![0, 0], 2), (vec![1, 1], 5), (vec![3, 0], 2)]);
        let mut noise = NoiseSource::seeded_for_test(3);
        let out = project_min_occurrence_detailed(&d, 2, &mut noise).unwrap();
        assert_eq!(out.released.counts(), d.counts());
        assert_eq!(out.duplicated, 0);
        let leg = project_min_occurrence_legacy_detailed(&d, 2, &mut noise).unwrap();
        assert_eq!(leg.released.counts(), d.counts());
    }

    #[test]
    fn promotes_one_of_two_singletons() {
        // a:1 b:1 c:2 d:5 at m=2: one of {a,b} reaches 2, the other is
        // dropped, size stays 9 with no duplication.
        let a = vec![0u8, 0u8];
        let b = vec![1u8, 0u8];
        let d = ds(&[(a.clone(), 1), (b.clone(), 1), (vec![2, 0], 2), (vec![3, 0], 5)]);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..40 {
            let mut noise = NoiseSource::seeded_for_test(seed);
            let out = project_min_occurrence_detailed(&d, 2, &mut noise).unwrap();
            assert_core_statements(&d, &out.core, 2);
            assert_eq!(out.core.n(), 9);
            assert_eq!(out.released.n(), 9);
            assert_eq!(out.duplicated, 0);
            let promoted = (out.core.count_of(&a) > 0, out.core.count_of(&b) > 0);
            assert!(promoted == (true, false) || promoted == (false, true));
            seen.insert(promoted);
        }
        // Both sample outcomes occur across seeds.
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn duplication_restores_exact_size() {
        // Three singletons at m=2: floor(3/2)=1 promoted (mass 2), deficit 1
        // lands on a record already at count >= 2.
        let d = ds(&[
            (vec![0, 0], 1),
            (vec![1, 0], 1),
            (vec![2, 0], 1),
            (vec![3, 0], 4),
        ]);
        for seed in 0..20 {
            let mut noise = NoiseSource::seeded_for_test(seed);
            let out = project_min_occurrence_detailed(&d, 2, &mut noise).unwrap();
            assert_core_statements(&d, &out.core, 2);
            assert_eq!(out.core.n(), 6);
            assert_eq!(out.released.n(), d.n());
            assert_eq!(out.duplicated, 1);
            for (_, c) in out.released.iter() {
                assert!(c >= 2);
            }
        }
    }

    #[test]
    fn infeasible_when_nothing_reaches_m() {
        let d = ds(&[(vec![0, 0], 1)]);
        let mut noise = NoiseSource::seeded_for_test(4);
        let err = project_min_occurrence(&d, 2, &mut noise).unwrap_err();
        assert!(matches!(err, Error::ProjectionInfeasible(_)));
    }

    #[test]
    fn random_multisets_satisfy_statements() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let layout = toy_schema().base_layout().unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        for m in [2u64, 3] {
            for trial in 0..500 {
                let mut d = Dataset::new(Arc::clone(&layout));
                // Guarantee at least one heavy record so duplication has a
                // target.
                d.add(vec![5, 1], m + rng.gen_range(0..4));
                for _ in 0..rng.gen_range(1..10) {
                    d.add(
                        vec![rng.gen_range(0..6), rng.gen_range(0..2)],
                        rng.gen_range(1..6),
                    );
                }
                let mut noise = NoiseSource::seeded_for_test(trial);
                let out = project_min_occurrence_detailed(&d, m, &mut noise).unwrap();
                assert_core_statements(&d, &out.core, m);
                assert_eq!(out.released.n(), d.n());
                for (rec, c) in out.released.iter() {
                    assert!(c >= m);
                    assert!(d.count_of(rec) > 0);
                }
                // Legacy output satisfies the same released-level contract.
                let mut noise2 = NoiseSource::seeded_for_test(trial.wrapping_add(7000));
                let leg = project_min_occurrence_legacy_detailed(&d, m, &mut noise2).unwrap();
                assert_eq!(leg.released.n(), d.n());
                for (rec, c) in leg.released.iter() {
                    assert!(c >= m);
                    assert!(d.count_of(rec) > 0);
                    if d.count_of(rec) >= m {
                        assert!(leg.core.count_of(rec) == d.count_of(rec));
                    }
                }
            }
        }
    }

    #[test]
    fn legacy_first_stage_keeps_half() {
        // m=2, ten singletons: |R_1| = floor(10/2) = 5 survivors at count 2.
        let mut counts = Vec::new();
        for i in 0..5 {
            for j in 0..2 {
                counts.push((vec![i as u8, j as u8], 1u64));
            }
        }
        counts.push((vec![5, 1], 6)); // heavy absorber
        let d = ds(&counts);
        let mut noise = NoiseSource::seeded_for_test(9);
        let out = project_min_occurrence_legacy_detailed(&d, 2, &mut noise).unwrap();
        let promoted: u64 = out
            .core
            .iter()
            .filter(|(r, _)| d.count_of(r) == 1)
            .map(|(_, c)| c)
            .sum();
        assert_eq!(promoted, 10); // 5 survivors x count 2
        assert_eq!(out.released.n(), d.n());
    }

    #[test]
    fn legacy_preserves_class_mass_in_expectation() {
        // m=3 with twelve singletons and six doubletons. Cascade sizes are
        // deterministic: |R_1| = 6, |R_2| = floor(2/3 * 12) = 8, so the core
        // low mass is 24, matching the input low mass exactly; which class
        // the survivors come from is random with E[mass] = 12 per class.
        let mut runs_mass1 = Vec::new();
        let mut runs_mass2 = Vec::new();
        let schema = crate::schema::Schema {
            columns: vec![
                crate::schema::ColumnSpec {
                    name: "x".into(),
                    bounds: [0, 17],
                    base: "v".into(),
                    alternatives: vec![crate::schema::Alternative {
                        id: "v".into(),
                        bins: (0..=17)
                            .map(|v| crate::schema::BinSpec::single(&v.to_string(), v))
                            .collect(),
                    }],
                    coarse: None,
                    value_map: None,
                },
            ],
        };
        let layout = schema.base_layout().unwrap();
        let base: Vec<(Record, u64)> = (0..12)
            .map(|i| (vec![i as u8], 1u64))
            .chain((12..18).map(|i| (vec![i as u8], 2u64)))
            .collect();
        let d = Dataset::from_counts(layout, base.iter().cloned().collect()).unwrap();
        let runs = 10_000u32;
        for seed in 0..runs {
            let mut noise = NoiseSource::seeded_for_test(seed as u64);
            let out = project_min_occurrence_legacy_detailed(&d, 3, &mut noise).unwrap();
            let mass1: u64 = out
                .core
                .iter()
                .filter(|(r, _)| d.count_of(r) == 1)
                .map(|(_, c)| c)
                .sum();
            let mass2: u64 = out
                .core
                .iter()
                .filter(|(r, _)| d.count_of(r) == 2)
                .map(|(_, c)| c)
                .sum();
            assert_eq!(mass1 + mass2, 24); // deterministic core size
            runs_mass1.push(mass1 as f64);
            runs_mass2.push(mass2 as f64);
        }
        for (label, samples, want) in [
            ("singleton class", &runs_mass1, 12.0),
            ("doubleton class", &runs_mass2, 12.0),
        ] {
            let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
            let var: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (samples.len() - 1) as f64;
            let se = (var / samples.len() as f64).sqrt();
            assert!(
                (mean - want).abs() <= 3.0 * se.max(1e-9),
                "{label}: mean {mean} want {want} se {se}"
            );
        }
    }
}
