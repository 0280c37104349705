//! Mask sampler checks against brute-force pixel oracles.

use crate::error::Result;
use crate::imageio::{Dataset, DatasetSpec};
use crate::maskgen::{
    dilate, exclude_instances, free_form_mask, overlap_ratio, sample_object_aware_mask, translate_circular,
    InstanceMap, Mask, MaskConfig, MaskKind, MaskSample, SilhouetteLibrary, StrokeParams,
};
use crate::tensor::Prng;

use super::{Bound, Check, Measurement};

pub(super) const CHECKS: &[Check] = &[
    Check::new(
        "masks.freeform_coverage",
        "mean free-form hole coverage over 1000 default 64x64 samples lies in [0.10, 0.60]",
        freeform_coverage,
    ),
    Check::new("masks.dilation_brute_force", "dilation matches a per-pixel max-over-disk oracle", dilation_brute_force),
    Check::new(
        "masks.dilation_increases",
        "dilation by r >= 1 strictly grows every non-empty, non-full mask; r = 0 is the identity",
        dilation_increases,
    ),
    Check::new(
        "masks.circular_translation",
        "translation wraps around: a full-period shift is the identity and shifts compose",
        circular_translation,
    ),
    Check::new("masks.overlap_hand_count", "overlap ratios of hand-counted configurations", overlap_hand_count),
    Check::new(
        "masks.exclusion_covered_instance",
        "a 90%-covered instance is carved out with its dilated boundary; a 30%-covered one leaves the hole as is",
        exclusion_covered_instance,
    ),
    Check::new(
        "masks.pipeline_synthetic_layout",
        "1000 object-aware masks on a fixed instance layout satisfy the exclusion and area contracts",
        pipeline_synthetic_layout,
    ),
    Check::new(
        "masks.pipeline_fidelity",
        "10^4 object-aware masks on the procedural dataset: mixture frequencies, exclusion, area and iteration limit",
        pipeline_fidelity,
    ),
];

fn random_mask(rng: &mut Prng, w: usize, h: usize, p: f64) -> Mask {
    let data = (0..w * h).map(|_| rng.bernoulli(p) as u8).collect();
    Mask::from_vec(w, h, data).expect("sizes agree")
}

/// `out(p) = 1` iff some set pixel `q` has `|p - q|^2 <= r^2`.
fn dilate_oracle(mask: &Mask, r: usize) -> Mask {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let r = r as isize;
    let mut out = Mask::new(mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            let mut hit = false;
            for qy in (y - r).max(0)..=(y + r).min(h - 1) {
                for qx in (x - r).max(0)..=(x + r).min(w - 1) {
                    if (qy - y).pow(2) + (qx - x).pow(2) <= r * r && mask.get(qx as usize, qy as usize) {
                        hit = true;
                    }
                }
            }
            out.set(x as usize, y as usize, hit);
        }
    }
    out
}

fn freeform_coverage() -> Result<Vec<Measurement>> {
    let root = Prng::new(1);
    let params = StrokeParams::default();
    let (mut total, mut empty) = (0.0, 0usize);
    for i in 0..1000 {
        let m = free_form_mask(&mut root.substream_indexed("freeform", i), 64, 64, &params);
        total += m.fraction();
        empty += (m.area() == 0) as usize;
    }
    Ok(vec![
        Measurement::new("mean coverage", total / 1000.0, Bound::within(0.10, 0.60)),
        Measurement::new("empty masks", empty as f64, Bound::equals(0.0)),
    ])
}

fn dilation_brute_force() -> Result<Vec<Measurement>> {
    let mut rng = Prng::new(2);
    let (mut cases, mut mismatched) = (0usize, 0usize);
    for _ in 0..60 {
        let (w, h) = (rng.int_inclusive(1, 64), rng.int_inclusive(1, 64));
        let p = [0.01, 0.05, 0.3][rng.int_inclusive(0, 2)];
        let m = random_mask(&mut rng, w, h, p);
        for r in 0..=5 {
            cases += 1;
            mismatched += (dilate(&m, r) != dilate_oracle(&m, r)) as usize;
        }
    }
    Ok(vec![
        Measurement::new("cases", cases as f64, Bound::equals(360.0)),
        Measurement::new("cases differing from the oracle", mismatched as f64, Bound::equals(0.0)),
    ])
}

fn dilation_increases() -> Result<Vec<Measurement>> {
    let mut rng = Prng::new(3);
    let (mut not_grown, mut identity_broken) = (0usize, 0usize);
    for _ in 0..200 {
        let (w, h) = (rng.int_inclusive(2, 48), rng.int_inclusive(2, 48));
        let p = rng.uniform_range(0.0, 0.98);
        let mut m = random_mask(&mut rng, w, h, p);
        if m.area() == 0 {
            m.set(0, 0, true);
        }
        if m.area() == w * h {
            m.set(w - 1, h - 1, false);
        }
        identity_broken += (dilate(&m, 0) != m) as usize;
        for r in 1..=4 {
            not_grown += (dilate(&m, r).area() <= m.area()) as usize;
        }
    }
    Ok(vec![
        Measurement::new("masks not strictly grown (800 cases)", not_grown as f64, Bound::equals(0.0)),
        Measurement::new("radius 0 changed the mask", identity_broken as f64, Bound::equals(0.0)),
    ])
}

fn circular_translation() -> Result<Vec<Measurement>> {
    let mut rng = Prng::new(4);
    let mut failures = 0usize;
    for _ in 0..50 {
        let (w, h) = (rng.int_inclusive(1, 40), rng.int_inclusive(1, 40));
        let m = random_mask(&mut rng, w, h, 0.3);
        failures += (translate_circular(&m, h, w) != m) as usize;
        let (a, b) = ((rng.int_inclusive(0, h), rng.int_inclusive(0, w)), (rng.int_inclusive(0, h), rng.int_inclusive(0, w)));
        let twice = translate_circular(&translate_circular(&m, a.0, a.1), b.0, b.1);
        failures += (twice != translate_circular(&m, (a.0 + b.0) % h, (a.1 + b.1) % w)) as usize;
        failures += (translate_circular(&m, a.0, a.1).area() != m.area()) as usize;
    }
    Ok(vec![Measurement::new("failed identities", failures as f64, Bound::equals(0.0))])
}

fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> Mask {
    let mut m = Mask::new(w, h);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            m.set(x, y, true);
        }
    }
    m
}

fn overlap_hand_count() -> Result<Vec<Measurement>> {
    let inst = block(8, 8, 2, 2, 3, 3);
    let mut one = Mask::new(8, 8);
    one.set(3, 3, true);
    Ok(vec![
        Measurement::new(
            "1 of 9 covered: |r - 1/9|",
            (overlap_ratio(&one, &inst)? - 1.0 / 9.0).abs(),
            Bound::below(1e-15),
        ),
        Measurement::new("fully inside", overlap_ratio(&block(8, 8, 0, 0, 8, 8), &inst)?, Bound::equals(1.0)),
        Measurement::new("disjoint", overlap_ratio(&block(8, 8, 6, 6, 2, 2), &inst)?, Bound::equals(0.0)),
    ])
}

fn exclusion_covered_instance() -> Result<Vec<Measurement>> {
    // instance 1: 10x10 block at (10, 10); instance 2: 10x10 block at (40, 40)
    let (w, h) = (64, 64);
    let mut labels = vec![0u16; w * h];
    for (id, (x0, y0)) in [(10, 10), (40, 40)].into_iter().enumerate() {
        for y in y0..y0 + 10 {
            for x in x0..x0 + 10 {
                labels[y * w + x] = id as u16 + 1;
            }
        }
    }
    let inst = InstanceMap::new(w, h, labels)?;
    // covers 90% of instance 1 and 30% of instance 2
    let mut mask = block(w, h, 0, 0, 30, 19);
    let far = block(w, h, 40, 40, 10, 3);
    for y in 0..h {
        for x in 0..w {
            if far.get(x, y) {
                mask.set(x, y, true);
            }
        }
    }
    let radius = 2;
    let (out, excluded) = exclude_instances(&mask, &inst, 0.5, radius)?;
    let covered = dilate_oracle(&inst.instance(1), radius);
    let leaked = (0..w * h).filter(|&i| out.data()[i] != 0 && covered.data()[i] != 0).count();
    let below = block(w, h, 40, 40, 10, 3);
    let (out2, excluded2) = exclude_instances(&below, &inst, 0.5, radius)?;
    Ok(vec![
        Measurement::new("instance 1 overlap", overlap_ratio(&mask, &inst.instance(1))?, Bound::equals(0.9)),
        Measurement::new("instance 2 overlap", overlap_ratio(&mask, &inst.instance(2))?, Bound::equals(0.3)),
        Measurement::new("hole pixels inside dilated instance 1", leaked as f64, Bound::equals(0.0)),
        Measurement::new("instances excluded", excluded.len() as f64, Bound::equals(1.0)),
        Measurement::new(
            "30%-covered case: pixels changed",
            (0..w * h).filter(|&i| out2.data()[i] != below.data()[i]).count() as f64 + excluded2.len() as f64,
            Bound::equals(0.0),
        ),
    ])
}

/// Statistics of a batch of pipeline draws, rechecked pixel by pixel.
#[derive(Default)]
struct Audit {
    masks: usize,
    draws: [usize; 3],
    returned: [usize; 3],
    violations: usize,
    small: usize,
    small_not_fallback: usize,
    max_draws: usize,
}

impl Audit {
    fn record(&mut self, inst: &InstanceMap, s: &MaskSample, config: &MaskConfig) {
        self.masks += 1;
        for k in &s.draws {
            self.draws[k.index()] += 1;
        }
        self.returned[s.kind.index()] += 1;
        self.max_draws = self.max_draws.max(s.draws.len());
        self.violations += (expected_mask(inst, &s.initial, config) != s.mask) as usize;
        let (w, h) = (inst.width(), inst.height());
        if (s.mask.area() as f64) < config.min_area * (w * h) as f64 {
            self.small += 1;
            self.small_not_fallback += (s.accepted || s.draws.len() != config.max_iterations) as usize;
        }
    }

    fn measurements(&self, config: &MaskConfig, frequencies: bool) -> Vec<Measurement> {
        let mut out = Vec::new();
        if frequencies {
            let target = [config.p_freeform, config.p_object, config.p_rect];
            for (counts, what) in [(&self.draws, "draws"), (&self.returned, "returned masks")] {
                let total: usize = counts.iter().sum();
                for kind in MaskKind::ALL {
                    let f = counts[kind.index()] as f64 / total as f64;
                    let t = target[kind.index()];
                    out.push(Measurement::new(
                        format!("{kind:?} frequency over {total} {what} (target {t})"),
                        f,
                        Bound::within(t - 0.02, t + 0.02),
                    ));
                }
            }
        }
        out.extend([
            Measurement::new("masks differing from the exclusion oracle", self.violations as f64, Bound::equals(0.0)),
            Measurement::new(
                "fraction of masks with area >= min_area",
                1.0 - self.small as f64 / self.masks as f64,
                Bound::at_least(0.99),
            ),
            Measurement::new(
                "small masks not explained by the iteration limit",
                self.small_not_fallback as f64,
                Bound::equals(0.0),
            ),
            Measurement::new("most iterations used", self.max_draws as f64, Bound::within(1.0, 5.0)),
        ]);
        out
    }
}

/// The hole minus every instance covered by more than the threshold,
/// dilated by a disk; computed from raw labels.
fn expected_mask(inst: &InstanceMap, initial: &Mask, config: &MaskConfig) -> Mask {
    let (w, h) = (inst.width(), inst.height());
    let labels = inst.labels();
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    let (mut area, mut hit) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for (i, &l) in labels.iter().enumerate() {
        area[l as usize] += 1;
        hit[l as usize] += (initial.data()[i] != 0) as usize;
    }
    let removed: Vec<bool> = (0..=n)
        .map(|l| l > 0 && area[l] > 0 && hit[l] as f64 / area[l] as f64 > config.overlap_threshold)
        .collect();
    let r = config.boundary_dilation as isize;
    let mut out = Mask::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !initial.get(x as usize, y as usize) {
                continue;
            }
            let mut keep = true;
            for qy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for qx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let l = labels[qy as usize * w + qx as usize] as usize;
                    if removed[l] && (qy - y).pow(2) + (qx - x).pow(2) <= r * r {
                        keep = false;
                    }
                }
            }
            out.set(x as usize, y as usize, keep);
        }
    }
    out
}

fn pipeline_synthetic_layout() -> Result<Vec<Measurement>> {
    // six blocks of different sizes, including one touching the border
    let (w, h) = (64, 64);
    let mut labels = vec![0u16; w * h];
    let blocks = [(2, 2, 14, 10), (24, 4, 8, 8), (40, 0, 24, 18), (4, 30, 20, 20), (34, 34, 6, 6), (44, 44, 18, 16)];
    for (id, &(x0, y0, bw, bh)) in blocks.iter().enumerate() {
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                labels[y * w + x] = id as u16 + 1;
            }
        }
    }
    let inst = InstanceMap::new(w, h, labels)?;
    let config = MaskConfig::default();
    let library = SilhouetteLibrary::builtin();
    let root = Prng::new(5);
    let mut audit = Audit::default();
    for i in 0..1000 {
        let s = sample_object_aware_mask(&inst, &mut root.substream_indexed("mask", i), &config, &library)?;
        audit.record(&inst, &s, &config);
    }
    Ok(audit.measurements(&config, false))
}

fn pipeline_fidelity() -> Result<Vec<Measurement>> {
    let dataset = Dataset::new(DatasetSpec::default())?;
    let config = MaskConfig::default();
    let library = SilhouetteLibrary::builtin();
    let root = Prng::new(6);
    let mut audit = Audit::default();
    let mut with_instances = 0usize;
    for i in 0..10_000u64 {
        let sample = dataset.sample(i)?;
        with_instances += (sample.instances.num_instances() > 0) as usize;
        let s = sample_object_aware_mask(&sample.instances, &mut root.substream_indexed("mask", i), &config, &library)?;
        audit.record(&sample.instances, &s, &config);
    }
    let mut out = vec![Measurement::new(
        "images with at least one instance",
        with_instances as f64,
        Bound::at_least(5000.0),
    )];
    out.extend(audit.measurements(&config, true));
    Ok(out)
}
